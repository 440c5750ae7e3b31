"""The baseline SR generator: an EDSR-style residual network with a
sub-pixel (pixel-shuffle) upsampler, plus its training schedule,
checkpointing, and the constrained fine-tuning procedure that freezes the
up-sampling stages.

Checkpoints are plain values (numpy parameter maps); training operations
build a transient torch module, optimize it, and return a new checkpoint.
Exactly one process should mutate a training run at a time; ``predict`` is
safe for any number of concurrent readers of an immutable checkpoint.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import tensor_archive
from .errors import DivergenceError, InputError
from .imaging import ImageTensor, PairedSample, aligned_random_crop, validate_image

# Parameters with these name prefixes form the up-sampling tail: the
# pixel-shuffle stage convolutions and everything after them. The freezing
# rule holds exactly these fixed so fine-tuning can only move the network's
# feature-extraction body.
FROZEN_PREFIXES = ("upsample.", "out_conv.")

# Last convolution of the feature-extraction body (immediately before the
# first pixel-shuffle stage); the layer whose filters the analysis module
# correlates across model variants.
BODY_END_LAYER = "body_end"

_MEAN_SHIFT = 0.5  # fixed input centering; added back before the output clamp


@dataclass(frozen=True)
class SRArchitecture:
    """EDSR-style generator shape.

    Presets: ``paper`` (32 blocks, 256 feats, residual scaling 0.1) and
    ``desk`` (8 blocks, 64 feats, residual scaling 1.0) -- the desk preset
    keeps the residual-body + pixel-shuffle structure at a size trainable
    without a GPU.
    """

    n_resblocks: int
    n_feats: int
    scale: int
    residual_scaling: float = 1.0
    colors: int = 3

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise InputError(f"unsupported scale {self.scale}; expected 2, 3 or 4")
        if self.n_resblocks < 1 or self.n_feats < 1:
            raise InputError("n_resblocks and n_feats must be positive")

    def to_dict(self) -> dict:
        return {
            "n_resblocks": self.n_resblocks,
            "n_feats": self.n_feats,
            "scale": self.scale,
            "residual_scaling": self.residual_scaling,
            "colors": self.colors,
        }

    @staticmethod
    def from_dict(d: dict) -> "SRArchitecture":
        return SRArchitecture(**d)

    @staticmethod
    def preset(name: str, scale: int = 4) -> "SRArchitecture":
        if name == "paper":
            return SRArchitecture(32, 256, scale, residual_scaling=0.1)
        if name == "desk":
            return SRArchitecture(8, 64, scale, residual_scaling=1.0)
        raise InputError(f"unknown architecture preset {name!r}")


@dataclass(frozen=True)
class TrainSchedule:
    """Baseline training: pixel-wise L1, Adam(0.9, 0.999), step-decayed
    learning rate lr0 * decay_factor ** floor(epoch / decay_every).
    """

    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 20
    total_epochs: int = 50
    batch_size: int = 16
    lr_crop: int = 32
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class ModelCheckpoint:
    """Immutable snapshot: architecture, named float32 parameters, the
    frozen-parameter name list, and training metadata.
    """

    arch: SRArchitecture
    params: dict[str, np.ndarray]
    frozen: tuple[str, ...] = ()
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [n for n in self.frozen if n not in self.params]
        if missing:
            raise InputError(f"frozen names not in parameters: {missing}")


class _ResBlock(nn.Module):
    def __init__(self, n_feats: int, res_scale: float):
        super().__init__()
        self.conv1 = nn.Conv2d(n_feats, n_feats, 3, padding=1)
        self.conv2 = nn.Conv2d(n_feats, n_feats, 3, padding=1)
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.conv2(F.relu(self.conv1(x)))


class _UpStage(nn.Module):
    def __init__(self, n_feats: int, factor: int):
        super().__init__()
        self.conv = nn.Conv2d(n_feats, n_feats * factor * factor, 3, padding=1)
        self.shuffle = nn.PixelShuffle(factor)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class EDSRNet(nn.Module):
    """head conv -> residual body with global skip -> pixel-shuffle tail."""

    def __init__(self, arch: SRArchitecture):
        super().__init__()
        self.arch = arch
        f = arch.n_feats
        self.head = nn.Conv2d(arch.colors, f, 3, padding=1)
        self.body = nn.Sequential(
            *[_ResBlock(f, arch.residual_scaling) for _ in range(arch.n_resblocks)]
        )
        self.body_end = nn.Conv2d(f, f, 3, padding=1)
        if arch.scale == 3:
            stages = [_UpStage(f, 3)]
        else:
            stages = [_UpStage(f, 2) for _ in range(int(math.log2(arch.scale)))]
        self.upsample = nn.Sequential(*stages)
        self.out_conv = nn.Conv2d(f, arch.colors, 3, padding=1)

    def forward(self, x):
        h = self.head(x - _MEAN_SHIFT)
        b = self.body_end(self.body(h)) + h
        return self.out_conv(self.upsample(b)) + _MEAN_SHIFT


def to_module(model: ModelCheckpoint) -> EDSRNet:
    """Materialize a torch module carrying the checkpoint's parameters."""
    net = EDSRNet(model.arch)
    state = {k: torch.from_numpy(v.copy()) for k, v in model.params.items()}
    net.load_state_dict(state)
    return net


def from_module(
    net: EDSRNet, frozen: tuple[str, ...] = (), train_meta: dict | None = None
) -> ModelCheckpoint:
    params = {
        k: v.detach().cpu().numpy().astype(np.float32, copy=True)
        for k, v in net.state_dict().items()
    }
    return ModelCheckpoint(net.arch, params, tuple(frozen), dict(train_meta or {}))


def build_model(arch: SRArchitecture, rng_seed: int) -> ModelCheckpoint:
    """Initialize a fresh generator; deterministic given the seed.

    Uses torch's default fan-in-scaled uniform init: U(-b, b) with
    b = 1/sqrt(fan_in) for conv weights (and the matching bias bound).
    """
    torch.manual_seed(rng_seed)
    net = EDSRNet(arch)
    return from_module(net, train_meta={"init_seed": rng_seed})


def parameter_count(arch: SRArchitecture) -> int:
    """Closed-form parameter count for the architecture."""
    f, c = arch.n_feats, arch.colors
    conv = lambda cin, cout: cin * cout * 9 + cout
    n = conv(c, f)  # head
    n += arch.n_resblocks * 2 * conv(f, f)
    n += conv(f, f)  # body_end
    if arch.scale == 3:
        n += conv(f, 9 * f)
    else:
        n += int(math.log2(arch.scale)) * conv(f, 4 * f)
    n += conv(f, c)  # out_conv
    return n


def checkpoint_fingerprint(model: ModelCheckpoint) -> str:
    """SHA-256 over the architecture descriptor and raw parameter bytes."""
    h = hashlib.sha256(json.dumps(model.arch.to_dict(), sort_keys=True).encode())
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()


def save_checkpoint(model: ModelCheckpoint, path) -> None:
    meta = {
        "kind": "sr_checkpoint",
        "arch": model.arch.to_dict(),
        "frozen": sorted(model.frozen),
        "train_meta": model.train_meta,
    }
    tensor_archive.save_archive(path, meta, model.params)


def load_checkpoint(path) -> ModelCheckpoint:
    meta, tensors = tensor_archive.load_archive(path)
    if meta.get("kind") != "sr_checkpoint":
        raise InputError(f"{path} is not an SR checkpoint archive")
    return ModelCheckpoint(
        SRArchitecture.from_dict(meta["arch"]),
        tensors,
        tuple(meta["frozen"]),
        meta.get("train_meta", {}),
    )


def predict(model: ModelCheckpoint, lr_img: ImageTensor) -> ImageTensor:
    """Super-resolve one image: output dims are scale x input dims, values
    clamped to [0, 1]; deterministic (the net has no stochastic layers).
    """
    lr_img = validate_image(lr_img, "lr_img")
    if lr_img.shape[2] != model.arch.colors:
        raise InputError(
            f"expected {model.arch.colors}-channel input, got {lr_img.shape[2]}"
        )
    net = to_module(model)
    net.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.transpose(lr_img, (2, 0, 1))[None]).float()
        y = net(x).clamp_(0.0, 1.0)[0].numpy()
    return np.transpose(y, (1, 2, 0)).astype(np.float64)


def freeze_upsampling(model: ModelCheckpoint) -> ModelCheckpoint:
    """Mark the pixel-shuffle stages and every later layer as frozen.

    Idempotent; residual-body parameters are never included.
    """
    frozen = tuple(
        sorted(n for n in model.params if n.startswith(FROZEN_PREFIXES))
    )
    return replace(model, frozen=frozen)


def _require_scale(arch: SRArchitecture, pairs: list[PairedSample]) -> None:
    for p in pairs:
        if p.spec.scale != arch.scale:
            raise InputError(
                f"pair {p.id!r} has scale {p.spec.scale}, model expects {arch.scale}"
            )


def _crop_batch(
    pairs: list[PairedSample], crop: int, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    lrs, hrs = [], []
    for p in pairs:
        c = aligned_random_crop(p, crop, rng)
        lrs.append(np.transpose(c.lr, (2, 0, 1)))
        hrs.append(np.transpose(c.hr, (2, 0, 1)))
    to_t = lambda xs: torch.from_numpy(np.stack(xs)).float()
    return to_t(lrs), to_t(hrs)


def _step(net, opt, lr_b, hr_b) -> float:
    opt.zero_grad()
    loss = F.l1_loss(net(lr_b), hr_b)
    loss.backward()
    opt.step()
    val = float(loss.detach())
    if not math.isfinite(val):
        raise DivergenceError(f"non-finite training loss {val}")
    return val


def train(
    model: ModelCheckpoint, dataset: list[PairedSample], schedule: TrainSchedule
) -> ModelCheckpoint:
    """Train with L1 loss and the step-decayed Adam schedule.

    One epoch is one shuffled pass over the dataset with a fresh random
    crop per sample per batch. Deterministic given (seed, dataset order).
    """
    if not dataset:
        raise InputError("train requires a nonempty dataset")
    _require_scale(model.arch, dataset)
    net = to_module(model)
    net.train()
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    opt = torch.optim.Adam(net.parameters(), lr=schedule.lr0, betas=(0.9, 0.999))
    loss_curve, lr_curve = [], []
    for epoch in range(schedule.total_epochs):
        lr_now = schedule.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr_now
        lr_curve.append(lr_now)
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset), schedule.batch_size):
            batch = [dataset[i] for i in order[start : start + schedule.batch_size]]
            lr_b, hr_b = _crop_batch(batch, schedule.lr_crop, rng)
            losses.append(_step(net, opt, lr_b, hr_b))
        loss_curve.append(float(np.mean(losses)))
    meta = dict(model.train_meta)
    meta.update(
        {
            "epochs": schedule.total_epochs,
            "loss_curve": loss_curve,
            "lr_curve": lr_curve,
            "seed": schedule.seed,
        }
    )
    return from_module(net, model.frozen, meta)


def fine_tune(
    model: ModelCheckpoint,
    images: list[PairedSample],
    cfg,
    epoch_callback=None,
) -> ModelCheckpoint:
    """Constrained fine-tuning on a small image set.

    Requires the freezing rule to be applied first; only non-frozen
    parameters receive updates (frozen tensors stay bit-identical). One
    epoch is ceil(64 / n_images) Adam steps at cfg.lr, each step taking one
    fresh aligned random crop of cfg.crop (LR space) per image, with the
    whole set as the batch. ``epoch_callback(epoch, checkpoint)`` is
    invoked at epoch 0 (pre-update state) and after every epoch.

    Args:
        cfg: provides lr, crop, epochs and rng_seed (an AdaptationConfig).
    """
    if not images:
        raise InputError("fine_tune requires a nonempty image set")
    if not model.frozen:
        raise InputError("fine_tune requires the freezing rule; call freeze_upsampling first")
    _require_scale(model.arch, images)
    net = to_module(model)
    net.train()
    frozen = set(model.frozen)
    for name, p in net.named_parameters():
        p.requires_grad_(name not in frozen)
    trainable = [p for p in net.parameters() if p.requires_grad]
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    opt = torch.optim.Adam(trainable, lr=cfg.lr, betas=(0.9, 0.999))
    steps_per_epoch = math.ceil(64 / len(images))
    loss_curve = []

    def snapshot(epoch: int) -> ModelCheckpoint:
        meta = dict(model.train_meta)
        meta.update({"fine_tune_epoch": epoch, "fine_tune_lr": cfg.lr})
        return from_module(net, model.frozen, meta)

    if epoch_callback is not None:
        epoch_callback(0, snapshot(0))
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps_per_epoch):
            lr_b, hr_b = _crop_batch(images, cfg.crop, rng)
            losses.append(_step(net, opt, lr_b, hr_b))
        loss_curve.append(float(np.mean(losses)))
        if epoch_callback is not None:
            epoch_callback(epoch, snapshot(epoch))
    final = snapshot(cfg.epochs)
    final.train_meta["fine_tune_loss_curve"] = loss_curve
    return final


def l1_gradient_check(
    model: ModelCheckpoint,
    batch: list[PairedSample],
    n_params: int = 50,
    h: float = 1e-4,
    rng_seed: int = 0,
) -> float:
    """Compare autograd L1 gradients against central finite differences.

    Runs in float64. A sampled coordinate is skipped when the perturbation
    makes any pixel residual change sign between the two evaluations, or
    when some unperturbed residual sits within 1e-6 of the L1 kink --
    finite differences are meaningless across the non-smooth point.

    Returns:
        Max relative deviation over the sampled coordinates.

    Raises:
        InputError: if the model or batch exceeds the tiny-probe bounds.
    """
    if model.arch.n_resblocks > 2 or model.arch.n_feats > 8:
        raise InputError("gradient check expects a tiny model (<= 2 blocks, <= 8 feats)")
    if not 1 <= len(batch) <= 2:
        raise InputError("gradient check expects a batch of 1 or 2 crops")
    net = to_module(model).double()
    net.train()
    lrs = torch.from_numpy(np.stack([np.transpose(p.lr, (2, 0, 1)) for p in batch]))
    hrs = torch.from_numpy(np.stack([np.transpose(p.hr, (2, 0, 1)) for p in batch]))

    loss = F.l1_loss(net(lrs), hrs)
    grads = torch.autograd.grad(loss, [p for p in net.parameters()])
    named = list(net.named_parameters())
    grad_map = {name: g for (name, _), g in zip(named, grads)}

    rng = np.random.default_rng(rng_seed)
    coords = []
    for _ in range(n_params):
        name, p = named[rng.integers(len(named))]
        coords.append((name, int(rng.integers(p.numel()))))

    params = dict(net.named_parameters())
    worst = 0.0
    with torch.no_grad():
        base_res = net(lrs) - hrs
        at_kink = float(base_res.abs().min()) < 1e-6
        for name, flat in coords:
            if at_kink:
                continue
            p = params[name]
            orig = float(p.view(-1)[flat])
            p.view(-1)[flat] = orig + h
            res_plus = net(lrs) - hrs
            p.view(-1)[flat] = orig - h
            res_minus = net(lrs) - hrs
            p.view(-1)[flat] = orig
            if bool((res_plus * res_minus < 0).any()):
                continue  # crossed an L1 kink
            fd = float((res_plus.abs().mean() - res_minus.abs().mean()) / (2 * h))
            ad = float(grad_map[name].view(-1)[flat])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
