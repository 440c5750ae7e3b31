"""Builds the optional compiled kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time), so the build is marked optional and failures are non-fatal.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "activated_sr.kernels._native",
    sources=["src/activated_sr/kernels/_native.pyx"],
    include_dirs=[numpy.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    extra_compile_args=["-O3"],
    optional=True,
)

setup(ext_modules=cythonize([ext], language_level=3))
