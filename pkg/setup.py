"""Builds the optional compiled warp kernels.

The package works without the extension (a numpy fallback is selected at
import time), so the build is marked optional and a missing compiler or
Cython only costs speed, not functionality.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    import numpy

    extensions = cythonize(
        [
            Extension(
                "multirate.kernels._core",
                ["src/multirate/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                # No -ffast-math / -march=native: the compiled kernels must be
                # bit-identical to the numpy backend.
                extra_compile_args=["-O3", "-ffp-contract=off"],
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
