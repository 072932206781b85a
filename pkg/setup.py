"""Builds the optional compiled kernels; the package works without them."""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("ROBUST_BCE_NO_EXT", "0") in ("", "0"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "robust_bce._kernels",
                    ["src/robust_bce/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # strict IEEE semantics keep results identical to the numpy path
                    extra_compile_args=["-O2", "-fno-fast-math", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
