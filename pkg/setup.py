"""Builds the optional compiled LIF kernel.

Without Cython or a C compiler the package still installs and runs on the
numpy fallback.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("SPIKEALIGN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "spikealign._lifscan",
                    ["src/spikealign/_lifscan.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: results must match the numpy backend bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
