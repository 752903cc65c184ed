"""Build script for the optional compiled kernel extension.

The package works without the extension (a pure-numpy backend is selected at
import time); building it just makes the body-model hot path faster. An
unavailable compiler therefore must not break installation.
"""

import os

import numpy
from setuptools import Extension, setup

PYX = "src/rgbdmesh/kernels/_speedups.pyx"

ext_modules = []
if os.path.exists(PYX):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "rgbdmesh.kernels._speedups",
                    [PYX],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        print("Cython not available; installing with the pure-numpy kernel backend only")

setup(ext_modules=ext_modules)
