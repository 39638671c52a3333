import os

import numpy as np
from setuptools import Extension, setup

# PIXELRCNN_NO_EXT=1 skips the compiled core; the package then runs on the numpy fallback.
ext_modules = []
if not os.environ.get("PIXELRCNN_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "pixelrcnn._kernels",
                    ["src/pixelrcnn/_kernels.pyx"],
                    include_dirs=[np.get_include(), "src/pixelrcnn"],
                    depends=["src/pixelrcnn/_vecmath.h"],
                    # no FP traps assumed, so gcc may if-convert the clamps in _vecmath.h
                    extra_compile_args=["-O3", "-fno-trapping-math"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
