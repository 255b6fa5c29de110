import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; simtcnn falls back to numpy kernels
    cythonize = None

# fp-contract=off keeps "acc + w*x" as two roundings; fused mode uses fmaf explicitly
CFLAGS = ["-O3", "-ffp-contract=off", "-fno-fast-math"]
if not os.environ.get("SIMTCNN_PORTABLE"):
    CFLAGS.append("-march=native")

ext_modules = []
if cythonize is not None and not os.environ.get("SIMTCNN_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "simtcnn._core",
                ["src/simtcnn/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=CFLAGS,
                libraries=["m"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
