import os

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    extra = ["-O3", "-fopenmp"]
    if os.uname().machine in ("x86_64", "amd64"):
        # AVX2+F16C enables the hardware-converted SIMD path in halfgemm.h;
        # the portable scalar path produces bit-identical results elsewhere.
        extra += ["-mavx2", "-mf16c"]
    ext_modules = cythonize(
        [
            Extension(
                "ca3d._native",
                sources=["src/ca3d/_native.pyx"],
                include_dirs=[np.get_include(), "src/ca3d"],
                extra_compile_args=extra,
                extra_link_args=["-fopenmp"],
            )
        ],
        compiler_directives={"language_level": 3, "boundscheck": False, "wraparound": False},
    )
except ImportError:
    import warnings

    warnings.warn("Cython/numpy unavailable; building without the compiled kernel core")

setup(ext_modules=ext_modules)
