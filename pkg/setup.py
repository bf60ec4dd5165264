"""Build script; the Cython extension is optional and the package falls back to numpy without it."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("MPMFIT_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("mpmfit.kernels._ckernels", ["src/mpmfit/kernels/_ckernels.pyx"],
                       include_dirs=[numpy.get_include()], extra_compile_args=["-O3"],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
