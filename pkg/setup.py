"""Builds the optional compiled kernel core.

`pip install -e . --no-build-isolation` compiles aclab._ckernels when Cython
and a C compiler are available. Without the extension the package falls back
to the NumPy kernels at import time, so the build is allowed to degrade.
Set ACLAB_NO_EXT=1 to skip the extension on purpose.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("ACLAB_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "aclab._ckernels",
                    ["src/aclab/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
