"""Builds the optional compiled kernel extension.

The package is fully functional without the extension; kernel selection at
import time falls back to the numpy implementations in metagraph._kernels.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    extensions = []
else:
    extensions = cythonize(
        [
            Extension(
                "metagraph._ckernels",
                sources=["src/metagraph/_ckernels.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=extensions)
