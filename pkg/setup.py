"""Build script for the optional compiled reprojection kernel.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compilation must not break installation.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "multisfm._kernels._reproj_cy",
                ["src/multisfm/_kernels/_reproj_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
