"""Build the optional compiled kernels.

The package works without them: ``sllab.kernels`` falls back to NumPy
when ``sllab._kernels`` cannot be imported.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("SLLAB_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "sllab._kernels",
                    ["src/sllab/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
