"""Build script: compiles the optional fast kernel extension.

The package works without the extension (a pure-numpy fallback is selected
at import time), so the extension is marked optional and any compiler
failure degrades to the pure build instead of aborting the install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "swladapt.autodiff._fastkernels",
        ["src/swladapt/autodiff/_fastkernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext.optional = True
    ext_modules = cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    # No Cython / numpy at build time: ship the pure-python package.
    ext_modules = []

setup(ext_modules=ext_modules)
