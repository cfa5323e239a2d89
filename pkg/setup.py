import os

from setuptools import setup

ext_modules = []
if not os.environ.get("TAPS_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("taps._ckernels", ["src/taps/_ckernels.pyx"], include_dirs=[np.get_include()])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
