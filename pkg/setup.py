"""Build the optional compiled kernels.

The package works without them (``occslam._pykernels`` is used instead), so a
missing Cython or compiler only drops the extension.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("OCCSLAM_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "occslam._kernels",
                    ["src/occslam/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-fno-fast-math", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
