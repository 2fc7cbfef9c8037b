"""Build script for the optional compiled kernel extension.

The package works without the extension (numpy/pure-Python fallbacks are
selected at import time); any build failure here downgrades to a warning.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "dsq.kernels._ck",
                ["src/dsq/kernels/_ck.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - depends on build env
    sys.stderr.write(f"dsq: skipping compiled kernels ({exc}); using fallbacks\n")

setup(ext_modules=ext_modules)
