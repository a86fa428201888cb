import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install, numpy fallback kernels only
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("THERMALGAN_PURE") != "1":
    # No -ffast-math and no fp contraction: the forward conv must stay bitwise
    # equal to the naive loop reference.
    ext_modules = cythonize(
        [
            Extension(
                "thermalgan._kernels",
                ["src/thermalgan/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-march=native", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
