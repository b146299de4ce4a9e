import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernel is optional: without Cython the package installs and
# runs on the numpy fallback.
try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# -ffp-contract=off keeps the float64 rescoring dot free of FMA contraction so
# it reproduces the fallback's sequential sum bit for bit.  The AMX screen is
# compiled through function target attributes and enabled at run time only.
compile_args = ["-O3", "-ffp-contract=off", "-fno-math-errno", "-fno-trapping-math"]
if os.environ.get("FEWSHOT_NBNN_PORTABLE") != "1":
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and os.environ.get("FEWSHOT_NBNN_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "fewshot_nbnn._kernels",
                ["src/fewshot_nbnn/_kernels.pyx", "src/fewshot_nbnn/_nbnn_core.c"],
                include_dirs=[np.get_include(), "src/fewshot_nbnn"],
                extra_compile_args=compile_args,
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
