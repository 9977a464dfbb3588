import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off pins double arithmetic to plain mul/add (no FMA), so the
# compiled KL curve matches a strict-IEEE reference loop bit for bit.
extensions = [
    Extension(
        "quantkit.kernels._core",
        ["src/quantkit/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
