import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "hybridattn._core",
        ["src/hybridattn/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # no FMA contraction: kernels must match the numpy fallback bit for bit
        extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
