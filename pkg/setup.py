import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "aif._kernels",
        ["src/aif/_kernels.pyx"],
        include_dirs=[np.get_include()],
        # no -ffast-math: reassociation would break bit-exact accumulation order
        extra_compile_args=["-O3"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
