import sys

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize
except ImportError:
    print("Cython not available; installing pure-Python kernels only", file=sys.stderr)
else:
    ext_modules = cythonize(
        [
            Extension(
                "carpose._kernels",
                ["src/carpose/_kernels.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
