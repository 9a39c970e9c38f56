"""Builds the optional compiled assignment kernel; the package works without it."""

from setuptools import setup

try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("gamloc._hungarian", ["src/gamloc/_hungarian.pyx"], extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
