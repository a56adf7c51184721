"""Build the optional compiled kernel; the package works without it."""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install
    pass
else:
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("legcalib._blocktri", ["src/legcalib/_blocktri.pyx"],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
