"""Build the optional Cython interval kernel.

If Cython or a compiler is missing the package still installs and falls back
to the numpy implementation at import time.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("koopclf._interval_ext", ["src/koopclf/_interval_ext.pyx"],
                   include_dirs=[numpy.get_include()],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
