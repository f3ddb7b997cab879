"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (numpy fallback is selected at
import time), so a failed compile only costs speed.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/moecl/kernels/_fastkernels.pyx",
        compiler_directives={"language_level": "3"},
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
except Exception as exc:  # pragma: no cover
    import warnings

    warnings.warn(f"building without compiled kernels: {exc}")

setup(ext_modules=ext_modules)
