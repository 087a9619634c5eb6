# Builds the optional native simulation core.
#
#   pip install -e . --no-build-isolation
#   python setup.py build_ext --inplace
#
# If Cython or a C++ compiler is missing the package still installs and
# loratwin falls back to the pure-Python engine.
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: native core not built ({exc}); using pure-Python engine", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: failed to build {ext.name} ({exc}); using pure-Python engine", file=sys.stderr)


def native_extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "loratwin._core",
        ["src/loratwin/_core.pyx"],
        include_dirs=[np.get_include()],
        language="c++",
        # no FMA contraction: the native and Python engines must round identically
        extra_compile_args=["-O2", "-ffp-contract=off", "-std=c++17"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )


setup(ext_modules=native_extensions(), cmdclass={"build_ext": OptionalBuildExt})
