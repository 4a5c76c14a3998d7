"""Build script. The compiled tape-replay kernel is optional: if Cython or a
C compiler is unavailable the package installs anyway and falls back to the
pure-Python replay at import time."""

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible, warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, cython missing, ...
            print(f"warning: compiled kernel skipped ({exc!r}); "
                  "pure-Python replay will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc!r}); "
                  "pure-Python replay will be used")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "emsmpc.autodiff._fasttape",
        ["src/emsmpc/autodiff/_fasttape.pyx"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
