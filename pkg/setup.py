import os

from setuptools import Extension, setup

# The compiled kernels are optional: the package falls back to numpy
# implementations when the extension is missing.
ext_modules = []
if os.environ.get("MULTIGRID_SR_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "multigrid_sr._ckernels",
                    ["src/multigrid_sr/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
