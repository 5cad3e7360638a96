"""Backend selection for the conv2d unfold/fold kernels.

The compiled extension is used when importable; setting
``REGMIX_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

BACKEND = "python"

if os.environ.get("REGMIX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from regmix._kernels import col2im, im2col  # noqa: F401

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        pass

if BACKEND == "python":
    from regmix._kernels_py import col2im, im2col  # noqa: F401

__all__ = ["BACKEND", "im2col", "col2im"]
