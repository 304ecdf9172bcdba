"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise
(or when ``SANPEFT_KERNELS=python``) the numpy fallback is used.  Both
expose the same functions; ``use_backend`` switches at runtime.
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = (
    "softmax_rows",
    "softmax_rows_backward",
    "normalize_rows",
    "normalize_rows_backward",
    "gelu",
    "gelu_backward",
    "cross_entropy_rows",
)

BACKEND = None


def available():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def use_backend(name):
    """Bind the module-level kernel functions to ``name`` ('cython' or 'python')."""
    global BACKEND
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        mod = _ckernels
    elif name == "python":
        mod = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    BACKEND = name
    return name


_requested = os.environ.get("SANPEFT_KERNELS", "").strip().lower()
if _requested == "python" or _ckernels is None:
    use_backend("python")
else:
    use_backend("cython")
