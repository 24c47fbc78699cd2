"""Backend selection for the interval MLP kernel.

The compiled extension is used when it was built and importable, unless the
environment variable ``KOOPCLF_PURE_PYTHON`` is set to a non-empty value other
than ``0``.
"""

from __future__ import annotations

import os

from . import _interval_py

_force_py = os.environ.get("KOOPCLF_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-Python backend requested")
    from . import _interval_ext as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _interval_py
    BACKEND = "python"


def interval_mlp(lo, hi, layers, final_linear: bool, with_jac: bool = True, backend: str | None = None):
    """Batched interval enclosure of an MLP and its input Jacobian.

    ``layers`` is ``[(W, b), ...]`` as returned by ``MlpSpec.unpack``.
    ``backend`` forces ``"python"`` or ``"cython"`` (the latter raises if the
    extension is unavailable).
    """
    impl = _impl
    if backend == "python":
        impl = _interval_py
    elif backend == "cython":
        from . import _interval_ext as impl
    weights = [W for W, _ in layers]
    biases = [b for _, b in layers]
    return impl.interval_mlp(lo, hi, weights, biases, bool(final_linear), bool(with_jac))
