"""Kernel backend selection.

The hot inner loops (masked softmax, layer norm, GELU/SiLU, AdamW update)
exist twice: a compiled Cython core and a NumPy fallback. The compiled core
is used when importable; ``LAPFLOW_KERNELS=numpy|compiled|auto`` overrides.
Matrix products stay on NumPy/BLAS in both backends.
"""

import os

from . import numpy_backend

# libgomp's default active wait spins worker threads between parallel
# regions, starving the BLAS threads that run the matmuls in between;
# sleep immediately instead (must be set before the extension loads)
os.environ.setdefault("OMP_WAIT_POLICY", "passive")

try:
    from . import _core as _compiled
except ImportError:
    _compiled = None

_FUNCS = ("masked_softmax_fw", "softmax_bw", "layernorm_fw", "layernorm_bw",
          "gelu_fw", "gelu_bw", "silu_fw", "silu_bw", "adamw_update")

# NumPy's SIMD tanh/exp beat a scalar libc loop, so the compiled backend
# keeps the fused reduction kernels and leaves the pure transcendentals
# to NumPy (measured on this workload by `lapflow bench`).
_NUMPY_PREFERRED = {"gelu_fw", "gelu_bw", "silu_fw", "silu_bw"}


class _Dispatch:
    """Callable table bound to the active backend."""

    def __init__(self, module, name):
        self.name = name
        self._bind(module)

    def _bind(self, module):
        self.module = module
        for fn in _FUNCS:
            src = module
            if module is not numpy_backend and fn in _NUMPY_PREFERRED:
                src = numpy_backend
            setattr(self, fn, getattr(src, fn))


def _pick(choice):
    if choice == "numpy":
        return numpy_backend, "numpy"
    if choice == "compiled":
        if _compiled is None:
            raise ImportError(
                "LAPFLOW_KERNELS=compiled but the extension is not built; "
                "reinstall with a working C compiler")
        return _compiled, "compiled"
    # auto
    if _compiled is not None:
        return _compiled, "compiled"
    return numpy_backend, "numpy"


_choice = os.environ.get("LAPFLOW_KERNELS", "auto").lower()
_module, _name = _pick(_choice)
active = _Dispatch(_module, _name)


def backend_name():
    return active.name


def available_backends():
    names = ["numpy"]
    if _compiled is not None:
        names.append("compiled")
    return names


def use(name):
    """Switch the active backend (mainly for tests and benchmarks)."""
    module, resolved = _pick(name)
    active._bind(module)
    active.name = resolved
