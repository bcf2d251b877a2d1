"""Hot-path kernels with selectable backend.

The numba JIT backend is the default; set PERFIELD_BACKEND=numpy to force
the pure-numpy twin (used automatically when numba is unavailable). Both
backends expose the same functions with identical semantics:

    render_forward    batched ray march + compositing
    render_backward   fused forward/backward for the rendering loss
    tv_grad           total-variation value and gradient over grid slots
    bg_tv_grad        total variation over background texels

`BACKEND` names the active implementation for diagnostics and benchmarks.
"""

import os

_requested = os.environ.get("PERFIELD_BACKEND", "auto").lower()

if _requested == "numpy":
    from . import _numpy as _impl
    BACKEND = "numpy"
elif _requested == "numba":
    from . import _numba as _impl
    BACKEND = "numba"
else:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:
        from . import _numpy as _impl
        BACKEND = "numpy"

render_forward = _impl.render_forward
render_backward = _impl.render_backward
tv_grad = _impl.tv_grad
bg_tv_grad = _impl.bg_tv_grad


def render_forward_mt(*args):
    """Multi-threaded forward render; falls back to the serial kernel."""
    if BACKEND == "numba":
        from ._numba import render_forward_parallel
        return render_forward_parallel(*args)
    return _impl.render_forward(*args)
