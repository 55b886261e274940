"""Backend selection for the conv2d hot loops.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``DRPRIV_KERNELS=python`` is set, the numpy fallback is
used. ``BACKEND`` names the active one.
"""

import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("DRPRIV_KERNELS", "").lower() != "python":
    _active = compiled_backend
    BACKEND = "compiled"
else:
    _active = python_backend
    BACKEND = "python"

conv2d_forward = _active.conv2d_forward
conv2d_backward_input = _active.conv2d_backward_input
conv2d_backward_weight = _active.conv2d_backward_weight
