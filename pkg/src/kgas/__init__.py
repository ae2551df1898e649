"""Motion-guided densification of articulated 3D Gaussian clouds."""

import os as _os

# BLAS thread caps must be in place before numpy loads
_threads = _os.environ.get("KGAS_THREADS", "0").strip()
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
