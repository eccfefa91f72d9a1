"""Central finite differences, the independent gradient oracle."""

from __future__ import annotations

import numpy as np


def finite_difference_grad(f, params, h=1e-4):
    """Central-difference gradient estimate of a scalar function.

    ``f`` maps a list of arrays to a float; each coordinate of each
    parameter is perturbed by +/- h on float64 copies.  Non-finite
    function values are rejected.
    """
    if h <= 0:
        raise ValueError(f"finite_difference_grad: h must be positive, got {h}")
    work = [np.array(p, dtype=np.float64) for p in params]
    grads = [np.zeros_like(p) for p in work]
    for pi, p in enumerate(work):
        flat = p.reshape(-1)
        gflat = grads[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(
                    f"finite_difference_grad: non-finite function value at "
                    f"param {pi}, coordinate {i} (f+={fp}, f-={fm})"
                )
            gflat[i] = (fp - fm) / (2.0 * h)
    return grads
