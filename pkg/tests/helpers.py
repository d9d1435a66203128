"""Shared test utilities: central finite differences for gradient checks."""

import numpy as np


def finite_diff(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each array in the
    dict, perturbing entries in place."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6, label=""):
    for name in numeric:
        ga, gn = analytic[name], numeric[name]
        err = np.abs(ga - gn) - (atol + rtol * np.abs(gn))
        assert np.all(err <= 0), (
            f"{label}{name}: max violation {err.max():.3e}, "
            f"worst analytic {ga.flat[np.argmax(err)]:.6e} "
            f"vs numeric {gn.flat[np.argmax(err)]:.6e}"
        )
