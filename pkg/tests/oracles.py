"""Independent reference computations used by several test modules."""

import numpy as np


def central_difference(f, arrays, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            fp = f()
            arr[i] = old - h
            fm = f()
            arr[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def mlp_forward_by_hand(layers, x):
    """Straight-line re-evaluation of a tanh/linear MLP from raw arrays."""
    h = np.array(x, dtype=float)
    for w, b, act in layers:
        z = np.zeros((h.shape[0], w.shape[1]))
        for n in range(h.shape[0]):
            for j in range(w.shape[1]):
                acc = b[j]
                for i in range(w.shape[0]):
                    acc += h[n, i] * w[i, j]
                z[n, j] = acc
        h = np.tanh(z) if act == "tanh" else z
    return h
