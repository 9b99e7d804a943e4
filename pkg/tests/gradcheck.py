"""Central finite-difference gradient oracle, independent of the tape.

``fd_gradients`` re-evaluates a scalar-valued function under coordinate
perturbations of the leaf arrays and never touches recorded gradients,
so it stays an independent check on backward().
"""

import numpy as np

from seqrisk import numcore as nc


def fd_gradients(fn, params, h=1e-5, coords=None, rng=None):
    """Finite-difference gradients of ``fn()`` w.r.t. each array in params.

    fn: zero-argument callable returning a float; it must read the arrays
        in ``params`` (mutated in place between calls).
    params: list of np.ndarray leaves.
    coords: if given, per-tensor number of sampled coordinates (full
        gradient otherwise); sampling uses ``rng``.

    Returns a list of (flat_indices, fd_values) per parameter.
    """
    out = []
    for p in params:
        flat = p.reshape(-1)
        if coords is None or flat.size <= coords:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=coords, replace=False)
        vals = np.empty(len(idxs))
        for j, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            vals[j] = (up - down) / (2.0 * h)
        out.append((idxs, vals))
    return out


def assert_grads_close(fn_tensor, tensors, rel_tol=1e-4, h=1e-5, coords=None, seed=0):
    """Run backward() on fn_tensor() and compare against finite differences.

    fn_tensor: zero-argument callable building a fresh graph over
        ``tensors`` and returning the scalar loss Tensor.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    with nc.Tape():
        loss = fn_tensor()
        nc.backward(loss)
    auto = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar_fn():
        return fn_tensor().item()

    fd = fd_gradients(scalar_fn, [t.data for t in tensors], h=h, coords=coords, rng=rng)
    for t, a, (idxs, vals) in zip(tensors, auto, fd):
        got = a.reshape(-1)[idxs]
        rel = np.abs(got - vals) / (np.abs(vals) + 1e-8)
        worst = rel.max() if len(rel) else 0.0
        assert worst < rel_tol, f"gradient mismatch (rel err {worst:.3e}) for shape {t.data.shape}"
