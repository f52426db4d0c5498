"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from duallab.tape import ComputationRecord, Tensor


def fd_gradient_error(build, params, step=1e-4, sample=None, rng=None):
    """Max relative error between tape gradients and central differences.

    `build(tensors)` maps {name: Tensor} to a scalar Tensor; `params` holds
    the numpy values.  With `sample`, only that many randomly chosen
    coordinates per parameter are probed.
    """
    with ComputationRecord() as rec:
        bound = {k: rec.leaf(v) for k, v in params.items()}
        loss = build(bound)
        grads = rec.backward(loss)

    def loss_at():
        return build({k: Tensor(v) for k, v in params.items()}).item()

    worst = 0.0
    for name, arr in params.items():
        g = grads[bound[name].node_id].ravel()
        flat = arr.ravel()
        if sample is not None and flat.size > sample:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=sample,
                                                           replace=False)
        else:
            idx = range(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at()
            flat[i] = orig - step
            down = loss_at()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(g[i]), 1e-8)
            worst = max(worst, abs(fd - g[i]) / denom)
    return worst
