"""Adam with per-parameter state and selective group updates."""
from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam; moments advance only for the keys actually stepped.

    Parameters are updated in place so that arrays shared with the model
    stay aliased.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, params, grads, lr, keys=None):
        """Apply one Adam update at rate `lr` to `keys` (default: all grads)."""
        if keys is None:
            keys = list(grads)
        for key in keys:
            p = params[key]
            g = np.asarray(grads[key], dtype=p.dtype)
            st = self.state.get(key)
            if st is None:
                st = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
                self.state[key] = st
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
            m_hat = st["m"] / (1 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1 - self.beta2 ** st["t"])
            p -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
