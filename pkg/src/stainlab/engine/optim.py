"""AdamW with decoupled weight decay.

The decay term multiplies the parameter directly (lr * wd * p) and is
kept out of the moment estimates, so decay strength does not depend on
the gradient scale.
"""

import numpy as np


class AdamW:
    def __init__(self, params, lr=5e-5, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8, no_decay=()):
        """``params`` is a flat name -> Tensor map; ``no_decay`` names skip weight decay.

        Biases and batch-norm scales conventionally go in ``no_decay``.
        """
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.no_decay = frozenset(no_decay)
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self):
        return {
            "step": self.step_count,
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        for k in self._m:
            self._m[k][...] = state["m"][k]
            self._v[k][...] = state["v"][k]
