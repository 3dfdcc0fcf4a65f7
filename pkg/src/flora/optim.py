"""AdamW with a linear-warmup-then-constant learning rate."""
import math

import numpy as np


def warmup_lr(step, total_steps, warmup_ratio, peak):
    """0 at step 0, linear up to ``peak`` at ceil(warmup_ratio * total_steps), then flat."""
    w = math.ceil(warmup_ratio * total_steps)
    if w <= 0:
        return peak
    return peak * min(1.0, step / w)


class AdamW:
    """Decoupled weight decay Adam.

    Parameters whose ``grad`` is None are skipped entirely for that step: no
    moment update and no decay. This is what makes adapter dropout leave absent
    modalities untouched. Weight decay is applied to matrices only.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.counts = {k: 0 for k in self.params}
        self.step_count = 0

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self, lr):
        self.step_count += 1
        for k, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            self.counts[k] += 1
            n = self.counts[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** n)
            vhat = v / (1.0 - self.b2 ** n)
            data = t.data
            if self.weight_decay and data.ndim > 1:
                data = data * (1.0 - lr * self.weight_decay)
            t.data = data - lr * mhat / (np.sqrt(vhat) + self.eps)
