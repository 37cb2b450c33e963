"""First-order optimizers over :class:`Parameter` lists."""
import numpy as np


def _check_finite(params):
    for p in params:
        if p.trainable and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter '{p.name}'")


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        _check_finite(self.params)
        for p in self.params:
            if p.trainable:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        _check_finite(self.params)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * p.grad
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * p.grad * p.grad
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def make_optimizer(params, lr, method="adam"):
    if method == "sgd":
        return SGD(params, lr)
    if method == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer method '{method}'")


def optimizer_step(params, lr, method="sgd", state=None):
    """Apply one update to ``params`` and return the optimizer (reuse it as ``state``)."""
    opt = state if state is not None else make_optimizer(params, lr, method)
    opt.step()
    return opt
