"""Small layer library on top of the tensor ops."""
from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import Parameter


class Module:
    """Container that discovers parameters and sub-modules through its attributes."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        if not prefix:
            for name, p in out.items():
                p.name = name
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def freeze(self):
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.trainable = True
        return self

    @property
    def frozen(self):
        return all(not p.trainable for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for key, p in params.items():
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{key}: shape {list(value.shape)} != {list(p.shape)}")
            p.data = value.copy()
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None, bias=True):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        bound = np.sqrt(6.0 / (cin * k * k))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)), "weight")
        self.bias = Parameter(np.zeros(cout), "bias") if bias else None

    def forward(self, x):
        y = ops.conv2d(x, self.weight, self.stride, self.pad)
        return ops.add_bias(y, self.bias) if self.bias is not None else y


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, rng, stride=2, pad=0, bias=True):
        self.stride = stride
        self.pad = pad
        bound = np.sqrt(6.0 / (cin * k * k / (stride * stride)))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(cin, cout, k, k)), "weight")
        self.bias = Parameter(np.zeros(cout), "bias") if bias else None

    def forward(self, x):
        y = ops.conv_transpose2d(x, self.weight, self.stride, self.pad)
        return ops.add_bias(y, self.bias) if self.bias is not None else y


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True):
        bound = np.sqrt(6.0 / din)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(din, dout)), "weight")
        self.bias = Parameter(np.zeros(dout), "bias") if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        return ops.add_bias(y, self.bias) if self.bias is not None else y


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), "gamma")
        self.beta = Parameter(np.zeros(channels), "beta")

    def forward(self, x):
        return ops.group_norm(x, self.gamma, self.beta, self.groups, self.eps)
