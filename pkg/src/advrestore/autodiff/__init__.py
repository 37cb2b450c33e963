"""Minimal reverse-mode autodiff over float64 numpy arrays."""
from . import kernels, nn, ops, optim
from .tensor import Parameter, Tensor, backward, grad, no_grad

__all__ = ["Parameter", "Tensor", "backward", "grad", "kernels", "nn", "no_grad", "ops", "optim"]
