"""Plain and group-equivariant layers.

Group feature maps have shape ``[B, C, |G|, H, W]``.  Lifting and group
convolutions keep one trainable base kernel per (out, in) pair and rebuild
the transformed copies on every forward pass, so gradients from every copy
flow back onto the single base kernel.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .groups import (
    SymmetryGroup,
    act_on_kernel,
    act_on_kernel_adjoint,
    compose,
    inverse,
)
from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Module:
    training = True

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, sub in enumerate(val):
                    if isinstance(sub, Module):
                        yield from sub.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, sub in enumerate(val):
                    if isinstance(sub, Module):
                        yield from sub.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for sub in val:
                    if isinstance(sub, Module):
                        yield from sub.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for m in self.modules():
            for name, val in vars(m).items():
                if isinstance(val, Tensor):
                    setattr(m, name, Tensor(val.data.astype(dtype), requires_grad=val.requires_grad))
                elif isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    setattr(m, name, val.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_kernel(k: int) -> None:
    if k % 2 == 0 or k < 1:
        raise ValueError(f"kernel size must be odd and positive, got {k}")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=np.float32):
        _check_kernel(k)
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = Tensor(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=(self.k - 1) // 2)


class BatchNorm(Module):
    """Batch norm over axis 1; works unchanged on ``[B, C, |G|, H, W]`` maps,
    where it pools statistics across the group axis."""

    def __init__(self, c: int, dtype=np.float32, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.c = c
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


GroupBatchNorm = BatchNorm


# -- orbit expansion --------------------------------------------------------

def expand_lift_kernel(w: Tensor, group: SymmetryGroup) -> Tensor:
    """[Cout, Cin, k, k] -> [Cout, |G|, Cin, k, k]; slice g is ``g`` acting on w."""
    elems = group.elements
    out = np.stack([act_on_kernel(g, w.data) for g in elems], axis=1)

    def bw(grad):
        gw = np.zeros_like(w.data)
        for gi, g in enumerate(elems):
            gw += act_on_kernel_adjoint(g, grad[:, gi])
        return (gw,)

    return make_result(out, (w,), bw, "expand_lift", check_finite=False)


def _source_indices(group: SymmetryGroup) -> list[np.ndarray]:
    # src[g][h] = index(g^-1 . h)
    return [
        np.array([group.index(compose(inverse(g), h)) for h in group.elements], dtype=np.intp)
        for g in group.elements
    ]


def expand_group_kernel(w: Tensor, group: SymmetryGroup) -> Tensor:
    """[Cout, Cin, |G|, k, k] -> [Cout, |G|, Cin, |G|, k, k].

    ``out[o, g, i, h] = act(g, w[o, i, index(g^-1 h)])``.
    """
    elems = group.elements
    srcs = _source_indices(group)
    out = np.stack([act_on_kernel(g, w.data[:, :, src]) for g, src in zip(elems, srcs)], axis=1)

    def bw(grad):
        gw = np.zeros_like(w.data)
        for gi, (g, src) in enumerate(zip(elems, srcs)):
            gw[:, :, src] += act_on_kernel_adjoint(g, grad[:, gi])
        return (gw,)

    return make_result(out, (w,), bw, "expand_group", check_finite=False)


class LiftingConv(Module):
    """Plain image -> group feature map."""

    def __init__(self, cin: int, cout: int, group: SymmetryGroup, k: int,
                 rng: np.random.Generator, dtype=np.float32):
        _check_kernel(k)
        self.cin, self.cout, self.k, self.group = cin, cout, k, group
        self.weight = Tensor(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        B, _, H, W = x.shape
        if H != W:
            raise ValueError("lifting convolution needs square inputs")
        G = self.group.order
        wf = expand_lift_kernel(self.weight, self.group).reshape(self.cout * G, self.cin, self.k, self.k)
        y = ops.conv2d(x, wf, None, padding=(self.k - 1) // 2).reshape(B, self.cout, G, H, W)
        return y + self.bias.reshape(1, self.cout, 1, 1, 1)


class GroupConv(Module):
    """Group feature map -> group feature map."""

    def __init__(self, cin: int, cout: int, group: SymmetryGroup, k: int,
                 rng: np.random.Generator, dtype=np.float32):
        _check_kernel(k)
        self.cin, self.cout, self.k, self.group = cin, cout, k, group
        G = group.order
        self.weight = Tensor(
            kaiming_uniform(rng, (cout, cin, G, k, k), cin * G * k * k, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        B, C, G, H, W = x.shape
        if G != self.group.order or C != self.cin:
            raise ValueError(
                f"group conv expects [B, {self.cin}, {self.group.order}, H, W], got {x.shape}"
            )
        wf = expand_group_kernel(self.weight, self.group).reshape(
            self.cout * G, self.cin * G, self.k, self.k
        )
        y = ops.conv2d(x.reshape(B, C * G, H, W), wf, None, padding=(self.k - 1) // 2)
        return y.reshape(B, self.cout, G, H, W) + self.bias.reshape(1, self.cout, 1, 1, 1)


def group_relu(x: Tensor) -> Tensor:
    return ops.relu(x)


def group_pool(x: Tensor, mode: str = "max") -> Tensor:
    """Reduce the group axis of ``[B, C, |G|, H, W]`` by max (default) or mean."""
    if x.ndim != 5:
        raise ValueError(f"group_pool expects a 5-D group feature map, got {x.shape}")
    if mode == "mean":
        return ops.mean(x, axis=2)
    if mode != "max":
        raise ValueError(f"unknown group pooling mode {mode!r}")
    xd = x.data
    idx = xd.argmax(axis=2)
    out = np.take_along_axis(xd, idx[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "group_pool", check_finite=False)
