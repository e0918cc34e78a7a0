"""Network building blocks over the autodiff tape.

Covers exactly the layer set the models need: linear maps, the common
activations, a GRU cell, Monte Carlo dropout, a bounded sigmoid for
constrained heads, and reparameterized Gaussian sampling. Weight
matrices are initialized uniformly in +-sqrt(6 / (fan_in + fan_out));
biases (including GRU biases) start at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Param,
    Tensor,
    as_tensor,
    concat,
    matmul,
    relu,
    sigmoid,
    sqrt,
    tanh,
)
from . import autodiff as ad

__all__ = [
    "Linear",
    "Mlp",
    "GruCell",
    "BoundedSigmoid",
    "dropout",
    "gaussian_reparam_sample",
    "glorot_uniform",
]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def affine(x, w: Param, b: Param, act_relu: bool = False,
           drop_mask: np.ndarray | None = None) -> Tensor:
    """x @ W + b, optionally through relu and a fixed dropout mask, as a
    single tape node; ``drop_mask`` is the precomputed keep/scale mask."""
    from .autodiff import _result

    x = as_tensor(x)
    pre = x.data @ w.data + b.data
    if act_relu:
        scale = (pre > 0).astype(np.float64)
    else:
        scale = None
    if drop_mask is not None:
        scale = drop_mask if scale is None else scale * drop_mask
    if scale is None:
        out = pre

        def up(g):
            return g
    else:
        out = pre * scale

        def up(g):
            return g * scale

    return _result(
        out,
        (x, w, b),
        (
            lambda g: up(g) @ w.data.T,
            lambda g, xd=x.data: xd.T @ up(g),
            lambda g: up(g).sum(axis=0),
        ),
    )


class Linear:
    """Affine map x @ W + b for row-stacked inputs (batch, in_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.w = Param(glorot_uniform(rng, in_dim, out_dim), f"{name}.w")
        self.b = Param(np.zeros(out_dim), f"{name}.b")

    def __call__(self, x, act_relu: bool = False, drop_mask=None) -> Tensor:
        return affine(x, self.w, self.b, act_relu, drop_mask)

    def parameters(self) -> list[Param]:
        return [self.w, self.b]


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "elu": ad.elu, "softplus": ad.softplus}


class Mlp:
    """Stack of Linear layers with a fixed hidden activation, linear output."""

    def __init__(self, dims: list[int], rng: np.random.Generator, name: str,
                 activation: str = "relu"):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, f"{name}.l{i}")
            for i in range(len(dims) - 1)
        ]
        self.act = _ACTIVATIONS[activation]

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        fused_relu = self.act is relu
        for layer in self.layers[:-1]:
            h = layer(h, act_relu=True) if fused_relu else self.act(layer(h))
        return self.layers[-1](h)

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.parameters()]


class GruCell:
    """Standard GRU cell with a fused forward/backward.

    z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    n = tanh(x Wn + (r * h) Un + bn), h' = (1 - z) * n + z * h.

    The three gates run as one tape node with hand-derived gradients;
    recurrent graphs otherwise spend most of their time on per-gate
    bookkeeping.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, name: str):
        self.hidden_dim = hidden_dim

        def w(tag, fi, fo):
            return Param(glorot_uniform(rng, fi, fo), f"{name}.{tag}")

        self.wz, self.uz = w("wz", input_dim, hidden_dim), w("uz", hidden_dim, hidden_dim)
        self.wr, self.ur = w("wr", input_dim, hidden_dim), w("ur", hidden_dim, hidden_dim)
        self.wn, self.un = w("wn", input_dim, hidden_dim), w("un", hidden_dim, hidden_dim)
        self.bz = Param(np.zeros(hidden_dim), f"{name}.bz")
        self.br = Param(np.zeros(hidden_dim), f"{name}.br")
        self.bn = Param(np.zeros(hidden_dim), f"{name}.bn")

    def __call__(self, x, h) -> Tensor:
        x, h = as_tensor(x), as_tensor(h)
        xd, hd = x.data, h.data
        wz, uz, bz = self.wz, self.uz, self.bz
        wr, ur, br = self.wr, self.ur, self.br
        wn, un, bn = self.wn, self.un, self.bn

        def sig(v):
            e = np.exp(-np.abs(v))
            return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

        z = sig(xd @ wz.data + hd @ uz.data + bz.data)
        r = sig(xd @ wr.data + hd @ ur.data + br.data)
        hn = hd @ un.data
        n = np.tanh(xd @ wn.data + r * hn + bn.data)
        out = (1.0 - z) * n + z * hd

        # Backward: dz, dr, dn are the gate pre-activation gradients,
        # computed once per backward sweep and shared by all vjps.
        cache: dict = {}

        def grads(g):
            key = id(g)
            if key not in cache:
                dn = g * (1.0 - z) * (1.0 - n * n)
                dz = g * (hd - n) * z * (1.0 - z)
                dr = dn * hn * r * (1.0 - r)
                cache.clear()
                cache[key] = (dz, dr, dn)
            return cache[key]

        def vjp_x(g):
            dz, dr, dn = grads(g)
            return dz @ wz.data.T + dr @ wr.data.T + dn @ wn.data.T

        def vjp_h(g):
            dz, dr, dn = grads(g)
            return (
                g * z + dz @ uz.data.T + dr @ ur.data.T
                + (dn * r) @ un.data.T
            )

        def mk_w(which, src):
            def vjp(g):
                return src.T @ grads(g)[which]
            return vjp

        def mk_u(which):
            def vjp(g):
                d = grads(g)[which]
                if which == 2:
                    d = d * r
                return hd.T @ d
            return vjp

        def mk_b(which):
            def vjp(g):
                return grads(g)[which].sum(axis=0)
            return vjp

        from .autodiff import _result

        return _result(
            out,
            (x, h, wz, wr, wn, uz, ur, un, bz, br, bn),
            (
                vjp_x, vjp_h,
                mk_w(0, xd), mk_w(1, xd), mk_w(2, xd),
                mk_u(0), mk_u(1), mk_u(2),
                mk_b(0), mk_b(1), mk_b(2),
            ),
        )

    def parameters(self) -> list[Param]:
        return [self.wz, self.uz, self.wr, self.ur, self.wn, self.un,
                self.bz, self.br, self.bn]


@dataclass(frozen=True)
class BoundedSigmoid:
    """f(x) = s * sigmoid(x + b) + m with range (lo, hi) and f(0) = mid.

    The shift b = logit((mid - lo) / (hi - lo)) places the midpoint at a
    zero pre-activation, so freshly initialized heads emit ``mid``.
    """

    lo: float
    hi: float
    mid: float
    b: float = field(init=False)
    s: float = field(init=False)
    m: float = field(init=False)

    def __post_init__(self):
        if not (self.lo < self.mid < self.hi):
            raise ValueError("need lo < mid < hi")
        p = (self.mid - self.lo) / (self.hi - self.lo)
        object.__setattr__(self, "b", math.log(p / (1.0 - p)))
        object.__setattr__(self, "s", self.hi - self.lo)
        object.__setattr__(self, "m", self.lo)

    def __call__(self, x) -> Tensor:
        from .autodiff import _result

        x = as_tensor(x)
        v = x.data + self.b
        e = np.exp(-np.abs(v))
        p = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out = self.s * p + self.m
        return _result(
            out, (x,), (lambda g, p=p, s=self.s: g * s * p * (1.0 - p),)
        )


def dropout(x, rate: float, rng: np.random.Generator, on: bool = True) -> Tensor:
    """Monte Carlo dropout: zero units with probability ``rate``,
    scale survivors by 1/(1-rate). Identity when off or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    x = as_tensor(x)
    if not on or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def gaussian_reparam_sample(mean, std, rng: np.random.Generator) -> Tensor:
    """z = mean + std * eps with eps ~ N(0, I); exact pathwise gradients."""
    mean, std = as_tensor(mean), as_tensor(std)
    eps = rng.standard_normal(mean.shape)
    return mean + std * Tensor(eps)


def std_from_var(var) -> Tensor:
    return sqrt(as_tensor(var))


def concat_features(parts) -> Tensor:
    return concat(parts, axis=-1)
