"""Adaptive feature aggregation: a per-channel two-way gate mixing two node matrices."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import NumericError, ShapeError, StateError
from .ndcore import (
    BottleneckCache,
    LinearLayer,
    ParamStore,
    bottleneck_backward,
    bottleneck_forward,
)

__all__ = [
    "AfaParams",
    "GateMask",
    "channel_descriptor",
    "parameterized_descriptor",
    "gate",
    "aggregate",
    "afa",
    "afa_forward",
    "afa_backward",
]


@dataclass(frozen=True)
class DescriptorMLP:
    reduce: LinearLayer
    expand: LinearLayer


@dataclass(frozen=True)
class AfaParams:
    """Two independent bottleneck MLPs, one per gated branch."""

    mlp1: DescriptorMLP
    mlp2: DescriptorMLP

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, reduction: int,
               rng: Optional[np.random.Generator] = None):
        if reduction < 1 or channels % reduction:
            raise ShapeError(f"reduction rate {reduction} must divide channel count {channels}")
        hidden = channels // reduction
        mlps = []
        for j in (1, 2):
            base = f"{prefix}.mlp{j}"
            mlps.append(DescriptorMLP(
                LinearLayer.create(store, f"{base}.reduce", channels, hidden, rng),
                LinearLayer.create(store, f"{base}.expand", hidden, channels, rng),
            ))
        return cls(*mlps)

    @property
    def channels(self) -> int:
        return self.mlp1.reduce.in_dim


@dataclass(frozen=True)
class GateMask:
    m1: np.ndarray
    m2: np.ndarray


def channel_descriptor(nodes) -> np.ndarray:
    """Global average over nodes: one value per channel."""
    nodes = np.asarray(nodes)
    if nodes.ndim != 2:
        raise ShapeError(f"expected an (N, C) node matrix, got {nodes.shape}")
    if nodes.shape[0] == 0:
        raise ShapeError("channel descriptor of an empty node set")
    return nodes.mean(axis=0)


def parameterized_descriptor(s, mlp: DescriptorMLP) -> np.ndarray:
    s = np.asarray(s)
    if s.ndim != 1:
        raise ShapeError(f"descriptor must be a vector, got shape {s.shape}")
    return bottleneck_forward(mlp.reduce, mlp.expand, s[None, :])[0][0]


def gate(z1, z2) -> GateMask:
    z1 = np.asarray(z1)
    z2 = np.asarray(z2)
    if z1.shape != z2.shape:
        raise ShapeError(f"gate inputs differ in shape: {z1.shape} vs {z2.shape}")
    if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(z2))):
        raise NumericError("gate received non-finite input")
    top = np.maximum(z1, z2)
    e1 = np.exp(z1 - top)
    e2 = np.exp(z2 - top)
    total = e1 + e2
    return GateMask(e1 / total, e2 / total)


def aggregate(a, b, mask: GateMask) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"aggregate needs two equal (N, C) matrices, got {a.shape} and {b.shape}")
    if mask.m1.shape != (a.shape[1],) or mask.m2.shape != (a.shape[1],):
        raise ShapeError(f"gate mask length must be {a.shape[1]}")
    return mask.m1 * a + mask.m2 * b


@dataclass
class AfaCache:
    params: Optional[AfaParams]
    a: np.ndarray
    b: np.ndarray
    mask: GateMask
    mlp1: Optional[BottleneckCache]
    mlp2: Optional[BottleneckCache]


def afa_forward(a, b, p: Optional[AfaParams] = None):
    """Gate-mix ``a`` and ``b``; with ``p=None`` the descriptors gate directly."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"afa needs two equal (N, C) matrices, got {a.shape} and {b.shape}")
    s1 = channel_descriptor(a)
    s2 = channel_descriptor(b)
    c1 = c2 = None
    if p is None:
        z1, z2 = s1, s2
    else:
        if p.channels != a.shape[1]:
            raise ShapeError(f"AFA params expect {p.channels} channels, got {a.shape[1]}")
        z1, c1 = bottleneck_forward(p.mlp1.reduce, p.mlp1.expand, s1[None, :])
        z2, c2 = bottleneck_forward(p.mlp2.reduce, p.mlp2.expand, s2[None, :])
        z1, z2 = z1[0], z2[0]
    mask = gate(z1, z2)
    return aggregate(a, b, mask), AfaCache(p, a, b, mask, c1, c2)


def afa_backward(dout, cache: Optional[AfaCache]):
    """Return ``(da, db, grads)``."""
    if cache is None:
        raise StateError("afa backward called before forward")
    m1, m2 = cache.mask.m1, cache.mask.m2
    a, b = cache.a, cache.b
    n = a.shape[0]
    da = dout * m1
    db = dout * m2
    dm1 = (dout * a).sum(axis=0)
    dm2 = (dout * b).sum(axis=0)
    # two-way softmax Jacobian
    inner = dm1 * m1 + dm2 * m2
    dz1 = m1 * (dm1 - inner)
    dz2 = m2 * (dm2 - inner)
    grads = {}
    p = cache.params
    if p is None:
        ds1, ds2 = dz1, dz2
    else:
        ds1, g1 = bottleneck_backward(p.mlp1.reduce, p.mlp1.expand, dz1[None, :], cache.mlp1)
        ds2, g2 = bottleneck_backward(p.mlp2.reduce, p.mlp2.expand, dz2[None, :], cache.mlp2)
        ds1, ds2 = ds1[0], ds2[0]
        grads.update(g1)
        grads.update(g2)
    da = da + ds1 / n
    db = db + ds2 / n
    return da, db, grads


def afa(a, b, p: Optional[AfaParams] = None) -> np.ndarray:
    return afa_forward(a, b, p)[0]
