"""Self, local and non-local node correlation.

All three operators map an ``(N, C)`` node matrix to an ``(N, C)`` node matrix.

* self correlation reweights each node's channels by a softmax over a
  bottleneck MLP of that node and adds the result back with a learnable scale;
* local correlation builds a ``K x K`` attention matrix inside every dilated KNN
  neighborhood, mixes the neighbors with it and max-pools them into the centroid;
* non-local correlation does the same over all ``N`` nodes with a dense
  ``N x N`` attention matrix and no pooling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ResourceError, ShapeError, StateError
from .graph import DilatedKnnGraph, gather_all
from .ndcore import (
    BottleneckCache,
    LinearLayer,
    ParamStore,
    bottleneck_backward,
    bottleneck_forward,
    linear_backward,
    linear_forward,
    merge_grads,
    row_softmax,
    row_softmax_backward,
)

DEFAULT_NONLOCAL_CAP = 8192


def _reduced(channels: int, reduction: int) -> int:
    if reduction < 1 or channels % reduction:
        raise ShapeError(f"reduction rate {reduction} must divide channel count {channels}")
    return channels // reduction


def _check_nodes(nodes, channels: int) -> np.ndarray:
    nodes = np.asarray(nodes)
    if nodes.ndim != 2 or nodes.shape[1] != channels:
        raise ShapeError(f"expected an (N, {channels}) node matrix, got {nodes.shape}")
    return nodes


# --------------------------------------------------------------------------- #
# parameters


@dataclass(frozen=True)
class SelfCorrParams:
    reduce: LinearLayer
    expand: LinearLayer
    alpha_name: str

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, reduction: int,
               rng: Optional[np.random.Generator] = None, alpha: float = 0.0):
        hidden = _reduced(channels, reduction)
        reduce = LinearLayer.create(store, f"{prefix}.mlp.reduce", channels, hidden, rng)
        expand = LinearLayer.create(store, f"{prefix}.mlp.expand", hidden, channels, rng)
        store.add(f"{prefix}.alpha", np.array([alpha]))
        return cls(reduce, expand, f"{prefix}.alpha")

    @property
    def channels(self) -> int:
        return self.reduce.in_dim

    @property
    def alpha(self) -> float:
        return self.reduce.store[self.alpha_name][0]


@dataclass(frozen=True)
class PairMapParams:
    """The two node-wise maps producing query and key embeddings of an adjacency."""

    theta: LinearLayer
    phi: LinearLayer

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, reduction: int,
               rng: Optional[np.random.Generator] = None):
        hidden = _reduced(channels, reduction)
        scale = None if rng is None else 1.0 / np.sqrt(channels)
        theta = LinearLayer.create(store, f"{prefix}.theta", channels, hidden, rng, scale)
        phi = LinearLayer.create(store, f"{prefix}.phi", channels, hidden, rng, scale)
        return cls(theta, phi)

    @property
    def channels(self) -> int:
        return self.theta.in_dim


LocalCorrParams = PairMapParams
NonLocalCorrParams = PairMapParams


# --------------------------------------------------------------------------- #
# self correlation


@dataclass
class SelfCorrCache:
    params: SelfCorrParams
    nodes: np.ndarray
    mlp: BottleneckCache
    weights: np.ndarray  # channel-softmaxed


def self_correlation_forward(nodes, p: SelfCorrParams):
    nodes = _check_nodes(nodes, p.channels)
    w, mlp_cache = bottleneck_forward(p.reduce, p.expand, nodes)
    wbar = row_softmax(w)
    out = nodes + p.alpha * (wbar * nodes)
    return out, SelfCorrCache(p, nodes, mlp_cache, wbar)


def self_correlation_backward(dout, cache: Optional[SelfCorrCache]):
    if cache is None:
        raise StateError("self_correlation backward called before forward")
    p, x, wbar = cache.params, cache.nodes, cache.weights
    alpha = p.alpha
    dx = dout * (1.0 + alpha * wbar)
    dalpha = np.array([np.sum(dout * wbar * x)])
    dw = row_softmax_backward(alpha * dout * x, wbar)
    dx_mlp, grads = bottleneck_backward(p.reduce, p.expand, dw, cache.mlp)
    grads[p.alpha_name] = dalpha
    return dx + dx_mlp, grads


def self_correlation(nodes, p: SelfCorrParams) -> np.ndarray:
    return self_correlation_forward(nodes, p)[0]


# --------------------------------------------------------------------------- #
# local correlation


def local_adjacency(neigh, p: LocalCorrParams) -> np.ndarray:
    """Row-stochastic ``K x K`` attention inside one neighborhood.

    ``neigh`` may also be a stack ``(N, K, C)``, giving ``(N, K, K)``.
    """
    neigh = np.asarray(neigh)
    if neigh.ndim not in (2, 3) or neigh.shape[-1] != p.channels:
        raise ShapeError(f"expected (K, {p.channels}) neighborhood, got {neigh.shape}")
    q = linear_forward(p.theta, neigh)
    k = linear_forward(p.phi, neigh)
    return row_softmax(q @ np.swapaxes(k, -1, -2))


@dataclass
class LocalCorrCache:
    params: LocalCorrParams
    graph: DilatedKnnGraph
    n_nodes: int
    neigh: np.ndarray  # (N, K, C)
    q: np.ndarray
    k: np.ndarray
    adj: np.ndarray  # (N, K, K)
    argmax: np.ndarray  # (N, C) winning neighbor of each pooled channel


def local_correlation_forward(nodes, graph: DilatedKnnGraph, p: LocalCorrParams):
    nodes = _check_nodes(nodes, p.channels)
    neigh = gather_all(nodes, graph)
    q = linear_forward(p.theta, neigh)
    k = linear_forward(p.phi, neigh)
    adj = row_softmax(q @ np.swapaxes(k, -1, -2))
    updated = adj @ neigh
    # np.argmax returns the first maximum, so ties go to the lowest neighbor slot
    arg = updated.argmax(axis=1)
    out = np.take_along_axis(updated, arg[:, None, :], axis=1)[:, 0, :]
    return out, LocalCorrCache(p, graph, nodes.shape[0], neigh, q, k, adj, arg)


def local_correlation_backward(dout, cache: Optional[LocalCorrCache]):
    if cache is None:
        raise StateError("local_correlation backward called before forward")
    p = cache.params
    n, kk, c = cache.neigh.shape
    dupdated = np.zeros_like(cache.neigh)
    np.put_along_axis(dupdated, cache.argmax[:, None, :], dout[:, None, :], axis=1)
    dadj = dupdated @ np.swapaxes(cache.neigh, -1, -2)
    dneigh = np.swapaxes(cache.adj, -1, -2) @ dupdated
    dm = row_softmax_backward(dadj, cache.adj)
    dq = dm @ cache.k
    dk = np.swapaxes(dm, -1, -2) @ cache.q
    dn_q, g_theta = linear_backward(p.theta, dq, cache.neigh)
    dn_k, g_phi = linear_backward(p.phi, dk, cache.neigh)
    dneigh = dneigh + dn_q + dn_k
    dnodes = np.zeros((cache.n_nodes, c), dtype=dneigh.dtype)
    np.add.at(dnodes, cache.graph.neighbors.reshape(-1), dneigh.reshape(-1, c))
    return dnodes, merge_grads(g_theta, g_phi)


def local_correlation(nodes, graph: DilatedKnnGraph, p: LocalCorrParams) -> np.ndarray:
    return local_correlation_forward(nodes, graph, p)[0]


# --------------------------------------------------------------------------- #
# non-local correlation


@dataclass
class NonLocalCorrCache:
    params: NonLocalCorrParams
    nodes: np.ndarray
    q: np.ndarray
    k: np.ndarray
    adj: np.ndarray  # (N, N)


def nonlocal_adjacency(nodes, p: NonLocalCorrParams, cap: int = DEFAULT_NONLOCAL_CAP):
    nodes = _check_nodes(nodes, p.channels)
    if nodes.shape[0] > cap:
        raise ResourceError(
            f"dense non-local adjacency for N={nodes.shape[0]} exceeds the cap of {cap} nodes"
        )
    q = linear_forward(p.theta, nodes)
    k = linear_forward(p.phi, nodes)
    return row_softmax(q @ k.T), q, k


def nonlocal_correlation_forward(nodes, p: NonLocalCorrParams, cap: int = DEFAULT_NONLOCAL_CAP):
    nodes = _check_nodes(nodes, p.channels)
    adj, q, k = nonlocal_adjacency(nodes, p, cap)
    return adj @ nodes, NonLocalCorrCache(p, nodes, q, k, adj)


def nonlocal_correlation_backward(dout, cache: Optional[NonLocalCorrCache]):
    if cache is None:
        raise StateError("nonlocal_correlation backward called before forward")
    p, x, adj = cache.params, cache.nodes, cache.adj
    dadj = dout @ x.T
    dx = adj.T @ dout
    dm = row_softmax_backward(dadj, adj)
    dx_q, g_theta = linear_backward(p.theta, dm @ cache.k, x)
    dx_k, g_phi = linear_backward(p.phi, dm.T @ cache.q, x)
    return dx + dx_q + dx_k, merge_grads(g_theta, g_phi)


def nonlocal_correlation(nodes, p: NonLocalCorrParams, cap: int = DEFAULT_NONLOCAL_CAP):
    return nonlocal_correlation_forward(nodes, p, cap)[0]
