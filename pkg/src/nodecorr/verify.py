"""Independent oracles and the executable property suite.

The oracles here are written with plain Python loops and ``math`` so that they
share no arithmetic with the vectorized production paths they check. The
property suite drives both and reports one line per property.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import ndcore
from .aggregation import AfaParams, afa, afa_backward, afa_forward, gate
from .correlation import (
    PairMapParams,
    SelfCorrParams,
    local_adjacency,
    local_correlation,
    local_correlation_backward,
    local_correlation_forward,
    nonlocal_adjacency,
    nonlocal_correlation,
    nonlocal_correlation_backward,
    nonlocal_correlation_forward,
    self_correlation,
    self_correlation_backward,
    self_correlation_forward,
)
from .exceptions import NumericError, ShapeError
from .graph import DilatedKnnGraph, PointCloud, build_dilated_knn
from .ndcore import ParamStore, row_softmax

EQUIVARIANCE_TOL = 1e-9
SOFTMAX_PERM_TOL = 1e-12
STOCHASTIC_TOL = 1e-12
GATE_TOL = 1e-15
GRAD_TOL = 1e-5
FD_STEP = 1e-6


# --------------------------------------------------------------------------- #
# permutations


@dataclass(frozen=True)
class PermutationMatrix:
    """Bijection ``perm`` on ``range(n)``; as a matrix ``P[perm[i], i] = 1``."""

    perm: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("perm is not a bijection on range(n)")
        object.__setattr__(self, "perm", perm)

    @property
    def n(self) -> int:
        return self.perm.size

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "PermutationMatrix":
        return cls(rng.permutation(n))

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        m[self.perm, np.arange(self.n)] = 1.0
        return m

    @property
    def T(self) -> "PermutationMatrix":
        return PermutationMatrix(np.argsort(self.perm))


def apply_perm(p: PermutationMatrix, m) -> np.ndarray:
    """``P @ m``: row ``perm[i]`` of the result is row ``i`` of ``m``."""
    m = np.asarray(m)
    if m.shape[0] != p.n:
        raise ShapeError(f"permutation of size {p.n} applied to {m.shape[0]} rows")
    out = np.empty_like(m)
    out[p.perm] = m
    return out


def apply_perm_both(p: PermutationMatrix, a) -> np.ndarray:
    """``P @ a @ P.T`` for a square matrix."""
    a = np.asarray(a)
    return apply_perm(p, apply_perm(p, a).T).T


def permute_cloud(p: PermutationMatrix, cloud: PointCloud) -> PointCloud:
    return PointCloud(
        apply_perm(p, cloud.positions),
        None if cloud.extras is None else apply_perm(p, cloud.extras),
        None if cloud.labels is None else apply_perm(p, cloud.labels),
    )


# --------------------------------------------------------------------------- #
# scalar oracles


def naive_matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, k = a.shape
    k2, m = b.shape
    if k != k2:
        raise ShapeError(f"{a.shape} x {b.shape}")
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def naive_softmax(row) -> List[float]:
    e = [math.exp(float(v)) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def naive_linear(w, b, row) -> List[float]:
    return [math.fsum(float(row[i]) * float(w[i, j]) for i in range(len(row))) + float(b[j])
            for j in range(w.shape[1])]


def _naive_bottleneck(reduce, expand, row):
    h = [max(v, 0.0) for v in naive_linear(reduce.weight, reduce.bias, row)]
    return naive_linear(expand.weight, expand.bias, h)


def oracle_self_correlation(nodes, p: SelfCorrParams) -> np.ndarray:
    out = np.zeros_like(np.asarray(nodes, dtype=float))
    alpha = float(p.reduce.store[p.alpha_name][0])
    for i, row in enumerate(nodes):
        w = naive_softmax(_naive_bottleneck(p.reduce, p.expand, row))
        for c in range(len(row)):
            out[i, c] = row[c] + alpha * (w[c] * row[c])
    return out


def _oracle_adjacency(rows, p: PairMapParams):
    q = [naive_linear(p.theta.weight, p.theta.bias, r) for r in rows]
    k = [naive_linear(p.phi.weight, p.phi.bias, r) for r in rows]
    m = [[math.fsum(a * b for a, b in zip(qx, ky)) for ky in k] for qx in q]
    return [naive_softmax(r) for r in m]


def oracle_local_correlation(nodes, neighbors, p: PairMapParams) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    out = np.zeros_like(nodes)
    for i, nb in enumerate(neighbors):
        rows = [nodes[j] for j in nb]
        adj = _oracle_adjacency(rows, p)
        for c in range(nodes.shape[1]):
            out[i, c] = max(
                math.fsum(adj[x][y] * rows[y][c] for y in range(len(rows))) for x in range(len(rows))
            )
    return out


def oracle_nonlocal_correlation(nodes, p: PairMapParams) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    adj = _oracle_adjacency(list(nodes), p)
    n, c = nodes.shape
    return np.array([[math.fsum(adj[x][y] * nodes[y, ch] for y in range(n)) for ch in range(c)]
                     for x in range(n)])


def oracle_afa(a, b, p: Optional[AfaParams]) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, c = a.shape
    s1 = [math.fsum(a[:, ch]) / n for ch in range(c)]
    s2 = [math.fsum(b[:, ch]) / n for ch in range(c)]
    if p is not None:
        s1 = _naive_bottleneck(p.mlp1.reduce, p.mlp1.expand, s1)
        s2 = _naive_bottleneck(p.mlp2.reduce, p.mlp2.expand, s2)
    out = np.zeros_like(a)
    for ch in range(c):
        m1 = 1.0 / (1.0 + math.exp(s2[ch] - s1[ch]))
        m2 = 1.0 / (1.0 + math.exp(s1[ch] - s2[ch]))
        for i in range(n):
            out[i, ch] = m1 * a[i, ch] + m2 * b[i, ch]
    return out


def brute_force_knn(cloud: PointCloud, k: int, dilation: int = 1) -> DilatedKnnGraph:
    """Full sort of all distances per query with (distance, index) ordering."""
    pts = [tuple(float(v) for v in row) for row in cloud.positions]
    n = len(pts)
    if n - 1 < k * dilation:
        raise ValueError(f"need N - 1 >= K*d, got N={n}, K={k}, d={dilation}")
    rows = []
    for i, (xi, yi, zi) in enumerate(pts):
        cand = []
        for j, (xj, yj, zj) in enumerate(pts):
            if j == i:
                continue
            dx, dy, dz = xj - xi, yj - yi, zj - zi
            cand.append((dx * dx + dy * dy + dz * dz, j))
        cand.sort()
        ranks = [dilation * t for t in range(1, k + 1)]
        rows.append([cand[r - 1][1] for r in ranks])
    return DilatedKnnGraph(k, dilation, np.array(rows, dtype=np.int64).reshape(n, k))


def finite_difference(f: Callable[[], float], params: Sequence[np.ndarray],
                      step: float = FD_STEP) -> List[np.ndarray]:
    """Central-difference gradient of ``f()`` w.r.t. each array, perturbed in place."""
    if step <= 0:
        raise ValueError("step must be positive")
    grads = []
    for arr in params:
        g = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            fp = f()
            arr[idx] = old - step
            fm = f()
            arr[idx] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite evaluation at index {idx}")
            g[idx] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """``|a - n| / (|a| + |n|)`` over the concatenation of all gradient arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


# --------------------------------------------------------------------------- #
# random instances


def random_self_params(channels: int, reduction: int, rng, store: Optional[ParamStore] = None):
    store = ParamStore() if store is None else store
    p = SelfCorrParams.create(store, "self", channels, reduction, rng)
    store.set(p.alpha_name, [rng.uniform(0.5, 2.0)])
    return p


def random_pair_params(channels: int, reduction: int, rng, prefix: str = "pair"):
    return PairMapParams.create(ParamStore(), prefix, channels, reduction, rng)


def random_afa_params(channels: int, reduction: int, rng):
    store = ParamStore()
    p = AfaParams.create(store, "afa", channels, reduction, rng)
    for name in store:
        if name.endswith("bias"):
            store.set(name, rng.normal(0, 0.5, store[name].shape))
    return p


def tie_free_cloud(n: int, rng, gap: float = 1e-6, max_tries: int = 1000) -> PointCloud:
    """Rejection-sampled cloud whose pairwise distances all differ by more than ``gap``."""
    iu = np.triu_indices(n, 1)
    for _ in range(max_tries):
        pos = rng.uniform(-5.0, 5.0, size=(n, 3))
        d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2))[iu]
        if d.size < 2 or np.min(np.diff(np.sort(d))) > gap:
            return PointCloud(pos)
    raise RuntimeError("could not sample a tie-free cloud")


# --------------------------------------------------------------------------- #
# property results


@dataclass
class PropertyResult:
    name: str
    max_dev: float
    tol: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        return f"{self.name}\t{self.max_dev:.3e}\t{self.tol:.0e}\t{'PASS' if self.passed else 'FAIL'}"


def _result(name, dev, tol, t0) -> PropertyResult:
    dev = float(dev)
    return PropertyResult(name, dev, tol, bool(np.isfinite(dev) and dev <= tol),
                          time.perf_counter() - t0)


def check_equivariance(op: Callable, sample: Callable, trials: int = 100, seed: int = 0,
                       tol: float = EQUIVARIANCE_TOL, name: str = "equivariance") -> PropertyResult:
    """Max ``|op(P x) - P op(x)|`` over random inputs and permutations.

    ``sample(rng)`` returns a tuple of inputs; arrays and point clouds are
    permuted along their first axis, anything else is passed through unchanged.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        inputs = sample(rng)
        n = _rows(inputs)
        p = PermutationMatrix.random(n, rng)
        permuted = tuple(_permute_any(p, x) for x in inputs)
        try:
            dev = np.max(np.abs(op(*permuted) - apply_perm(p, op(*inputs))))
        except (ValueError, ArithmeticError) as exc:  # broken ops count as failures
            dev = math.inf
            del exc
        worst = max(worst, float(dev))
    return _result(name, worst, tol, t0)


def _rows(inputs) -> int:
    for x in inputs:
        if isinstance(x, PointCloud):
            return x.n_points
        if isinstance(x, np.ndarray):
            return x.shape[0]
    raise ValueError("no permutable input")


def _permute_any(p, x):
    if isinstance(x, PointCloud):
        return permute_cloud(p, x)
    if isinstance(x, np.ndarray):
        return apply_perm(p, x)
    return x


# --------------------------------------------------------------------------- #
# equivariance cases


def _channels(rng) -> int:
    return int(rng.choice([8, 16, 32]))


def _sc_case(rng):
    c = _channels(rng)
    n = int(rng.integers(1, 65))
    return rng.normal(size=(n, c)), random_self_params(c, 4, rng)


def _nlc_case(rng):
    c = _channels(rng)
    n = int(rng.integers(1, 65))
    return rng.normal(size=(n, c)), random_pair_params(c, 4, rng)


def _afa_case(rng):
    c = _channels(rng)
    n = int(rng.integers(1, 65))
    return rng.normal(size=(n, c)), rng.normal(size=(n, c)), random_afa_params(c, 4, rng)


def _lc_case(rng):
    c = _channels(rng)
    k = int(rng.integers(1, 9))
    d = int(rng.integers(1, 4))
    n = int(rng.integers(k * d + 1, 65))
    cloud = tie_free_cloud(n, rng)
    return cloud, rng.normal(size=(n, c)), random_pair_params(c, 4, rng), k, d


def _lc_op(cloud, nodes, p, k, d):
    return local_correlation(nodes, build_dilated_knn(cloud, k, d), p)


EQUIVARIANCE_CASES: Dict[str, Tuple[Callable, Callable]] = {
    "self_correlation": (self_correlation, _sc_case),
    "local_correlation": (_lc_op, _lc_case),
    "nonlocal_correlation": (nonlocal_correlation, _nlc_case),
    "afa": (afa, _afa_case),
}


def _pipeline_case(variant: str):
    from .pipeline.model import BlockConfig, SegmentationModel

    def sample(rng):
        k, d = 4, int(rng.integers(1, 3))
        n = int(rng.integers(k * d + 1, 49))
        cfg = BlockConfig(channels=8, k=k, dilation=d, reduction=2, variant=variant)
        model = SegmentationModel(cfg, 3, 4, seed=int(rng.integers(1 << 31)))
        if "self.alpha" in model.store:
            model.store.set("self.alpha", [rng.uniform(0.5, 2.0)])
        return tie_free_cloud(n, rng), model

    def op(cloud, model):
        return model.logits(cloud)

    return op, sample


def softmax_permutation_check(trials: int = 1000, seed: int = 0) -> PropertyResult:
    """``softmax(P A P^T) == P softmax(A) P^T`` for random ``A`` and ``P``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 33))
        a = rng.normal(scale=3.0, size=(n, n))
        p = PermutationMatrix.random(n, rng)
        lhs = row_softmax(apply_perm_both(p, a))
        rhs = apply_perm_both(p, row_softmax(a))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return _result("softmax_permutation", worst, SOFTMAX_PERM_TOL, t0)


def row_stochastic_check(kind: str, trials: int = 500, seed: int = 0) -> PropertyResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c = _channels(rng)
        p = random_pair_params(c, 4, rng)
        if kind == "local":
            k = int(rng.integers(1, 17))
            adj = local_adjacency(rng.normal(scale=2.0, size=(k, c)), p)
        else:
            n = int(rng.integers(1, 65))
            adj = nonlocal_adjacency(rng.normal(scale=2.0, size=(n, c)), p)[0]
        worst = max(worst, float(np.max(np.abs(adj.sum(axis=1) - 1.0))))
        if np.any(adj < 0):
            worst = math.inf
    return _result(f"row_stochastic_{kind}", worst, STOCHASTIC_TOL, t0)


def gate_complement_check(trials: int = 500, seed: int = 0) -> PropertyResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 65))
        mask = gate(rng.normal(scale=5.0, size=c), rng.normal(scale=5.0, size=c))
        worst = max(worst, float(np.max(np.abs(mask.m1 + mask.m2 - 1.0))))
    return _result("gate_complement", worst, GATE_TOL, t0)


def knn_oracle_check(trials: int = 200, seed: int = 0) -> PropertyResult:
    """Mismatching index count between production and brute-force graphs."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        k = int(rng.integers(1, 9))
        d = int(rng.integers(1, 4))
        n = int(rng.integers(k * d + 1, 129))
        if rng.random() < 0.25:  # lattice clouds exercise the index tiebreak
            pos = rng.integers(0, 4, size=(n, 3)).astype(float)
        else:
            pos = rng.normal(size=(n, 3))
        cloud = PointCloud(pos)
        got = build_dilated_knn(cloud, k, d).neighbors
        want = brute_force_knn(cloud, k, d).neighbors
        mismatches += int(np.sum(got != want))
    return _result("knn_oracle", mismatches, 0.0, t0)


# --------------------------------------------------------------------------- #
# gradient checks


def _gradcheck(loss_fn, backward_fn, params: Sequence[np.ndarray]) -> float:
    analytic = backward_fn()
    numeric = finite_difference(loss_fn, params)
    return relative_error(analytic, numeric)


def gradcheck_self(rng, n=8, c=6, r=2) -> float:
    store = ParamStore()
    p = random_self_params(c, r, rng, store)
    x = rng.normal(size=(n, c))
    proj = rng.normal(size=(n, c))
    names = store.names()

    def loss():
        return float(np.sum(self_correlation(x, p) * proj))

    def back():
        _, cache = self_correlation_forward(x, p)
        dx, g = self_correlation_backward(proj, cache)
        return [dx] + [g[k] for k in names]

    return _gradcheck(loss, back, [x] + [store[k] for k in names])


def gradcheck_local(rng, n=8, c=6, k=4, d=1, r=2) -> float:
    p = random_pair_params(c, r, rng)
    store = p.theta.store
    names = store.names()
    cloud = tie_free_cloud(n, rng)
    graph = build_dilated_knn(cloud, k, d)
    x = rng.normal(size=(n, c))
    proj = rng.normal(size=(n, c))

    def loss():
        return float(np.sum(local_correlation(x, graph, p) * proj))

    def back():
        _, cache = local_correlation_forward(x, graph, p)
        dx, g = local_correlation_backward(proj, cache)
        return [dx] + [g[k] for k in names]

    return _gradcheck(loss, back, [x] + [store[k] for k in names])


def gradcheck_nonlocal(rng, n=8, c=6, r=2) -> float:
    p = random_pair_params(c, r, rng)
    store = p.theta.store
    names = store.names()
    x = rng.normal(size=(n, c))
    proj = rng.normal(size=(n, c))

    def loss():
        return float(np.sum(nonlocal_correlation(x, p) * proj))

    def back():
        _, cache = nonlocal_correlation_forward(x, p)
        dx, g = nonlocal_correlation_backward(proj, cache)
        return [dx] + [g[k] for k in names]

    return _gradcheck(loss, back, [x] + [store[k] for k in names])


def gradcheck_afa(rng, n=8, c=6, r=2, parameter_free: bool = False) -> float:
    p = None if parameter_free else random_afa_params(c, r, rng)
    store = ParamStore() if p is None else p.mlp1.reduce.store
    names = store.names()
    a = rng.normal(size=(n, c))
    b = rng.normal(size=(n, c))
    proj = rng.normal(size=(n, c))

    def loss():
        return float(np.sum(afa(a, b, p) * proj))

    def back():
        _, cache = afa_forward(a, b, p)
        da, db, g = afa_backward(proj, cache)
        return [da, db] + [g[k] for k in names]

    return _gradcheck(loss, back, [a, b] + [store[k] for k in names])


def gradcheck_model(rng, variant: str = "full", n=8, c=6, k=4, d=1, r=2) -> float:
    from .pipeline.model import BlockConfig, SegmentationModel
    from .pipeline.train import loss_and_grads

    cfg = BlockConfig(channels=c, k=k, dilation=d, reduction=r, variant=variant)
    model = SegmentationModel(cfg, 3, 3, seed=int(rng.integers(1 << 31)))
    if "self.alpha" in model.store:
        model.store.set("self.alpha", [rng.uniform(0.5, 2.0)])
    cloud = tie_free_cloud(n, rng)
    cloud = PointCloud(cloud.positions / 5.0, None, rng.integers(0, 3, n))
    graph = model.build_graph(cloud)
    names = model.store.names()

    def loss():
        return loss_and_grads(model, cloud, graph)[0]

    def back():
        g = loss_and_grads(model, cloud, graph)[1]
        return [g[k] for k in names]

    return _gradcheck(loss, back, [model.store[k] for k in names])


def gradient_check(name: str, fn: Callable, trials: int, seed: int = 0, **kw) -> PropertyResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = max(fn(rng, **kw) for _ in range(trials))
    return _result(name, worst, GRAD_TOL, t0)


# --------------------------------------------------------------------------- #
# suite


def property_names() -> List[str]:
    from .pipeline.model import VARIANTS

    names = ["softmax_permutation"]
    names += [f"equivariance_{k}" for k in EQUIVARIANCE_CASES]
    names += [f"equivariance_pipeline_{v}" for v in VARIANTS]
    names += ["row_stochastic_local", "row_stochastic_nonlocal", "gate_complement"]
    names += ["gradcheck_self", "gradcheck_local", "gradcheck_nonlocal", "gradcheck_afa",
              "gradcheck_afa_paramfree", "gradcheck_model"]
    names += ["knn_oracle"]
    return names


def run_suite(seed: int = 0, scale: float = 1.0) -> List[PropertyResult]:
    """Run every registered property; ``scale`` multiplies the trial counts."""
    from .pipeline.model import VARIANTS

    def t(n):
        return max(1, int(round(n * scale)))

    results = [softmax_permutation_check(t(1000), seed)]
    for key, (op, sample) in EQUIVARIANCE_CASES.items():
        results.append(check_equivariance(op, sample, t(100), seed, name=f"equivariance_{key}"))
    for v in VARIANTS:
        op, sample = _pipeline_case(v)
        results.append(check_equivariance(op, sample, t(25), seed, name=f"equivariance_pipeline_{v}"))
    results.append(row_stochastic_check("local", t(500), seed))
    results.append(row_stochastic_check("nonlocal", t(500), seed))
    results.append(gate_complement_check(t(500), seed))
    results.append(gradient_check("gradcheck_self", gradcheck_self, t(3), seed))
    results.append(gradient_check("gradcheck_local", gradcheck_local, t(3), seed))
    results.append(gradient_check("gradcheck_nonlocal", gradcheck_nonlocal, t(3), seed))
    results.append(gradient_check("gradcheck_afa", gradcheck_afa, t(3), seed))
    results.append(gradient_check("gradcheck_afa_paramfree", gradcheck_afa, t(3), seed,
                                  parameter_free=True))
    results.append(gradient_check("gradcheck_model", gradcheck_model, t(1), seed))
    results.append(knn_oracle_check(t(200), seed))
    return results


def format_report(results: Iterable[PropertyResult]) -> str:
    results = list(results)
    failed = [r.name for r in results if not r.passed]
    lines = [r.line() for r in results]
    summary = f"# {len(results) - len(failed)}/{len(results)} properties passed"
    if failed:
        summary += "; failed: " + ", ".join(failed)
    return "\n".join(lines + [summary])


@contextlib.contextmanager
def mutation(name: str):
    """Temporarily break the build in a named way (negative control)."""
    if name not in ndcore.KNOWN_MUTATIONS:
        raise ValueError(f"unknown mutation {name!r}; known: {', '.join(ndcore.KNOWN_MUTATIONS)}")
    ndcore.MUTATIONS.add(name)
    try:
        yield
    finally:
        ndcore.MUTATIONS.discard(name)
