"""Per-point segmentation model: encoder -> correlation block -> classifier head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from ..aggregation import AfaParams, afa_backward, afa_forward
from ..correlation import (
    DEFAULT_NONLOCAL_CAP,
    PairMapParams,
    SelfCorrParams,
    local_correlation_backward,
    local_correlation_forward,
    nonlocal_correlation_backward,
    nonlocal_correlation_forward,
    self_correlation_backward,
    self_correlation_forward,
)
from ..exceptions import ConfigError, InsufficientPointsError, ResourceError, ShapeError, StateError
from ..graph import DilatedKnnGraph, PointCloud, build_dilated_knn
from ..ndcore import (
    LinearLayer,
    ParamStore,
    linear_backward,
    linear_forward,
    merge_grads,
    relu_backward,
    relu_forward,
)

VARIANTS = (
    "full",
    "self_only",
    "local_only",
    "nonlocal_only",
    "parallel_1",
    "parallel_2",
    "linear_agg",
    "paramfree_afa",
    "baseline",
)

_USES_SELF = {"full", "self_only", "parallel_1", "parallel_2", "linear_agg", "paramfree_afa"}
_USES_LOCAL = {"full", "local_only", "parallel_1", "parallel_2", "linear_agg", "paramfree_afa"}
_USES_NONLOCAL = {"full", "nonlocal_only", "parallel_1", "parallel_2", "linear_agg", "paramfree_afa"}
_USES_AFA = {"full", "local_only", "nonlocal_only", "parallel_1", "parallel_2"}


@dataclass
class BlockConfig:
    channels: int = 32
    k: int = 8
    dilation: int = 2
    reduction: int = 8
    variant: str = "full"
    nonlocal_cap: int = DEFAULT_NONLOCAL_CAP

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for name in ("channels", "k", "dilation", "reduction", "nonlocal_cap"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.channels % self.reduction:
            raise ConfigError(f"reduction {self.reduction} must divide channels {self.channels}")
        if self.channels % 2:
            raise ConfigError("channels must be even (the head halves the width)")

    def check_cloud_size(self, n_points: int) -> None:
        if self.variant in _USES_LOCAL and n_points - 1 < self.k * self.dilation:
            raise InsufficientPointsError(
                f"cloud of {n_points} points cannot supply K*d = {self.k * self.dilation} neighbors"
            )
        if self.variant in _USES_NONLOCAL and n_points > self.nonlocal_cap:
            raise ResourceError(f"cloud of {n_points} points exceeds nonlocal_cap={self.nonlocal_cap}")

    @property
    def uses_graph(self) -> bool:
        return self.variant in _USES_LOCAL


def parameter_count(config: BlockConfig, in_dim: int, num_classes: int) -> Dict[str, int]:
    """Closed-form parameter count per component (see README for the formula)."""
    c, h = config.channels, config.channels // config.reduction
    half = c // 2
    counts = {
        "encoder": in_dim * c + c + 2 * (c * c + c),
        "head": c * half + half + half * num_classes + num_classes,
        "self": 0,
        "local": 0,
        "nonlocal": 0,
        "afa": 0,
    }
    v = config.variant
    if v in _USES_SELF:
        counts["self"] = 2 * c * h + h + c + 1
    if v in _USES_LOCAL:
        counts["local"] = 2 * (c * h + h)
    if v in _USES_NONLOCAL:
        counts["nonlocal"] = 2 * (c * h + h)
    if v in _USES_AFA:
        n_afa = (v in _USES_LOCAL) + (v in _USES_NONLOCAL)
        counts["afa"] = n_afa * 2 * (2 * c * h + h + c)
    counts["total"] = sum(counts.values())
    return counts


@dataclass
class ForwardCache:
    cloud_features: np.ndarray
    graph: Optional[DilatedKnnGraph]
    enc: list = field(default_factory=list)
    block: dict = field(default_factory=dict)
    head: list = field(default_factory=list)


class SegmentationModel:
    """All learnable layers of one model, backed by a single :class:`ParamStore`.

    ``zero_correlation=True`` zero-initializes every correlation and gate
    parameter, which turns self correlation into the identity and makes every
    adjacency and gate uniform.
    """

    def __init__(self, config: BlockConfig, in_dim: int, num_classes: int,
                 seed: int = 0, dtype=np.float64, zero_correlation: bool = False):
        config.validate()
        if in_dim < 3:
            raise ConfigError("in_dim must include the 3 position channels")
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        self.config = config
        self.in_dim = int(in_dim)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.store = ParamStore(dtype)
        # separate streams: every variant shares the encoder/head init of its seed
        rng = np.random.default_rng([seed, 0])
        crng = None if zero_correlation else np.random.default_rng([seed, 1])
        c, r, v = config.channels, config.reduction, config.variant

        self.encoder = [
            LinearLayer.create(self.store, "encoder.0", in_dim, c, rng),
            LinearLayer.create(self.store, "encoder.1", c, c, rng),
            LinearLayer.create(self.store, "encoder.2", c, c, rng),
        ]
        self.self_corr = SelfCorrParams.create(self.store, "self", c, r, crng) if v in _USES_SELF else None
        self.local = PairMapParams.create(self.store, "local", c, r, crng) if v in _USES_LOCAL else None
        self.nonlocal_ = (
            PairMapParams.create(self.store, "nonlocal", c, r, crng) if v in _USES_NONLOCAL else None
        )
        self.afa_local = self.afa_global = None
        if v in _USES_AFA and v in _USES_LOCAL:
            self.afa_local = AfaParams.create(self.store, "afa_local", c, r, crng)
        if v in _USES_AFA and v in _USES_NONLOCAL:
            self.afa_global = AfaParams.create(self.store, "afa_global", c, r, crng)
        self.head = [
            LinearLayer.create(self.store, "head.0", c, c // 2, rng),
            LinearLayer.create(self.store, "head.1", c // 2, num_classes, rng),
        ]

    # ------------------------------------------------------------------ #

    @property
    def dtype(self):
        return self.store.dtype

    def n_params(self) -> int:
        return self.store.n_params()

    def describe(self) -> dict:
        return {**asdict(self.config), "in_dim": self.in_dim, "num_classes": self.num_classes}

    def build_graph(self, cloud: PointCloud) -> Optional[DilatedKnnGraph]:
        if not self.config.uses_graph:
            return None
        return build_dilated_knn(cloud, self.config.k, self.config.dilation)

    def _features(self, cloud: PointCloud) -> np.ndarray:
        x = cloud.features()
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"model expects {self.in_dim} input features, cloud has {x.shape[1]}")
        return x.astype(self.dtype, copy=False)

    # mixing of two branches, per variant
    def _mix_forward(self, params: Optional[AfaParams], a, b):
        v = self.config.variant
        if v == "linear_agg":
            return a + b, None
        if v == "paramfree_afa":
            return afa_forward(a, b, None)
        return afa_forward(a, b, params)

    def _mix_backward(self, dout, cache):
        if self.config.variant == "linear_agg":
            return dout, dout, {}
        return afa_backward(dout, cache)

    def _block_forward(self, v0, graph, bc: dict):
        v = self.config.variant
        cap = self.config.nonlocal_cap
        if v == "baseline":
            return v0
        if v == "self_only":
            out, bc["self"] = self_correlation_forward(v0, self.self_corr)
            return out
        if v == "local_only":
            loc, bc["local"] = local_correlation_forward(v0, graph, self.local)
            out, bc["mix_local"] = afa_forward(v0, loc, self.afa_local)
            return out
        if v == "nonlocal_only":
            glo, bc["nonlocal"] = nonlocal_correlation_forward(v0, self.nonlocal_, cap)
            out, bc["mix_global"] = afa_forward(v0, glo, self.afa_global)
            return out
        if v == "parallel_1":
            v1, bc["self"] = self_correlation_forward(v0, self.self_corr)
            loc, bc["local"] = local_correlation_forward(v0, graph, self.local)
            glo, bc["nonlocal"] = nonlocal_correlation_forward(v0, self.nonlocal_, cap)
            mixed, bc["mix_local"] = afa_forward(v1, loc, self.afa_local)
            out, bc["mix_global"] = afa_forward(mixed, glo, self.afa_global)
            return out
        if v == "parallel_2":
            v1, bc["self"] = self_correlation_forward(v0, self.self_corr)
            loc, bc["local"] = local_correlation_forward(v1, graph, self.local)
            glo, bc["nonlocal"] = nonlocal_correlation_forward(v1, self.nonlocal_, cap)
            mixed, bc["mix_local"] = afa_forward(v1, loc, self.afa_local)
            out, bc["mix_global"] = afa_forward(mixed, glo, self.afa_global)
            return out
        # sequential: full, linear_agg, paramfree_afa
        v1, bc["self"] = self_correlation_forward(v0, self.self_corr)
        loc, bc["local"] = local_correlation_forward(v1, graph, self.local)
        v2, bc["mix_local"] = self._mix_forward(self.afa_local, v1, loc)
        glo, bc["nonlocal"] = nonlocal_correlation_forward(v2, self.nonlocal_, cap)
        v3, bc["mix_global"] = self._mix_forward(self.afa_global, v2, glo)
        return v3

    def _block_backward(self, d, bc: dict):
        v = self.config.variant
        if v == "baseline":
            return d, {}
        if v == "self_only":
            return self_correlation_backward(d, bc["self"])
        if v == "local_only":
            da, dloc, g1 = afa_backward(d, bc["mix_local"])
            dv, g2 = local_correlation_backward(dloc, bc["local"])
            return da + dv, merge_grads(g1, g2)
        if v == "nonlocal_only":
            da, dglo, g1 = afa_backward(d, bc["mix_global"])
            dv, g2 = nonlocal_correlation_backward(dglo, bc["nonlocal"])
            return da + dv, merge_grads(g1, g2)
        if v == "parallel_1":
            dmixed, dglo, g1 = afa_backward(d, bc["mix_global"])
            dv1, dloc, g2 = afa_backward(dmixed, bc["mix_local"])
            dv0_g, g3 = nonlocal_correlation_backward(dglo, bc["nonlocal"])
            dv0_l, g4 = local_correlation_backward(dloc, bc["local"])
            dv0_s, g5 = self_correlation_backward(dv1, bc["self"])
            return dv0_g + dv0_l + dv0_s, merge_grads(g1, g2, g3, g4, g5)
        if v == "parallel_2":
            dmixed, dglo, g1 = afa_backward(d, bc["mix_global"])
            dv1, dloc, g2 = afa_backward(dmixed, bc["mix_local"])
            dv1_g, g3 = nonlocal_correlation_backward(dglo, bc["nonlocal"])
            dv1_l, g4 = local_correlation_backward(dloc, bc["local"])
            dv0, g5 = self_correlation_backward(dv1 + dv1_g + dv1_l, bc["self"])
            return dv0, merge_grads(g1, g2, g3, g4, g5)
        dv2, dglo, g1 = self._mix_backward(d, bc["mix_global"])
        dv2_g, g2 = nonlocal_correlation_backward(dglo, bc["nonlocal"])
        dv1, dloc, g3 = self._mix_backward(dv2 + dv2_g, bc["mix_local"])
        dv1_l, g4 = local_correlation_backward(dloc, bc["local"])
        dv0, g5 = self_correlation_backward(dv1 + dv1_l, bc["self"])
        return dv0, merge_grads(g1, g2, g3, g4, g5)

    # ------------------------------------------------------------------ #

    def encode(self, x, enc_cache: Optional[list] = None) -> np.ndarray:
        h = x
        for j, layer in enumerate(self.encoder):
            pre = linear_forward(layer, h)
            if enc_cache is not None:
                enc_cache.append((h, pre))
            h = relu_forward(pre) if j < len(self.encoder) - 1 else pre
        return h

    def forward(self, cloud: PointCloud, graph: Optional[DilatedKnnGraph] = None):
        """Per-node logits ``(N, num_classes)`` and the cache for :meth:`backward`."""
        self.config.check_cloud_size(cloud.n_points)
        x = self._features(cloud)
        if graph is None:
            graph = self.build_graph(cloud)
        cache = ForwardCache(x, graph)
        v0 = self.encode(x, cache.enc)
        v3 = self._block_forward(v0, graph, cache.block)
        hidden_pre = linear_forward(self.head[0], v3)
        hidden = relu_forward(hidden_pre)
        logits = linear_forward(self.head[1], hidden)
        cache.head = [(v3, hidden_pre), (hidden, None)]
        return logits, cache

    def logits(self, cloud: PointCloud, graph: Optional[DilatedKnnGraph] = None) -> np.ndarray:
        return self.forward(cloud, graph)[0]

    def backward(self, dlogits, cache: Optional[ForwardCache]):
        """Gradients of every parameter given ``dL/dlogits``; returns a name -> array dict."""
        if cache is None:
            raise StateError("model backward called before forward")
        (v3, hidden_pre), (hidden, _) = cache.head
        dhidden, g_head1 = linear_backward(self.head[1], dlogits, hidden)
        dv3, g_head0 = linear_backward(self.head[0], relu_backward(dhidden, hidden_pre), v3)
        dv0, g_block = self._block_backward(dv3, cache.block)
        grads = merge_grads(g_head1, g_head0, g_block)
        d = dv0
        for j in reversed(range(len(self.encoder))):
            h, pre = cache.enc[j]
            if j < len(self.encoder) - 1:
                d = relu_backward(d, pre)
            d, g = linear_backward(self.encoder[j], d, h)
            grads.update(g)
        return grads
