"""Seeded synthetic scenes of labeled geometric primitives.

Each scene is a small room-like arrangement of 2 to 4 primitives drawn from
four kinds, which are also the class labels: 0 horizontal plane patch lying on
the floor (z = 0), 1 sphere shell floating above it, 2 solid axis-aligned box
resting on it (points fill the volume), 3 thin vertical pole standing on it.
Height alone is ambiguous (every kind but the sphere touches the floor), so
telling the kinds apart needs the surrounding points.

Primitives occupy the cells of a 2 x 2 grid in the xy-plane and the kind of
each cell is random. ``difficulty`` shrinks the gaps between cells (0 keeps
them disjoint, so each primitive is linearly separable from the others),
enlarges the primitives so that neighbors start to overlap, and raises the
position noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..graph import PointCloud

KINDS = ("plane", "sphere", "box", "pole")
NUM_CLASSES = len(KINDS)
_CELL_CENTERS = np.array([[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])


@dataclass(frozen=True)
class Primitive:
    kind: int
    center: np.ndarray  # (3,)
    size: float  # half-extent / radius
    weight: float  # share of the points


@dataclass(frozen=True)
class SceneLayout:
    primitives: List[Primitive]
    noise: float

    def mixture(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        """Expected fraction of points per class."""
        mix = np.zeros(num_classes)
        for p in self.primitives:
            mix[p.kind] += p.weight
        return mix


def _resting_height(rng: np.random.Generator, kind: int, size: float) -> float:
    """Center height that puts a primitive of ``kind`` on (or above) the floor."""
    if kind == 0:
        return 0.0
    if kind == 1:
        return size + rng.uniform(0.05, 0.3)
    if kind == 2:
        return 0.7 * size
    return size


def _layout(rng: np.random.Generator, difficulty: float) -> SceneLayout:
    n_prims = int(rng.integers(2, 5))
    cells = rng.permutation(4)[:n_prims]
    kinds = rng.integers(0, NUM_CLASSES, size=n_prims)
    # disjoint at 0: a half-extent of 0.4 leaves 0.2 between neighboring cells
    base = 0.3 + 0.25 * difficulty
    prims = []
    for cell, kind in zip(cells, kinds):
        size = base * rng.uniform(0.75, 1.0)
        slack = 0.5 - size
        xy = _CELL_CENTERS[cell] + rng.uniform(-1, 1, size=2) * max(slack, 0.0) * 0.5
        xy = xy + rng.normal(0.0, 0.15 * difficulty, size=2)
        z = _resting_height(rng, int(kind), size)
        prims.append(Primitive(int(kind), np.array([xy[0], xy[1], z]), float(size), 1.0 / n_prims))
    noise = 0.005 + 0.02 * difficulty
    return SceneLayout(prims, noise)


def _sample_primitive(rng: np.random.Generator, p: Primitive, n: int) -> np.ndarray:
    s = p.size
    if p.kind == 0:  # plane patch
        pts = np.column_stack([rng.uniform(-s, s, n), rng.uniform(-s, s, n), np.zeros(n)])
    elif p.kind == 1:  # sphere
        v = rng.normal(size=(n, 3))
        pts = s * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif p.kind == 2:  # solid box
        pts = rng.uniform(-0.7 * s, 0.7 * s, size=(n, 3))
    else:  # thin vertical pole
        ang = rng.uniform(0, 2 * np.pi, n)
        r = 0.08 * s
        pts = np.column_stack([r * np.cos(ang), r * np.sin(ang), rng.uniform(-s, s, n)])
    return pts + p.center


def scene_layout(seed: int, difficulty: float = 0.5) -> SceneLayout:
    """The primitive layout that :func:`gen_synthetic_scene` uses for ``seed``."""
    return _layout(np.random.default_rng(seed), difficulty)


def gen_synthetic_scene(seed: int, n_points: int = 512, difficulty: float = 0.5) -> PointCloud:
    """Deterministic labeled scene for ``seed``.

    Point counts per primitive are multinomial with the layout's weights, so the
    label histogram follows :meth:`SceneLayout.mixture` up to sampling noise.
    """
    if int(n_points) != n_points or n_points < 64:
        raise ValueError(f"n_points must be an integer >= 64, got {n_points}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(seed)
    layout = _layout(rng, difficulty)
    counts = rng.multinomial(int(n_points), [p.weight for p in layout.primitives])
    pos, labels = [], []
    for p, n in zip(layout.primitives, counts):
        pos.append(_sample_primitive(rng, p, int(n)))
        labels.append(np.full(int(n), p.kind))
    positions = np.vstack(pos)
    positions = positions + rng.normal(0.0, layout.noise, size=positions.shape)
    labels = np.concatenate(labels)
    order = rng.permutation(int(n_points))
    return PointCloud(positions[order], None, labels[order])


def gen_dataset(seed: int, n_scenes: int, n_points: int = 512, difficulty: float = 0.5):
    """``n_scenes`` scenes with seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    return [gen_synthetic_scene(int(s), n_points, difficulty) for s in seeds]
