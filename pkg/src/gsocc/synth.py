"""Synthetic desk-scale driving scenes: box primitives on a ground plane.

The ground-truth grid voxelizes the placed primitives; initial Gaussians
sample occupied voxels with positional noise, miscalibrated extent and
opacity, noisy semantic logits, and noisy class-embedding features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DegenerateSceneError, InvalidParameterError
from .scene import GaussianSet, GridSpec, SemanticTaxonomy, VoxelGrid

# (width, length, height) ranges in meters per primitive kind.
_TEMPLATES = {
    "car": ((1.7, 2.1), (3.6, 4.6), (1.4, 1.8)),
    "pedestrian": ((0.5, 0.9), (0.5, 0.9), (1.5, 1.9)),
    "cyclist": ((0.6, 0.9), (1.6, 2.0), (1.4, 1.8)),
    "building": ((0.6, 1.2), (3.0, 7.0), (2.2, 3.0)),
}

DEFAULT_COUNTS = {"car": 3, "pedestrian": 5, "cyclist": 3, "building": 3}


@dataclass
class SceneSpec:
    seed: int = 0
    extent_xy: float = 8.0
    extent_z: float = 3.2
    voxel_size: float = 0.5
    dims: tuple = (32, 32, 32)
    ground: bool = True
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    n_gaussians: int = 512
    dynamic_weight: float = 4.0
    position_noise: float = 0.15
    logit_signal: float = 2.0
    logit_noise: float = 1.6
    feature_noise: float = 0.3
    init_scale: float = 0.3
    init_opacity: float = 0.35
    F: int = 32

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.counts = {str(k): int(v) for k, v in self.counts.items()}
        if not (self.extent_xy > 0 and self.extent_z > 0 and self.voxel_size > 0):
            raise InvalidParameterError("scene extent and voxel size must be positive")
        if any(v < 0 for v in self.counts.values()):
            raise InvalidParameterError("object counts must be >= 0")
        unknown = set(self.counts) - set(_TEMPLATES)
        if unknown:
            raise InvalidParameterError(f"unknown primitive kinds: {sorted(unknown)}")
        if self.n_gaussians < 1:
            raise InvalidParameterError("n_gaussians must be >= 1")

    @property
    def grid(self) -> GridSpec:
        return GridSpec((-self.extent_xy, -self.extent_xy, 0.0), self.voxel_size, self.dims)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "SceneSpec":
        return cls(**obj)


def class_embeddings(taxonomy: SemanticTaxonomy, F: int) -> np.ndarray:
    """Fixed unit feature direction per class (independent of the scene seed)."""
    rng = np.random.default_rng(20240601)
    E = rng.normal(size=(taxonomy.d, F))
    return E / np.linalg.norm(E, axis=1, keepdims=True)


def _place_objects(spec: SceneSpec, taxonomy: SemanticTaxonomy, rng) -> list:
    names = list(taxonomy.class_names)
    placed = []
    lim = spec.extent_xy - 1.0
    for kind in ("building", "car", "cyclist", "pedestrian"):
        for _ in range(spec.counts.get(kind, 0)):
            (w0, w1), (l0, l1), (h0, h1) = _TEMPLATES[kind]
            for _attempt in range(200):
                w, l, h = rng.uniform(w0, w1), rng.uniform(l0, l1), rng.uniform(h0, h1)
                yaw = rng.uniform(0, np.pi)
                cx, cy = rng.uniform(-lim, lim, size=2)
                radius = 0.5 * np.hypot(w, l)
                if all(np.hypot(cx - o["cx"], cy - o["cy"]) > radius + o["r"] + 0.5 for o in placed):
                    placed.append(dict(kind=kind, cls=names.index(kind), cx=cx, cy=cy, w=w, l=l,
                                       h=min(h, spec.extent_z - spec.voxel_size), yaw=yaw, r=radius))
                    break
    return placed


def _voxelize(spec: SceneSpec, taxonomy: SemanticTaxonomy, objects: list) -> np.ndarray:
    grid = spec.grid
    classes = np.full(grid.dims, taxonomy.empty_class, dtype=np.int64)
    centers = grid.centers().reshape(grid.dims + (3,))
    names = list(taxonomy.class_names)
    if spec.ground:
        classes[:, :, 0] = names.index("road")
    ground_top = spec.voxel_size if spec.ground else 0.0
    for o in objects:
        dx = centers[..., 0] - o["cx"]
        dy = centers[..., 1] - o["cy"]
        c, s = np.cos(o["yaw"]), np.sin(o["yaw"])
        u = c * dx + s * dy
        v = -s * dx + c * dy
        z = centers[..., 2]
        inside = (np.abs(u) <= o["w"] / 2) & (np.abs(v) <= o["l"] / 2) & (z >= ground_top) & (
            z <= ground_top + o["h"])
        classes[inside] = o["cls"]
    return classes


def gen_scene(spec: SceneSpec, taxonomy: SemanticTaxonomy | None = None):
    """Build ``(init_gaussians, gt_grid)``; identical output for identical specs."""
    taxonomy = taxonomy or SemanticTaxonomy.default()
    for needed in ("road", "car", "pedestrian", "cyclist", "building"):
        if needed not in taxonomy.class_names:
            raise InvalidParameterError(f"taxonomy lacks class {needed!r}")
    if not spec.ground and sum(spec.counts.values()) == 0:
        raise DegenerateSceneError("scene spec places no objects and no ground plane")
    rng = np.random.default_rng(spec.seed)
    objects = _place_objects(spec, taxonomy, rng)
    classes = _voxelize(spec, taxonomy, objects)
    gt = VoxelGrid(spec.grid, classes)

    flat = classes.ravel()
    occ = np.flatnonzero(flat != taxonomy.empty_class)
    if occ.size == 0:
        raise DegenerateSceneError("scene has no occupied voxels")
    dyn = np.asarray(taxonomy.dynamic_flags)[flat[occ]]
    weight = np.where(dyn, spec.dynamic_weight, 1.0)
    n = spec.n_gaussians
    pick = rng.choice(occ.size, size=n, replace=occ.size < n, p=weight / weight.sum())
    pick.sort()
    vox = occ[pick]
    labels = flat[vox]
    centers = spec.grid.centers()[vox]

    mean = centers + rng.normal(0.0, spec.position_noise, size=(n, 3))
    scale = spec.init_scale * np.exp(rng.normal(0.0, 0.1, size=(n, 3)))
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0, 0.3, size=n)
    rotation = np.concatenate([np.cos(angle / 2)[:, None], np.sin(angle / 2)[:, None] * axis], axis=1)
    opacity = np.full(n, spec.init_opacity)
    d = taxonomy.d
    logits = rng.normal(0.0, spec.logit_noise, size=(n, d))
    logits[np.arange(n), labels] += spec.logit_signal
    logits[:, taxonomy.empty_class] -= spec.logit_signal
    E = class_embeddings(taxonomy, spec.F)
    feature = E[labels] + rng.normal(0.0, spec.feature_noise, size=(n, spec.F))
    init = GaussianSet.from_parts(mean, scale, rotation, opacity, logits, feature)
    return init, gt


def scene_labels(init: GaussianSet, gt: VoxelGrid) -> np.ndarray:
    """GT class of the voxel containing each Gaussian mean (empty if outside)."""
    spec = gt.spec
    ijk = np.floor((init.mean - np.asarray(spec.origin)) / spec.voxel_size).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.asarray(spec.dims)), axis=1)
    out = np.full(init.N, -1, dtype=np.int64)
    out[inside] = gt.classes[ijk[inside, 0], ijk[inside, 1], ijk[inside, 2]]
    return out
