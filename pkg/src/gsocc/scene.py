"""Scene representation: Gaussians, Gaussian sets, taxonomies and voxel grids.

A Gaussian is stored as one row of a flat property matrix with the layout::

    [mean(3) | scale(3) | rotation(4) | opacity(1) | semantics(d) | feature(F)]

Rotations are quaternions in ``(w, x, y, z)`` order. Scales are positive
lengths in meters (not log-scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import InvalidGaussianError, InvalidInputError, InvalidParameterError

ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class Layout:
    """Column offsets of the flat Gaussian property vector."""

    d: int
    F: int

    def __post_init__(self):
        if self.d < 1 or self.F < 0:
            raise InvalidParameterError(f"bad layout d={self.d} F={self.F}")

    mean = slice(0, 3)
    scale = slice(3, 6)
    rotation = slice(6, 10)
    opacity = slice(10, 11)

    @property
    def s(self) -> int:
        """Offset of the semantic logits."""
        return 11

    @property
    def semantics(self) -> slice:
        return slice(11, 11 + self.d)

    @property
    def feature(self) -> slice:
        return slice(11 + self.d, 11 + self.d + self.F)

    @property
    def width(self) -> int:
        return 11 + self.d + self.F

    def offsets(self) -> dict:
        return {
            "mean": 0,
            "scale": 3,
            "rotation": 6,
            "opacity": 10,
            "semantics": self.s,
            "feature": self.s + self.d,
            "width": self.width,
        }


@dataclass(frozen=True)
class SemanticTaxonomy:
    """Ordered class list with one empty class and dynamic-first ordering.

    ``static_boundary`` is the smallest non-empty class index that is static;
    every non-empty class below it is dynamic.
    """

    class_names: tuple
    empty_class: int
    dynamic_flags: tuple

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "dynamic_flags", tuple(bool(f) for f in self.dynamic_flags))
        d = len(self.class_names)
        if d < 2:
            raise InvalidParameterError("taxonomy needs at least 2 classes")
        if len(self.dynamic_flags) != d:
            raise InvalidParameterError("dynamic_flags must have one entry per class")
        if not 0 <= self.empty_class < d:
            raise InvalidParameterError("empty_class out of range")
        if self.dynamic_flags[self.empty_class]:
            raise InvalidParameterError("the empty class cannot be dynamic")
        t = self.static_boundary
        for i in self.nonempty_classes:
            if self.dynamic_flags[i] != (i < t):
                raise InvalidParameterError(
                    "classes must be ordered dynamic-first (all dynamic ids below all static ids)"
                )

    @property
    def d(self) -> int:
        return len(self.class_names)

    @property
    def nonempty_classes(self) -> list[int]:
        return [i for i in range(self.d) if i != self.empty_class]

    @property
    def static_boundary(self) -> int:
        static = [i for i in self.nonempty_classes if not self.dynamic_flags[i]]
        return min(static) if static else self.d

    @property
    def dynamic_classes(self) -> list[int]:
        return [i for i in self.nonempty_classes if self.dynamic_flags[i]]

    @property
    def static_classes(self) -> list[int]:
        return [i for i in self.nonempty_classes if not self.dynamic_flags[i]]

    @classmethod
    def default(cls) -> "SemanticTaxonomy":
        """Desk-scale taxonomy: 3 dynamic, 2 static, empty last."""
        return cls(
            class_names=("car", "pedestrian", "cyclist", "road", "building", "empty"),
            empty_class=5,
            dynamic_flags=(True, True, True, False, False, False),
        )

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "empty_class": self.empty_class,
            "dynamic_flags": list(self.dynamic_flags),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SemanticTaxonomy":
        return cls(obj["class_names"], int(obj["empty_class"]), obj["dynamic_flags"])


@dataclass(frozen=True, eq=False)
class Gaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    semantics: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        for name in ("mean", "scale", "rotation", "semantics", "feature"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "opacity", float(self.opacity))

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.mean, self.scale, self.rotation, [self.opacity], self.semantics, self.feature]
        )


class GaussianSet:
    """Immutable set of N Gaussians backed by an ``N x layout.width`` array.

    Construction only checks shapes; use :func:`validate_set` to audit the
    per-Gaussian invariants.
    """

    def __init__(self, data, d: int, F: int):
        self.layout = Layout(int(d), int(F))
        data = np.array(data, dtype=np.float64, copy=True)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, self.layout.width)
        if data.ndim != 2 or data.shape[1] != self.layout.width:
            raise InvalidInputError(
                f"expected an (N, {self.layout.width}) property matrix, got {data.shape}"
            )
        data.setflags(write=False)
        self._data = data

    @classmethod
    def from_parts(cls, mean, scale, rotation, opacity, semantics, feature) -> "GaussianSet":
        mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
        n = mean.shape[0]
        semantics = np.asarray(semantics, dtype=np.float64).reshape(n, -1)
        feature = np.asarray(feature, dtype=np.float64).reshape(n, -1)
        data = np.concatenate(
            [
                mean,
                np.asarray(scale, dtype=np.float64).reshape(n, 3),
                np.asarray(rotation, dtype=np.float64).reshape(n, 4),
                np.asarray(opacity, dtype=np.float64).reshape(n, 1),
                semantics,
                feature,
            ],
            axis=1,
        )
        return cls(data, semantics.shape[1], feature.shape[1])

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianSet":
        if not gaussians:
            raise InvalidInputError("cannot infer layout from an empty list")
        g0 = gaussians[0]
        return cls(np.stack([g.to_vector() for g in gaussians]), len(g0.semantics), len(g0.feature))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def N(self) -> int:
        return self._data.shape[0]

    def __len__(self) -> int:
        return self.N

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def F(self) -> int:
        return self.layout.F

    @property
    def mean(self) -> np.ndarray:
        return self._data[:, self.layout.mean]

    @property
    def scale(self) -> np.ndarray:
        return self._data[:, self.layout.scale]

    @property
    def rotation(self) -> np.ndarray:
        return self._data[:, self.layout.rotation]

    @property
    def opacity(self) -> np.ndarray:
        return self._data[:, 10]

    @property
    def semantics(self) -> np.ndarray:
        return self._data[:, self.layout.semantics]

    @property
    def feature(self) -> np.ndarray:
        return self._data[:, self.layout.feature]

    def __getitem__(self, i: int) -> Gaussian:
        row = self._data[i]
        L = self.layout
        return Gaussian(row[L.mean], row[L.scale], row[L.rotation], row[10], row[L.semantics], row[L.feature])

    def subset(self, rows) -> "GaussianSet":
        return GaussianSet(self._data[np.asarray(rows, dtype=np.int64)], self.d, self.F)

    def replace(self, **parts) -> "GaussianSet":
        """Return a copy with some attribute blocks replaced."""
        data = self._data.copy()
        L = self.layout
        slots = {
            "mean": L.mean,
            "scale": L.scale,
            "rotation": L.rotation,
            "opacity": L.opacity,
            "semantics": L.semantics,
            "feature": L.feature,
        }
        for name, value in parts.items():
            sl = slots[name]
            data[:, sl] = np.asarray(value, dtype=np.float64).reshape(self.N, -1)
        return GaussianSet(data, self.d, self.F)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianSet):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self._data, other._data)

    def __repr__(self) -> str:
        return f"GaussianSet(N={self.N}, d={self.d}, F={self.F})"


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel grid: origin corner, cubic voxel size, dims."""

    origin: tuple = (0.0, 0.0, 0.0)
    voxel_size: float = 0.4
    dims: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise InvalidParameterError("origin and dims must have 3 entries")
        if min(self.dims) <= 0:
            raise InvalidParameterError(f"grid dims must be positive, got {self.dims}")
        if not self.voxel_size > 0:
            raise InvalidParameterError("voxel_size must be positive")

    @property
    def n_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    def centers(self) -> np.ndarray:
        """Voxel centers, shape (X*Y*Z, 3), C order over (x, y, z)."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": self.voxel_size, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, obj: dict) -> "GridSpec":
        return cls(tuple(obj["origin"]), float(obj["voxel_size"]), tuple(obj["dims"]))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Semantic occupancy over a metric volume; ``classes`` has shape ``dims``."""

    spec: GridSpec
    classes: np.ndarray = field(repr=False)

    def __post_init__(self):
        classes = np.array(self.classes, dtype=np.int64, copy=True)
        if classes.shape != self.spec.dims:
            classes = classes.reshape(self.spec.dims)
        if classes.size and classes.min() < 0:
            raise InvalidInputError("class ids must be nonnegative")
        classes.setflags(write=False)
        object.__setattr__(self, "classes", classes)

    @classmethod
    def filled(cls, spec: GridSpec, value: int) -> "VoxelGrid":
        return cls(spec, np.full(spec.dims, int(value), dtype=np.int64))

    @property
    def origin(self):
        return self.spec.origin

    @property
    def voxel_size(self) -> float:
        return self.spec.voxel_size

    @property
    def dims(self):
        return self.spec.dims

    def check_classes(self, d: int) -> None:
        if self.classes.size and self.classes.max() >= d:
            raise InvalidInputError(f"grid holds class id >= d={d}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.classes, other.classes)


# --- geometry -----------------------------------------------------------------


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions ``(..., 4)`` in (w, x, y, z) order.

    The quaternion is used as given; normalize first if it is not unit.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back to ``q``."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2]
              - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_vjp(q: np.ndarray, dqhat: np.ndarray) -> np.ndarray:
    """Gradient through ``q / |q|`` along the last axis."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qhat = q / n
    return (dqhat - qhat * np.sum(qhat * dqhat, axis=-1, keepdims=True)) / n


def covariance(g: Gaussian) -> np.ndarray:
    """Covariance ``R diag(scale^2) R^T`` of a single Gaussian."""
    rot = np.asarray(g.rotation, dtype=np.float64)
    if abs(np.linalg.norm(rot) - 1.0) > ROTATION_TOL:
        raise InvalidGaussianError(f"rotation quaternion is not unit (norm {np.linalg.norm(rot):.6g})")
    scale = np.asarray(g.scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise InvalidGaussianError("scale components must be positive")
    R = quat_to_rotmat(rot)
    cov = (R * scale**2) @ R.T
    return 0.5 * (cov + cov.T)


def covariances(G: GaussianSet) -> np.ndarray:
    """Batched covariances for a whole set, shape (N, 3, 3)."""
    q = G.rotation / np.linalg.norm(G.rotation, axis=1, keepdims=True)
    R = quat_to_rotmat(q)
    cov = np.einsum("nij,nj,nkj->nik", R, G.scale**2, R)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def validate_set(G: GaussianSet) -> list[tuple[int, str]]:
    """List every ``(index, violated-invariant)`` pair; never raises."""
    report = []
    data = G.data
    finite = np.isfinite(data).all(axis=1)
    scale_ok = (G.scale > 0).all(axis=1)
    rot_ok = np.abs(np.linalg.norm(G.rotation, axis=1) - 1.0) <= ROTATION_TOL
    op = G.opacity
    op_ok = (op >= 0) & (op <= 1)
    for i in range(G.N):
        if not finite[i]:
            report.append((i, "finite"))
        if not scale_ok[i]:
            report.append((i, "scale>0"))
        if not rot_ok[i]:
            report.append((i, "unit rotation"))
        if not op_ok[i]:
            report.append((i, "opacity in [0,1]"))
    return report
