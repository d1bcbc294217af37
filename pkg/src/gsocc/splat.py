"""Gaussian-to-voxel semantic occupancy splatting and the occupancy loss.

For voxel center ``x`` and class ``c``::

    acc(x, c) = sum_i opacity_i * softmax(sem_i)[c] * exp(-0.5 * maha_i(x))

over Gaussians whose squared Mahalanobis distance is within
``cutoff_sigmas**2``. A voxel takes ``argmax_c acc`` when the maximum is at
least ``occupancy_threshold`` and the empty class otherwise.

Work is organised per Gaussian: each Gaussian enumerates the voxels inside
the bounding box of its cutoff ellipsoid, so cost scales with the number of
(Gaussian, voxel) pairs, not with N * n_voxels. Pairs are generated in
ascending Gaussian order and summed with ``np.bincount``, which fixes the
per-voxel summation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import InvalidParameterError, NumericInputError
from .scene import GaussianSet, GridSpec, Layout, VoxelGrid, normalize_vjp, quat_to_rotmat, rotmat_vjp

MAX_CONDITION = 1e12
PAIR_BUDGET = 2_000_000


@dataclass(frozen=True)
class SplatConfig:
    cutoff_sigmas: float = 3.0
    occupancy_threshold: float = 0.1

    def __post_init__(self):
        if not self.cutoff_sigmas > 0:
            raise InvalidParameterError("cutoff_sigmas must be positive")
        if not 0 < self.occupancy_threshold < 1:
            raise InvalidParameterError("occupancy_threshold must lie in (0, 1)")


@dataclass
class SplatReport:
    n_pairs: int = 0
    skipped: list = field(default_factory=list)

    @property
    def warnings(self) -> int:
        return len(self.skipped)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _degenerate(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = (scale.max(axis=1) / scale.min(axis=1)) ** 2
        bad = ~(np.isfinite(cond) & (cond <= MAX_CONDITION) & (scale.min(axis=1) > 0))
    bad |= ~np.isfinite(rot).all(axis=1) | (np.linalg.norm(rot, axis=1) == 0)
    return bad


def _enumerate_pairs(mean, scale, R, skip, spec: GridSpec, cutoff: float):
    """Candidate (gaussian, voxel) pairs inside each cutoff bounding box."""
    origin = np.asarray(spec.origin)
    dims = np.asarray(spec.dims)
    v = spec.voxel_size
    # Factor out the largest scale so huge Gaussians do not overflow to inf * 0.
    top = scale.max(axis=1, keepdims=True)
    rel = scale / top
    half = cutoff * top * np.sqrt(np.einsum("nab,nb->na", R * R, rel * rel))
    # Clip in float before the cast: an oversized box must cover the grid, not wrap.
    lo = np.clip(np.ceil((mean - half - origin) / v - 0.5), 0, dims).astype(np.int64)
    hi = np.clip(np.floor((mean + half - origin) / v - 0.5), -1, dims - 1).astype(np.int64)
    ext = np.maximum(hi - lo + 1, 0)
    counts = ext.prod(axis=1)
    counts[skip] = 0
    return lo, ext, counts


def _chunks(counts: np.ndarray, budget: int):
    start, acc = 0, 0
    for i, c in enumerate(counts):
        if acc and acc + c > budget:
            yield start, i
            start, acc = i, 0
        acc += c
    if start < len(counts):
        yield start, len(counts)


def _pairs_for(lo, ext, counts, g0, g1, mean, R, scale, spec: GridSpec, cutoff2: float):
    cnt = counts[g0:g1]
    total = int(cnt.sum())
    gid = np.repeat(np.arange(g0, g1), cnt)
    starts = np.cumsum(cnt) - cnt
    local = np.arange(total) - np.repeat(starts, cnt)
    ny = ext[gid, 1]
    nz = ext[gid, 2]
    nyz = ny * nz
    ix = lo[gid, 0] + local // nyz
    rem = local % nyz
    iy = lo[gid, 1] + rem // nz
    iz = lo[gid, 2] + rem % nz
    origin = np.asarray(spec.origin)
    v = spec.voxel_size
    centers = origin + (np.stack([ix, iy, iz], axis=1) + 0.5) * v
    diff = centers - mean[gid]
    u = np.einsum("pa,pab->pb", diff, R[gid])
    z = u / scale[gid]
    maha = np.sum(z * z, axis=1)
    keep = maha <= cutoff2
    X, Y, Z = spec.dims
    vox = (ix * Y + iy) * Z + iz
    return gid[keep], vox[keep], diff[keep], u[keep], z[keep], maha[keep]


def splat_forward(tokens, *, spec: GridSpec, cfg: SplatConfig, layout: Layout):
    """Accumulated class evidence, shape ``(n_voxels, d)``."""
    if not np.all(np.isfinite(tokens)):
        raise NumericInputError("Gaussians contain non-finite values")
    L = layout
    mean = tokens[:, L.mean]
    scale = tokens[:, L.scale]
    rot = tokens[:, L.rotation]
    opacity = tokens[:, 10]
    skip = _degenerate(scale, rot)
    with np.errstate(invalid="ignore", divide="ignore"):
        qhat = rot / np.linalg.norm(rot, axis=1, keepdims=True)
    qhat[skip] = (1.0, 0.0, 0.0, 0.0)
    R = quat_to_rotmat(qhat)
    safe_scale = np.where(skip[:, None], 1.0, scale)
    p = _softmax(tokens[:, L.semantics])
    lo, ext, counts = _enumerate_pairs(mean, safe_scale, R, skip, spec, cfg.cutoff_sigmas)
    V = spec.n_voxels
    d = L.d
    acc = np.zeros((V, d))
    chunks = []
    n_pairs = 0
    for g0, g1 in _chunks(counts, PAIR_BUDGET):
        gid, vox, diff, u, z, maha = _pairs_for(
            lo, ext, counts, g0, g1, mean, R, safe_scale, spec, cfg.cutoff_sigmas**2
        )
        dens = np.exp(-0.5 * maha)
        w = opacity[gid] * dens
        for c in range(d):
            acc[:, c] += np.bincount(vox, weights=w * p[gid, c], minlength=V)
        chunks.append((gid, vox, diff, u, z, dens))
        n_pairs += len(gid)
    report = SplatReport(n_pairs=n_pairs, skipped=np.flatnonzero(skip).tolist())
    cache = (tokens.shape, L, rot, qhat, R, safe_scale, opacity, p, chunks, skip)
    return (acc,), (cache, report)


def splat_backward(cache_and_report, d_acc):
    cache, _ = cache_and_report
    shape, L, rot, qhat, R, scale, opacity, p, chunks, skip = cache
    n, d = shape[0], L.d
    d_mean = np.zeros((n, 3))
    d_scale = np.zeros((n, 3))
    d_R = np.zeros((n, 3, 3))
    d_op = np.zeros(n)
    d_p = np.zeros((n, d))
    for gid, vox, diff, u, z, dens in chunks:
        if len(gid) == 0:
            continue
        g = d_acc[vox]
        gp = np.sum(g * p[gid], axis=1)
        d_op += np.bincount(gid, weights=gp * dens, minlength=n)
        od = opacity[gid] * dens
        for c in range(d):
            d_p[:, c] += np.bincount(gid, weights=g[:, c] * od, minlength=n)
        d_maha = -0.5 * dens * opacity[gid] * gp
        d_z = 2.0 * z * d_maha[:, None]
        s = scale[gid]
        d_u = d_z / s
        d_s_pair = -d_z * u / (s * s)
        d_diff = np.einsum("pab,pb->pa", R[gid], d_u)
        d_R_pair = diff[:, :, None] * d_u[:, None, :]
        for a in range(3):
            d_mean[:, a] -= np.bincount(gid, weights=d_diff[:, a], minlength=n)
            d_scale[:, a] += np.bincount(gid, weights=d_s_pair[:, a], minlength=n)
            for b in range(3):
                d_R[:, a, b] += np.bincount(gid, weights=d_R_pair[:, a, b], minlength=n)
    d_tok = np.zeros(shape)
    d_tok[:, L.mean] = d_mean
    d_tok[:, L.scale] = d_scale
    ok = ~skip
    if np.any(ok):
        d_qhat = rotmat_vjp(qhat[ok], d_R[ok])
        d_tok[ok, 6:10] = normalize_vjp(rot[ok], d_qhat)
    d_tok[:, 10] = d_op
    d_tok[:, L.semantics] = p * (d_p - np.sum(p * d_p, axis=1, keepdims=True))
    d_tok[skip] = 0.0
    return (d_tok,)


SPLAT = ad.Primitive("splat", splat_forward, splat_backward)


def classify(acc: np.ndarray, spec: GridSpec, cfg: SplatConfig, empty_class: int) -> VoxelGrid:
    best = np.argmax(acc, axis=1)
    occupied = acc[np.arange(len(best)), best] >= cfg.occupancy_threshold
    classes = np.where(occupied, best, empty_class)
    return VoxelGrid(spec, classes.reshape(spec.dims))


def splat_acc(G: GaussianSet, spec: GridSpec, cfg: SplatConfig = SplatConfig()):
    """Dense evidence array ``(X, Y, Z, d)`` and the skip report."""
    (acc,), (_, report) = splat_forward(G.data, spec=spec, cfg=cfg, layout=G.layout)
    return acc.reshape(spec.dims + (G.d,)), report


def splat(G: GaussianSet, grid: GridSpec | VoxelGrid, cfg: SplatConfig = SplatConfig(),
          empty_class: int | None = None, return_report: bool = False):
    """Splat a Gaussian set into a semantic occupancy grid.

    ``empty_class`` defaults to the last class id.
    """
    spec = grid.spec if isinstance(grid, VoxelGrid) else grid
    if empty_class is None:
        empty_class = G.d - 1
    (acc,), (_, report) = splat_forward(G.data, spec=spec, cfg=cfg, layout=G.layout)
    out = classify(acc, spec, cfg, empty_class)
    return (out, report) if return_report else out


# --- loss -----------------------------------------------------------------------------


def occupancy_ce_forward(acc, *, labels, empty_class: int, background: float, floor: float):
    """Mean per-voxel cross-entropy of normalised class evidence.

    The empty class gets a constant ``background`` prior and every other class
    a small ``floor``, so voxels without Gaussian coverage default to empty
    and the loss stays finite.
    """
    q = acc + floor
    q[:, empty_class] += background - floor
    total = q.sum(axis=1)
    rows = np.arange(len(labels))
    qy = q[rows, labels]
    loss = -np.mean(np.log(qy) - np.log(total))
    return (np.asarray(loss),), (qy, total, labels, acc.shape[1])


def occupancy_ce_backward(cache, d_loss):
    qy, total, labels, d = cache
    V = len(labels)
    d_acc = np.repeat((1.0 / total)[:, None], d, axis=1)
    d_acc[np.arange(V), labels] -= 1.0 / qy
    return (float(d_loss) / V * d_acc,)


OCC_LOSS = ad.Primitive("occupancy_ce", occupancy_ce_forward, occupancy_ce_backward)
