"""Branch fusion, the dual-graph attention layer and multi-scale orchestration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import LayerParams, tokenize
from .exceptions import InvalidInputError, InvalidParameterError
from .graph import NeighborIndex, cosine_topM, knn_adaptive_radius, knn_geometric
from .scene import GaussianSet, Layout

FUSE_MODES = ("adaptive", "add", "concat")


@dataclass
class FusionInput:
    branches: list

    def __post_init__(self):
        self.branches = [np.asarray(b, dtype=np.float64) for b in self.branches]
        if len(self.branches) < 2:
            raise InvalidInputError("fusion needs at least two branches")
        shape = self.branches[0].shape
        for b in self.branches:
            if b.shape != shape:
                raise InvalidInputError(f"branch shape mismatch: {b.shape} vs {shape}")
            if not np.all(np.isfinite(b)):
                raise InvalidInputError("branch values must be finite")


# --- fusion kernels ----------------------------------------------------------------


def adaptive_fuse_forward(*branches):
    """Per-coordinate softmax over branches, used both as weights and operands."""
    g = np.stack(branches)
    e = np.exp(g - g.max(axis=0))
    w = e / e.sum(axis=0)
    fused = np.sum(g * w, axis=0)
    return (fused, w), (g, w, fused)


def adaptive_fuse_backward(cache, d_fused, d_w=None):
    g, w, fused = cache
    dg = np.zeros_like(g)
    if d_fused is not None:
        # d fused / d g_n = w_n * (1 + g_n - fused)
        dg += d_fused[None] * w * (1.0 + g - fused[None])
    if d_w is not None:
        dg += w * (d_w - np.sum(w * d_w, axis=0, keepdims=True))
    return tuple(dg)


def add_fuse_forward(base, *branches, log_cols=None):
    """Residual sum: ``base + sum_n (g_n - base)``.

    Columns in ``log_cols`` hold positive, multiplicatively refined values
    (Gaussian scales); their residuals are summed in log space, i.e.
    ``base * prod_n (g_n / base)``, which keeps them positive.
    """
    fused = base.copy()
    for b in branches:
        fused += b - base
    if log_cols is not None:
        lb = np.log(base[:, log_cols])
        acc = lb.copy()
        for b in branches:
            acc += np.log(b[:, log_cols]) - lb
        with np.errstate(over="ignore"):
            fused[:, log_cols] = np.exp(acc)
    return (fused,), (len(branches), log_cols, base, branches, fused)


def add_fuse_backward(cache, d):
    n, log_cols, base, branches, fused = cache
    d_base = d * (1.0 - n)
    d_br = [d.copy() for _ in range(n)]
    if log_cols is not None:
        df = d[:, log_cols] * fused[:, log_cols]
        d_base[:, log_cols] = (1.0 - n) * df / base[:, log_cols]
        for db, b in zip(d_br, branches):
            db[:, log_cols] = df / b[:, log_cols]
    return (d_base, *d_br)


def concat_fuse_forward(P, *branches):
    """Learned linear projection of the concatenated branches."""
    cat = np.concatenate(branches, axis=1)
    return (cat @ P,), (P, cat, branches[0].shape[1], len(branches))


def concat_fuse_backward(cache, d):
    P, cat, D, n = cache
    dP = cat.T @ d
    dcat = d @ P.T
    return (dP,) + tuple(dcat[:, i * D:(i + 1) * D] for i in range(n))


ADAPTIVE_FUSE = ad.Primitive("adaptive_fuse", adaptive_fuse_forward, adaptive_fuse_backward, n_out=2)
ADD_FUSE = ad.Primitive("add_fuse", add_fuse_forward, add_fuse_backward)
CONCAT_FUSE = ad.Primitive("concat_fuse", concat_fuse_forward, concat_fuse_backward)


def adaptive_fuse(inp) -> tuple[np.ndarray, np.ndarray]:
    """Fuse equally shaped branches; returns ``(fused, weights[n, ...])``."""
    if not isinstance(inp, FusionInput):
        inp = FusionInput(list(inp))
    (fused, w), _ = adaptive_fuse_forward(*inp.branches)
    return fused, w


def concat_projection_init(n: int, D: int) -> np.ndarray:
    """Averaging projection, the neutral start for concat fusion."""
    return np.tile(np.eye(D) / n, (n, 1))


# --- graph construction helpers ---------------------------------------------------


@dataclass(frozen=True)
class GraphConfig:
    """How the geometric graph is built: plain KNN or adaptive radius."""

    mode: str = "knn"
    rho: float = 3.0
    K_min: int = 4

    def __post_init__(self):
        if self.mode not in ("knn", "adaptive"):
            raise InvalidParameterError(f"unknown graph mode {self.mode!r}")


def _build_geo(tokens: np.ndarray, layout: Layout, K: int, graph: GraphConfig,
               base: NeighborIndex | None = None) -> NeighborIndex:
    if graph.mode == "knn":
        if base is not None:
            return base.truncate(K)
        return knn_geometric(tokens[:, layout.mean], K)
    G = GaussianSet(tokens, layout.d, layout.F)
    return knn_adaptive_radius(G, K, graph.rho, min(graph.K_min, K), base=base)


def _build_sem(tokens: np.ndarray, layout: Layout, M: int) -> NeighborIndex:
    return cosine_topM(tokens[:, layout.feature], M)


def _param_vars(tape: ad.GradientTape, params: LayerParams) -> tuple:
    return tuple(tape.var(a) for a in params.arrays().values())


# --- taped composites ----------------------------------------------------------------


def fuse_taped(tape, mode: str, base, outs: Sequence, concat_P=None):
    if mode == "adaptive":
        fused, _ = tape.apply(ADAPTIVE_FUSE, *outs)
    elif mode == "add":
        fused = tape.apply(ADD_FUSE, base, *outs, log_cols=Layout.scale)
    elif mode == "concat":
        if concat_P is None:
            raise InvalidParameterError("concat fusion needs a projection parameter")
        fused = tape.apply(CONCAT_FUSE, concat_P, *outs)
    else:
        raise InvalidParameterError(f"unknown fuse mode {mode!r}")
    return fused


def dgga_taped(tape, tok, layout: Layout, K: int, M: int, pv_geo, pv_sem, *,
               fuse: str = "adaptive", branches=("geo", "sem"), graph: GraphConfig = GraphConfig(),
               geo_base: NeighborIndex | None = None, sem_base: NeighborIndex | None = None,
               concat_P=None):
    """One DGGA layer on tape variables.

    Graphs are rebuilt from the current token values; the indices are static
    (stop-gradient). ``pv_geo``/``pv_sem`` are 5-tuples of parameter Vars in
    :attr:`LayerParams.NAMES` order.
    """
    values = tok.value
    outs = []
    if "geo" in branches:
        idx = _build_geo(values, layout, K, graph, geo_base)
        h, _ = tape.apply(ad.ATTENTION, tok, tok, *pv_geo[:3], idx=idx.idx, mask=idx.mask)
        outs.append(tape.apply(ad.REFINE, tok, h, *pv_geo[3:], layout=layout))
    if "sem" in branches:
        idx = sem_base.truncate(M) if sem_base is not None else _build_sem(values, layout, M)
        h, _ = tape.apply(ad.ATTENTION, tok, tok, *pv_sem[:3], idx=idx.idx, mask=idx.mask)
        outs.append(tape.apply(ad.REFINE, tok, h, *pv_sem[3:], layout=layout))
    if not outs:
        raise InvalidParameterError("dgga layer needs at least one branch")
    if len(outs) == 1:
        return outs[0]
    fused = fuse_taped(tape, fuse, tok, outs, concat_P)
    return tape.apply(ad.CONSTRAIN, fused, layout=layout)


def mga_taped(tape, tok, layout: Layout, k_schedule, m_schedule, scale_params, *,
              fuse: str = "adaptive", branches=("geo", "sem"), graph: GraphConfig = GraphConfig(),
              concat_P=None, inner_concat_P=None):
    """Parallel DGGA branches at several K/M scales on the same input, fused once.

    Rows of a K-nearest (or top-M) index sorted with a deterministic
    tie-break are prefixes of the wider index, so each graph is built once at
    the widest scale and truncated.
    """
    n = tok.value.shape[0]
    if max(max(k_schedule), max(m_schedule)) > n:
        raise InvalidParameterError("schedule entry exceeds the number of Gaussians")
    values = tok.value
    geo_base = sem_base = None
    if "geo" in branches:
        geo_base = knn_geometric(values[:, layout.mean], max(k_schedule))
    if "sem" in branches:
        sem_base = _build_sem(values, layout, max(m_schedule))
    outs = []
    for s, (K, M) in enumerate(zip(k_schedule, m_schedule)):
        pv_geo, pv_sem = scale_params[s]
        outs.append(
            dgga_taped(tape, tok, layout, K, M, pv_geo, pv_sem, fuse=fuse, branches=branches,
                       graph=graph, geo_base=geo_base, sem_base=sem_base,
                       concat_P=None if inner_concat_P is None else inner_concat_P[s])
        )
    if len(outs) == 1:
        return outs[0]
    fused = fuse_taped(tape, fuse, tok, outs, concat_P)
    return tape.apply(ad.CONSTRAIN, fused, layout=layout)


# --- public array-level API ----------------------------------------------------------


def dgga_layer(G: GaussianSet, K: int, M: int, params_geo: LayerParams, params_sem: LayerParams,
               fuse_mode: str = "adaptive", graph: GraphConfig = GraphConfig(),
               branches=("geo", "sem")) -> GaussianSet:
    """Dual graph attention: GGA and SGA branches, refined and fused."""
    if fuse_mode not in ("adaptive", "add"):
        raise InvalidParameterError("dgga_layer supports 'adaptive' and 'add' without learned fusion")
    if K > G.N or M > G.N:
        raise InvalidParameterError(f"K={K}, M={M} must not exceed N={G.N}")
    tape = ad.GradientTape()
    tok = tape.var(tokenize(G))
    out = dgga_taped(tape, tok, G.layout, K, M, _param_vars(tape, params_geo),
                     _param_vars(tape, params_sem), fuse=fuse_mode, branches=branches, graph=graph)
    return GaussianSet(out.value, G.d, G.F)


@dataclass
class MgaConfig:
    topK_schedule: list = field(default_factory=lambda: [100, 75, 50, 20])
    topM_schedule: list = field(default_factory=lambda: [100, 75, 50, 20])
    params: list = field(default_factory=list)
    fuse_mode: str = "adaptive"
    graph: GraphConfig = field(default_factory=GraphConfig)

    def __post_init__(self):
        self.topK_schedule = [int(k) for k in self.topK_schedule]
        self.topM_schedule = [int(m) for m in self.topM_schedule]
        if len(self.topK_schedule) != len(self.topM_schedule) or not self.topK_schedule:
            raise InvalidParameterError("Top-K and Top-M schedules must be non-empty and equal length")
        if min(self.topK_schedule + self.topM_schedule) < 1:
            raise InvalidParameterError("schedule entries must be >= 1")
        if self.params and len(self.params) != len(self.topK_schedule):
            raise InvalidParameterError("need one (geo, sem) parameter pair per scale")
        if self.fuse_mode not in ("adaptive", "add"):
            raise InvalidParameterError("MgaConfig supports 'adaptive' and 'add' fusion")


def mga(G: GaussianSet, cfg: MgaConfig) -> GaussianSet:
    """Multi-scale graph attention over ``cfg``'s K/M schedule."""
    if max(cfg.topK_schedule + cfg.topM_schedule) > G.N:
        raise InvalidParameterError("schedule entry exceeds the number of Gaussians")
    if len(cfg.params) != len(cfg.topK_schedule):
        raise InvalidParameterError("need one (geo, sem) parameter pair per scale")
    tape = ad.GradientTape()
    tok = tape.var(tokenize(G))
    scale_params = [(_param_vars(tape, pg), _param_vars(tape, ps)) for pg, ps in cfg.params]
    out = mga_taped(tape, tok, G.layout, cfg.topK_schedule, cfg.topM_schedule, scale_params,
                    fuse=cfg.fuse_mode, graph=cfg.graph)
    return GaussianSet(out.value, G.d, G.F)
