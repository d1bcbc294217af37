"""End-to-end refinement pipeline: L refinement blocks, optional DSDGA, splat.

Parameters live in a flat ``{name: array}`` dict so they serialize and
optimize uniformly; names look like ``layer0.geo.W_Q``, ``layer1.s2.sem.b_dec``
or ``dsdga.dca.W_V``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import LayerParams, tokenize
from .decouple import DSDGA_MODES, dsdga_taped
from .exceptions import InvalidParameterError
from .fusion import FUSE_MODES, GraphConfig, concat_projection_init, dgga_taped, mga_taped
from .scene import GaussianSet, GridSpec, Layout, SemanticTaxonomy, VoxelGrid
from .splat import OCC_LOSS, SPLAT, SplatConfig, classify

BLOCKS = ("none", "mlp", "gga", "sga", "dgga", "mga")
_BRANCHES = {"gga": ("geo",), "sga": ("sem",), "dgga": ("geo", "sem"), "mga": ("geo", "sem")}


def _desk_grid() -> GridSpec:
    return GridSpec((-8.0, -8.0, 0.0), 0.5, (32, 32, 32))


@dataclass
class PipelineConfig:
    n_layers: int = 4
    block: str = "dgga"
    K: int = 16
    M: int = 16
    k_schedule: list = field(default_factory=lambda: [16, 12, 8, 4])
    m_schedule: list = field(default_factory=lambda: [16, 12, 8, 4])
    fuse: str = "adaptive"
    dsdga: str = "off"
    d_k: int = 32
    mlp_hidden: int | None = None
    graph: GraphConfig = field(default_factory=GraphConfig)
    splat: SplatConfig = field(default_factory=SplatConfig)
    grid: GridSpec = field(default_factory=_desk_grid)
    loss_background: float = 0.1
    loss_floor: float = 1e-3
    qk_init_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.graph, dict):
            self.graph = GraphConfig(**self.graph)
        if isinstance(self.splat, dict):
            self.splat = SplatConfig(**self.splat)
        if isinstance(self.grid, dict):
            self.grid = GridSpec.from_dict(self.grid)
        self.k_schedule = [int(k) for k in self.k_schedule]
        self.m_schedule = [int(m) for m in self.m_schedule]
        if self.block not in BLOCKS:
            raise InvalidParameterError(f"block must be one of {BLOCKS}")
        if self.fuse not in FUSE_MODES:
            raise InvalidParameterError(f"fuse must be one of {FUSE_MODES}")
        if self.dsdga != "off" and self.dsdga not in DSDGA_MODES:
            raise InvalidParameterError(f"dsdga must be 'off' or one of {DSDGA_MODES}")
        if self.n_layers < 0 or self.d_k < 1 or self.K < 1 or self.M < 1:
            raise InvalidParameterError("n_layers >= 0, d_k, K, M >= 1 required")
        if len(self.k_schedule) != len(self.m_schedule) or not self.k_schedule:
            raise InvalidParameterError("K/M schedules must be non-empty and of equal length")

    def check_scene(self, N: int) -> None:
        widths = [self.K, self.M]
        if self.block == "mga":
            widths += self.k_schedule + self.m_schedule
        if self.n_layers and self.block in _BRANCHES and max(widths) > N:
            raise InvalidParameterError(f"graph width {max(widths)} exceeds N={N}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = self.grid.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        return cls(**obj)


def mlp_width(layout: Layout, d_k: int) -> int:
    """Hidden width giving a per-Gaussian MLP the parameter budget of one DGGA layer."""
    D = layout.width
    dgga = 2 * (3 * D * d_k + d_k * D + D)
    return max(1, int(round((dgga - D) / (2 * D + 1))))


def _layer_params(prefix: str, layout: Layout, cfg: PipelineConfig, rng) -> dict:
    lp = LayerParams.random(layout, cfg.d_k, rng, qk_std=cfg.qk_init_std)
    return {f"{prefix}.{k}": v for k, v in lp.arrays().items()}


def init_params(cfg: PipelineConfig, layout: Layout, seed: int | None = None) -> dict:
    """Fresh parameters for ``cfg``: small query/key projections, zero decode heads."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    D = layout.width
    params: dict = {}
    for l in range(cfg.n_layers if cfg.block != "none" else 0):
        pre = f"layer{l}"
        if cfg.block == "mlp":
            h = cfg.mlp_hidden or mlp_width(layout, cfg.d_k)
            W1 = rng.normal(0.0, 1.0 / np.sqrt(D), (D, h))
            W_dec = np.zeros((h, D))
            f0, F = layout.feature.start, layout.F
            r = min(F, h // 2)
            if r:
                # relu(x) - relu(-x) = x carries the feature block through.
                W1[:, :2 * r] = 0.0
                W1[f0:f0 + r, :r] = np.eye(r)
                W1[f0:f0 + r, r:2 * r] = -np.eye(r)
                W_dec[:r, f0:f0 + r] = np.eye(r)
                W_dec[r:2 * r, f0:f0 + r] = -np.eye(r)
            params.update({f"{pre}.mlp.W1": W1, f"{pre}.mlp.b1": np.zeros(h),
                           f"{pre}.mlp.W_dec": W_dec, f"{pre}.mlp.b_dec": np.zeros(D)})
        elif cfg.block == "mga":
            S = len(cfg.k_schedule)
            for s in range(S):
                params.update(_layer_params(f"{pre}.s{s}.geo", layout, cfg, rng))
                params.update(_layer_params(f"{pre}.s{s}.sem", layout, cfg, rng))
                if cfg.fuse == "concat":
                    params[f"{pre}.s{s}.fuse.P"] = concat_projection_init(2, D)
            if cfg.fuse == "concat" and S > 1:
                params[f"{pre}.fuse.P"] = concat_projection_init(S, D)
        else:
            for br in _BRANCHES[cfg.block]:
                params.update(_layer_params(f"{pre}.{br}", layout, cfg, rng))
            if cfg.fuse == "concat" and cfg.block == "dgga":
                params[f"{pre}.fuse.P"] = concat_projection_init(2, D)
    if cfg.dsdga in ("full", "dca"):
        params.update(_layer_params("dsdga.dca", layout, cfg, rng))
    if cfg.dsdga in ("full", "sca"):
        params.update(_layer_params("dsdga.sca", layout, cfg, rng))
    return params


def _lp_vars(pv: dict, prefix: str):
    if f"{prefix}.{LayerParams.NAMES[0]}" not in pv:
        return None
    return tuple(pv[f"{prefix}.{k}"] for k in LayerParams.NAMES)


def forward_taped(tape, tok, cfg: PipelineConfig, pv: dict, layout: Layout,
                  taxonomy: SemanticTaxonomy):
    """Refinement stack on tape variables; ``pv`` maps parameter names to Vars."""
    for l in range(cfg.n_layers if cfg.block != "none" else 0):
        pre = f"layer{l}"
        if cfg.block == "mlp":
            h = tape.apply(ad.RELU_LAYER, tok, pv[f"{pre}.mlp.W1"], pv[f"{pre}.mlp.b1"])
            tok = tape.apply(ad.REFINE, tok, h, pv[f"{pre}.mlp.W_dec"], pv[f"{pre}.mlp.b_dec"],
                             layout=layout)
        elif cfg.block == "mga":
            S = len(cfg.k_schedule)
            scale_params = [(_lp_vars(pv, f"{pre}.s{s}.geo"), _lp_vars(pv, f"{pre}.s{s}.sem"))
                            for s in range(S)]
            inner = [pv.get(f"{pre}.s{s}.fuse.P") for s in range(S)] if cfg.fuse == "concat" else None
            tok = mga_taped(tape, tok, layout, cfg.k_schedule, cfg.m_schedule, scale_params,
                            fuse=cfg.fuse, graph=cfg.graph, concat_P=pv.get(f"{pre}.fuse.P"),
                            inner_concat_P=inner)
        else:
            branches = _BRANCHES[cfg.block]
            pg = _lp_vars(pv, f"{pre}.geo") if "geo" in branches else None
            ps = _lp_vars(pv, f"{pre}.sem") if "sem" in branches else None
            tok = dgga_taped(tape, tok, layout, cfg.K, cfg.M, pg, ps, fuse=cfg.fuse,
                             branches=branches, graph=cfg.graph,
                             concat_P=pv.get(f"{pre}.fuse.P"))
    if cfg.dsdga != "off":
        tok, _ = dsdga_taped(tape, tok, layout, taxonomy, _lp_vars(pv, "dsdga.dca"),
                             _lp_vars(pv, "dsdga.sca"), mode=cfg.dsdga)
    return tok


def loss_taped(tape, tok, cfg: PipelineConfig, layout: Layout, gt: VoxelGrid,
               taxonomy: SemanticTaxonomy):
    acc = tape.apply(SPLAT, tok, spec=gt.spec, cfg=cfg.splat, layout=layout)
    loss = tape.apply(OCC_LOSS, acc, labels=gt.classes.ravel(), empty_class=taxonomy.empty_class,
                      background=cfg.loss_background, floor=cfg.loss_floor)
    return loss, acc


def loss_and_grads(init: GaussianSet, gt: VoxelGrid, cfg: PipelineConfig, params: dict,
                   taxonomy: SemanticTaxonomy):
    """Training loss and its gradient for every parameter (and the input tokens)."""
    tape = ad.GradientTape()
    pv = {name: tape.var(value, name) for name, value in params.items()}
    tok_in = tape.var(tokenize(init), "tokens")
    tok = forward_taped(tape, tok_in, cfg, pv, init.layout, taxonomy)
    loss, _ = loss_taped(tape, tok, cfg, init.layout, gt, taxonomy)
    grads = ad.backward(tape, loss, wrt={**pv, "tokens": tok_in})
    return float(loss.value), grads


def refine(init: GaussianSet, cfg: PipelineConfig, params: dict,
           taxonomy: SemanticTaxonomy | None = None) -> GaussianSet:
    taxonomy = taxonomy or SemanticTaxonomy.default()
    cfg.check_scene(init.N)
    tape = ad.GradientTape()
    pv = {name: tape.var(value, name) for name, value in params.items()}
    tok = forward_taped(tape, tape.var(tokenize(init)), cfg, pv, init.layout, taxonomy)
    return GaussianSet(tok.value, init.d, init.F)


def run_pipeline(init: GaussianSet, cfg: PipelineConfig, params: dict,
                 taxonomy: SemanticTaxonomy | None = None, grid: GridSpec | None = None):
    """Refine ``init`` and splat it; returns ``(G_final, pred_grid)``."""
    from .splat import splat_forward

    taxonomy = taxonomy or SemanticTaxonomy.default()
    G_final = refine(init, cfg, params, taxonomy)
    spec = grid or cfg.grid
    (acc,), _ = splat_forward(G_final.data, spec=spec, cfg=cfg.splat, layout=G_final.layout)
    return G_final, classify(acc, spec, cfg.splat, taxonomy.empty_class)
