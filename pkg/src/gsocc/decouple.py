"""Semantic dynamic/static decoupling and bidirectional cross attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import LayerParams, tokenize
from .exceptions import InvalidInputError, InvalidParameterError
from .graph import dense_index
from .scene import GaussianSet, Layout, SemanticTaxonomy

DSDGA_MODES = ("full", "dca", "sca")


@dataclass(frozen=True, eq=False)
class DecoupleMasks:
    m_dynamic: np.ndarray
    m_static: np.ndarray
    argmax_class: np.ndarray
    scores: np.ndarray

    @property
    def dynamic_rows(self) -> np.ndarray:
        return np.flatnonzero(self.m_dynamic)

    @property
    def static_rows(self) -> np.ndarray:
        return np.flatnonzero(self.m_static)


def semantic_scores(G) -> np.ndarray:
    """Softplus of the semantic logits, evaluated without overflow."""
    logits = G.semantics if isinstance(G, GaussianSet) else np.asarray(G, dtype=np.float64)
    return np.logaddexp(0.0, logits)


def split_masks(S, taxonomy: SemanticTaxonomy) -> DecoupleMasks:
    """Static iff the argmax class index is at or past the static boundary.

    Ties go to the lowest class id.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != taxonomy.d:
        raise InvalidInputError(f"score matrix must be (N, {taxonomy.d})")
    c = np.argmax(S, axis=1)
    m_static = c >= taxonomy.static_boundary
    return DecoupleMasks(~m_static, m_static, c, S)


@dataclass(frozen=True, eq=False)
class IndexedSubset:
    """Sub-set of Gaussians that remembers its rows in the parent set."""

    gaussians: GaussianSet
    rows: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


def decouple(G: GaussianSet, masks: DecoupleMasks) -> tuple[IndexedSubset, IndexedSubset]:
    if len(masks.m_dynamic) != G.N:
        raise InvalidInputError("mask length must equal N")
    dyn = masks.dynamic_rows
    sta = masks.static_rows
    return IndexedSubset(G.subset(dyn), dyn), IndexedSubset(G.subset(sta), sta)


def dsdga_taped(tape, tok, layout: Layout, taxonomy: SemanticTaxonomy, pv_dca, pv_sca,
                mode: str = "full"):
    """DCA (dynamic queries over static context), then SCA (static over refined dynamic).

    Returns ``(output_var, masks)``. A side with no Gaussians skips both
    cross attentions and the whole set passes through unchanged.
    """
    if mode not in DSDGA_MODES:
        raise InvalidParameterError(f"unknown dsdga mode {mode!r}")
    if (mode in ("full", "dca") and pv_dca is None) or (mode in ("full", "sca") and pv_sca is None):
        raise InvalidParameterError(f"dsdga mode {mode!r} is missing its parameters")
    values = tok.value
    masks = split_masks(semantic_scores(values[:, layout.semantics]), taxonomy)
    dyn, sta = masks.dynamic_rows, masks.static_rows
    if len(dyn) == 0 or len(sta) == 0:
        return tok, masks
    t_dyn = tape.apply(ad.TAKE_ROWS, tok, rows=dyn)
    t_sta = tape.apply(ad.TAKE_ROWS, tok, rows=sta)
    if mode in ("full", "dca"):
        h, _ = tape.apply(ad.ATTENTION, t_dyn, t_sta, *pv_dca[:3],
                          idx=dense_index(len(dyn), len(sta)).idx, mask=None)
        t_dyn = tape.apply(ad.REFINE, t_dyn, h, *pv_dca[3:], layout=layout)
    if mode in ("full", "sca"):
        h, _ = tape.apply(ad.ATTENTION, t_sta, t_dyn, *pv_sca[:3],
                          idx=dense_index(len(sta), len(dyn)).idx, mask=None)
        t_sta = tape.apply(ad.REFINE, t_sta, h, *pv_sca[3:], layout=layout)
    out = tape.apply(ad.MERGE_ROWS, t_dyn, t_sta, rows_a=dyn, rows_b=sta, n=values.shape[0])
    return out, masks


def dsdga(G: GaussianSet, taxonomy: SemanticTaxonomy, params_dca: LayerParams,
          params_sca: LayerParams, mode: str = "full", return_masks: bool = False):
    """Decouple, cross-refine both groups, and scatter them back in place."""
    if taxonomy.d != G.d:
        raise InvalidInputError("taxonomy class count does not match the Gaussian set")
    tape = ad.GradientTape()
    tok = tape.var(tokenize(G))
    pv_dca = tuple(tape.var(a) for a in params_dca.arrays().values())
    pv_sca = tuple(tape.var(a) for a in params_sca.arrays().values())
    out, masks = dsdga_taped(tape, tok, G.layout, taxonomy, pv_dca, pv_sca, mode)
    result = GaussianSet(out.value, G.d, G.F)
    return (result, masks) if return_masks else result
