"""Scikit-learn style wrapper around the refinement pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .fusion import GraphConfig
from .harness import DESK_LR, TrainConfig, eval_report, train
from .pipeline import PipelineConfig, init_params, refine, run_pipeline
from .scene import SemanticTaxonomy
from .splat import SplatConfig
from .validation import as_list, check_gaussian_set, check_scenes


class OccupancyRefiner(TransformerMixin, BaseEstimator):
    """Learn a Gaussian refinement stack from (Gaussian set, occupancy grid) pairs.

    ``fit`` trains the stack with AdamW on the voxel cross-entropy loss.
    ``transform`` returns refined Gaussian sets, ``predict`` splats them into
    occupancy grids on the training grid spec, and ``score`` is the mean
    mIoU against ground-truth grids.

    Parameters
    ----------
    block : {"dgga", "gga", "sga", "mga", "mlp", "none"}
        Refinement block repeated ``n_layers`` times.
    fuse : {"adaptive", "add", "concat"}
        How branch outputs are combined.
    dsdga : {"off", "full", "dca", "sca"}
        Dynamic/static decoupled attention after the stack.
    """

    def __init__(self, n_layers=4, block="dgga", fuse="adaptive", dsdga="off", K=16, M=16,
                 k_schedule=(16, 12, 8, 4), m_schedule=(16, 12, 8, 4), d_k=32,
                 graph_mode="knn", cutoff_sigmas=3.0, occupancy_threshold=0.1,
                 steps=200, lr=DESK_LR, weight_decay=1e-2, warmup_steps=10,
                 random_state=0, taxonomy=None):
        self.n_layers = n_layers
        self.block = block
        self.fuse = fuse
        self.dsdga = dsdga
        self.K = K
        self.M = M
        self.k_schedule = k_schedule
        self.m_schedule = m_schedule
        self.d_k = d_k
        self.graph_mode = graph_mode
        self.cutoff_sigmas = cutoff_sigmas
        self.occupancy_threshold = occupancy_threshold
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.random_state = random_state
        self.taxonomy = taxonomy

    def _taxonomy(self) -> SemanticTaxonomy:
        return self.taxonomy if self.taxonomy is not None else SemanticTaxonomy.default()

    def _config(self, grid_spec=None) -> PipelineConfig:
        extra = {"grid": grid_spec} if grid_spec is not None else {}
        return PipelineConfig(
            n_layers=self.n_layers, block=self.block, K=self.K, M=self.M,
            k_schedule=list(self.k_schedule), m_schedule=list(self.m_schedule),
            fuse=self.fuse, dsdga=self.dsdga, d_k=self.d_k,
            graph=GraphConfig(mode=self.graph_mode),
            splat=SplatConfig(self.cutoff_sigmas, self.occupancy_threshold),
            seed=int(self.random_state), **extra,
        )

    def fit(self, X, y):
        """Train on Gaussian sets ``X`` against ground-truth grids ``y``."""
        taxonomy = self._taxonomy()
        scenes = check_scenes(X, y, taxonomy.d)
        cfg = self._config(scenes[0][1].spec)
        params = init_params(cfg, scenes[0][0].layout, int(self.random_state))
        tc = TrainConfig(self.steps, self.lr, self.weight_decay, self.warmup_steps)
        self.params_, self.losses_ = train(scenes, cfg, params, tc, taxonomy)
        self.config_ = cfg
        self.n_features_ = scenes[0][0].F
        self.n_params_ = int(sum(p.size for p in self.params_.values()))
        return self

    def _inputs(self, X) -> tuple[list, bool]:
        check_is_fitted(self, "params_")
        Xs, single = as_list(X)
        d = self._taxonomy().d
        return [check_gaussian_set(G, d=d, F=self.n_features_) for G in Xs], single

    def transform(self, X):
        """Refined Gaussian set(s); a single set in gives a single set out."""
        Xs, single = self._inputs(X)
        out = [refine(G, self.config_, self.params_, self._taxonomy()) for G in Xs]
        return out[0] if single else out

    def predict(self, X, grid=None):
        """Occupancy grid(s) on ``grid`` (defaults to the training grid spec)."""
        Xs, single = self._inputs(X)
        spec = grid.spec if hasattr(grid, "spec") else grid
        out = [run_pipeline(G, self.config_, self.params_, self._taxonomy(), spec)[1] for G in Xs]
        return out[0] if single else out

    def score(self, X, y):
        """Mean mIoU of the predicted grids against ``y``."""
        ys, _ = as_list(y)
        preds, _ = as_list(self.predict(X, ys[0].spec))
        taxonomy = self._taxonomy()
        return float(np.nanmean([eval_report(p, g, taxonomy).miou for p, g in zip(preds, ys)]))
