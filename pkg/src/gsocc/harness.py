"""Training, evaluation reports, ablation suites and benchmarks at desk scale.

A run trains one variant on a pool of synthetic scenes and scores it on
held-out scenes. Runs are independent, so suites fan ``(variant, seed)``
pairs out over joblib workers; the worker count comes from ``GSOCC_WORKERS``
(unset means one per CPU) and never changes results.
"""

from __future__ import annotations

import os
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .exceptions import InvalidParameterError, NumericInputError
from .metrics import confusion, iou_miou, mean_iou
from .optim import OptimState, optimizer_step
from .pipeline import PipelineConfig, init_params, loss_and_grads, run_pipeline
from .scene import SemanticTaxonomy, VoxelGrid
from .synth import SceneSpec, gen_scene

WORKERS_ENV = "GSOCC_WORKERS"
DESK_LR = 5e-3
TRAIN_POOL = 8
EVAL_POOL = 4


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidParameterError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidParameterError(f"{WORKERS_ENV} must be >= 1")
    return n


# --- reports ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    iou: float
    miou: float
    per_class: dict
    dynamic_miou: float
    static_miou: float
    wall_time_s: float = 0.0
    peak_memory_bytes: int = 0
    failed_scenes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(**{"failed_scenes": 0, **obj})

    def metrics(self) -> dict:
        """The deterministic part of the report (timing and memory excluded)."""
        out = self.to_dict()
        out.pop("wall_time_s")
        out.pop("peak_memory_bytes")
        return out


def eval_report(pred: VoxelGrid, gt: VoxelGrid, taxonomy: SemanticTaxonomy,
                wall_time_s: float = 0.0, peak_memory_bytes: int = 0) -> EvalReport:
    counts = confusion(pred, gt, taxonomy)
    iou, miou, per_class = iou_miou(counts, taxonomy)
    names = [taxonomy.class_names[c] for c in taxonomy.nonempty_classes]
    return EvalReport(
        iou=iou,
        miou=miou,
        per_class={n: float(v) for n, v in zip(names, per_class)},
        dynamic_miou=mean_iou(counts, taxonomy.dynamic_classes),
        static_miou=mean_iou(counts, taxonomy.static_classes),
        wall_time_s=float(wall_time_s),
        peak_memory_bytes=int(peak_memory_bytes),
    )


def _mean_reports(reports: list) -> EvalReport:
    def avg(vals):
        vals = np.asarray(vals, dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    keys = reports[0].per_class.keys()
    return EvalReport(
        iou=avg([r.iou for r in reports]),
        miou=avg([r.miou for r in reports]),
        per_class={k: avg([r.per_class[k] for r in reports]) for k in keys},
        dynamic_miou=avg([r.dynamic_miou for r in reports]),
        static_miou=avg([r.static_miou for r in reports]),
        wall_time_s=float(sum(r.wall_time_s for r in reports)),
        peak_memory_bytes=max(r.peak_memory_bytes for r in reports),
        failed_scenes=sum(r.failed_scenes for r in reports),
    )


def evaluate(scenes: list, cfg: PipelineConfig, params: dict,
             taxonomy: SemanticTaxonomy | None = None, measure_memory: bool = False,
             failed_as_empty: bool = False) -> EvalReport:
    """Average report over ``(init, gt)`` scenes; wall time is summed.

    With ``failed_as_empty`` a scene whose forward pass turns non-finite is
    scored as an all-empty prediction and counted in ``failed_scenes``;
    otherwise the NumericInputError propagates.
    """
    taxonomy = taxonomy or SemanticTaxonomy.default()
    reports = []
    for init, gt in scenes:
        if measure_memory:
            tracemalloc.start()
        t0 = time.perf_counter()
        failed = 0
        try:
            _, pred = run_pipeline(init, cfg, params, taxonomy, grid=gt.spec)
        except NumericInputError:
            if measure_memory:
                tracemalloc.stop()
            if not failed_as_empty:
                raise
            pred = VoxelGrid(gt.spec, np.full(gt.spec.dims, taxonomy.empty_class, dtype=np.int64))
            failed = 1
        wall = time.perf_counter() - t0
        peak = 0
        if measure_memory and not failed:
            peak = tracemalloc.get_traced_memory()[1]
            tracemalloc.stop()
        report = eval_report(pred, gt, taxonomy, wall, peak)
        report.failed_scenes = failed
        reports.append(report)
    return _mean_reports(reports)


# --- training ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = DESK_LR
    weight_decay: float = 1e-2
    warmup_steps: int = 10


def train(scenes: list, cfg: PipelineConfig, params: dict | None = None,
          train_cfg: TrainConfig | None = None, taxonomy: SemanticTaxonomy | None = None):
    """AdamW on the occupancy loss, cycling through ``scenes`` in order.

    Returns ``(params, losses)``. A parameter-free config returns at once.
    Training stops early if the forward pass becomes non-finite or a gradient
    does; the returned parameters are the last ones with a finite forward pass
    and ``len(losses)`` is the number of completed steps.
    """
    taxonomy = taxonomy or SemanticTaxonomy.default()
    train_cfg = train_cfg or TrainConfig()
    if not scenes:
        raise InvalidParameterError("need at least one training scene")
    layout = scenes[0][0].layout
    params = dict(init_params(cfg, layout) if params is None else params)
    losses: list = []
    if not params:
        return params, losses
    for init, _ in scenes:
        cfg.check_scene(init.N)
    state = OptimState(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                       warmup_steps=train_cfg.warmup_steps)
    for step in range(train_cfg.steps):
        init, gt = scenes[step % len(scenes)]
        try:
            loss, grads = loss_and_grads(init, gt, cfg, params, taxonomy)
        except NumericInputError:
            break
        if not (np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())):
            break
        params = optimizer_step(state, params, grads)
        losses.append(loss)
    return params, losses


def scene_pool(seed: int, n: int, spec: SceneSpec | None = None, held_out: bool = False) -> list:
    """Scenes for run ``seed``; training and held-out pools never share a scene seed."""
    spec = spec or SceneSpec()
    base = 1_000_003 * (2 * seed + int(held_out))
    return [gen_scene(replace(spec, seed=base + j)) for j in range(n)]


@dataclass
class RunResult:
    variant: str
    seed: int
    report: EvalReport
    final_loss: float
    n_params: int
    steps_done: int = 0
    steps: int = 0

    @property
    def stopped_early(self) -> bool:
        return self.n_params > 0 and self.steps_done < self.steps

    def to_dict(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "report": self.report.to_dict(),
                "final_loss": self.final_loss, "n_params": self.n_params,
                "steps_done": self.steps_done, "steps": self.steps}

    @classmethod
    def from_dict(cls, obj: dict) -> "RunResult":
        return cls(obj["variant"], obj["seed"], EvalReport.from_dict(obj["report"]),
                   obj["final_loss"], obj["n_params"], obj.get("steps_done", 0), obj.get("steps", 0))


def run_variant(name: str, cfg: PipelineConfig, seed: int, train_cfg: TrainConfig,
                spec: SceneSpec | None = None, n_train: int = TRAIN_POOL,
                n_eval: int = EVAL_POOL) -> RunResult:
    cfg = replace(cfg, seed=seed)
    train_scenes = scene_pool(seed, n_train, spec)
    eval_scenes = scene_pool(seed, n_eval, spec, held_out=True)
    params = init_params(cfg, train_scenes[0][0].layout, seed)
    params, losses = train(train_scenes, cfg, params, train_cfg)
    report = evaluate(eval_scenes, cfg, params, measure_memory=True, failed_as_empty=True)
    n_params = int(sum(p.size for p in params.values()))
    return RunResult(name, seed, report, float(losses[-1]) if losses else float("nan"), n_params,
                     len(losses), train_cfg.steps)


# --- ablation suites --------------------------------------------------------------------


def suite_variants(suite: str, base: PipelineConfig | None = None) -> dict:
    """Named configs for one ablation suite, in table order."""
    base = base or PipelineConfig()
    if suite == "dgga":
        return {
            "baseline": replace(base, block="none", dsdga="off"),
            "mlp": replace(base, block="mlp", dsdga="off"),
            "gga": replace(base, block="gga", dsdga="off"),
            "sga": replace(base, block="sga", dsdga="off"),
            "dgga": replace(base, block="dgga", dsdga="off"),
        }
    if suite == "dsdga":
        return {
            "baseline": replace(base, block="none", dsdga="off"),
            "dca": replace(base, block="none", dsdga="dca"),
            "sca": replace(base, block="none", dsdga="sca"),
            "dsdga": replace(base, block="none", dsdga="full"),
        }
    if suite == "fusion":
        return {f: replace(base, block="mga", fuse=f, dsdga="off") for f in ("add", "concat", "adaptive")}
    if suite == "topkm":
        schedules = {"A": [8, 6, 4, 2], "B": [12, 8, 6, 4], "C": [16, 12, 8, 4], "D": [24, 16, 12, 8]}
        return {k: replace(base, block="mga", dsdga="off", k_schedule=s, m_schedule=s)
                for k, s in schedules.items()}
    raise InvalidParameterError(f"unknown suite {suite!r}; choose dgga, fusion, topkm or dsdga")


@dataclass
class AblationTable:
    suite: str
    seeds: list
    rows: dict = field(default_factory=dict)  # variant -> mean EvalReport
    runs: list = field(default_factory=list)  # RunResult per (variant, seed)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "seeds": list(self.seeds),
                "rows": {k: v.to_dict() for k, v in self.rows.items()},
                "runs": [r.to_dict() for r in self.runs]}

    @classmethod
    def from_dict(cls, obj: dict) -> "AblationTable":
        return cls(obj["suite"], obj["seeds"],
                   {k: EvalReport.from_dict(v) for k, v in obj["rows"].items()},
                   [RunResult.from_dict(r) for r in obj["runs"]])

    def format(self) -> str:
        head = f"{'variant':<10}{'mIoU':>8}{'IoU':>8}{'dyn':>8}{'stat':>8}{'params':>9}{'time_s':>9}"
        lines = [f"suite: {self.suite}  seeds: {','.join(map(str, self.seeds))}", head]
        n_params = {r.variant: r.n_params for r in self.runs}
        for name, r in self.rows.items():
            lines.append(f"{name:<10}{100 * r.miou:8.2f}{100 * r.iou:8.2f}{100 * r.dynamic_miou:8.2f}"
                         f"{100 * r.static_miou:8.2f}{n_params.get(name, 0):9d}{r.wall_time_s:9.3f}")
        for r in self.runs:
            if r.stopped_early:
                lines.append(f"note: {r.variant} seed {r.seed} diverged, stopped after "
                             f"{r.steps_done}/{r.steps} steps")
            if r.report.failed_scenes:
                lines.append(f"note: {r.variant} seed {r.seed} non-finite on "
                             f"{r.report.failed_scenes} held-out scene(s), scored as all-empty")
        return "\n".join(lines)


def ablation_run(suite: str, seeds, *, steps: int = 200, variants: list | None = None,
                 base: PipelineConfig | None = None, train_cfg: TrainConfig | None = None,
                 spec: SceneSpec | None = None, n_train: int = TRAIN_POOL,
                 n_eval: int = EVAL_POOL, workers: int | None = None) -> AblationTable:
    """Train and score every variant of ``suite`` on every seed."""
    configs = suite_variants(suite, base)
    if variants is not None:
        unknown = [v for v in variants if v not in configs]
        if unknown:
            raise InvalidParameterError(f"unknown variants for suite {suite!r}: {unknown}")
        configs = {v: configs[v] for v in variants}
    seeds = [int(s) for s in seeds]
    train_cfg = replace(train_cfg or TrainConfig(), steps=steps)
    jobs = [(name, cfg, s) for name, cfg in configs.items() for s in seeds]
    workers = workers or n_workers()
    if workers == 1:
        runs = [run_variant(n, c, s, train_cfg, spec, n_train, n_eval) for n, c, s in jobs]
    else:
        runs = Parallel(n_jobs=workers)(
            delayed(run_variant)(n, c, s, train_cfg, spec, n_train, n_eval) for n, c, s in jobs)
    table = AblationTable(suite, seeds, runs=list(runs))
    for name in configs:
        table.rows[name] = _mean_reports([r.report for r in runs if r.variant == name])
    return table


def bench(cfg: PipelineConfig | None = None, spec: SceneSpec | None = None, repeats: int = 3) -> dict:
    """CPU wall times of one forward and one training step (not GPU latency)."""
    cfg = cfg or PipelineConfig()
    init, gt = gen_scene(spec or SceneSpec())
    params = init_params(cfg, init.layout)
    taxonomy = SemanticTaxonomy.default()

    def best(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    fwd = best(lambda: run_pipeline(init, cfg, params, taxonomy, grid=gt.spec))
    step = best(lambda: loss_and_grads(init, gt, cfg, params, taxonomy))
    return {"N": init.N, "block": cfg.block, "dsdga": cfg.dsdga, "forward_s": fwd,
            "train_step_s": step, "note": "CPU wall time, single process"}
