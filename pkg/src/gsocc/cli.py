"""Command-line interface: ``gsocc <command> [options]``.

Failures print one JSON object ``{"error": code, "message": ...}`` on
stderr and exit nonzero (2 for input/validation errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import io
from .exceptions import GsoccError, InvalidInputError
from .harness import TrainConfig, ablation_run, bench, eval_report, train
from .pipeline import PipelineConfig, init_params, refine
from .scene import SemanticTaxonomy
from .splat import splat
from .synth import SceneSpec, gen_scene


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise InvalidInputError(f"{path}: expected a JSON object")
    return obj


def _config(path, gt=None) -> PipelineConfig:
    obj = _read_json(path)
    if gt is not None and "grid" not in obj:
        obj["grid"] = gt.spec.to_dict()
    try:
        return PipelineConfig.from_dict(obj)
    except TypeError as exc:
        raise InvalidInputError(f"bad pipeline config: {exc}") from exc


def _emit(payload: dict, out=None, kind: str = "report") -> None:
    if out:
        io.save_json(out, kind, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_generate(args) -> None:
    spec_obj = _read_json(args.spec)
    if args.seed is not None:
        spec_obj["seed"] = args.seed
    try:
        spec = SceneSpec.from_dict(spec_obj)
    except TypeError as exc:
        raise InvalidInputError(f"bad scene spec: {exc}") from exc
    taxonomy = SemanticTaxonomy.default()
    init, gt = gen_scene(spec, taxonomy)
    io.save_scene(args.out, init, gt, taxonomy, meta={"spec": spec.to_dict()})
    print(json.dumps({"out": args.out, "N": init.N, "dims": list(gt.spec.dims)}))


def cmd_refine(args) -> None:
    init, gt, taxonomy = io.load_scene(args.scene)
    cfg = _config(args.config, gt)
    params = io.load_params(args.params) if args.params else init_params(cfg, init.layout)
    G = refine(init, cfg, params, taxonomy)
    io.save_gaussians(args.out, G, taxonomy)
    print(json.dumps({"out": args.out, "N": G.N}))


def cmd_splat(args) -> None:
    init, gt, taxonomy = io.load_scene(args.scene)
    G = io.load_gaussians(args.gaussians) if args.gaussians else init
    cfg = _config(args.config, gt)
    grid, report = splat(G, gt.spec, cfg.splat, taxonomy.empty_class, return_report=True)
    io.save_grid(args.out, grid)
    print(json.dumps({"out": args.out, "pairs": report.n_pairs, "skipped": report.skipped}))


def _load_grid_any(path):
    obj = _read_json(path)
    if obj.get("kind") == "scene":
        _, gt, taxonomy = io.load_scene(path)
        return gt, taxonomy
    return io.load_grid(path), None


def cmd_eval(args) -> None:
    pred, _ = _load_grid_any(args.pred)
    gt, taxonomy = _load_grid_any(args.gt)
    report = eval_report(pred, gt, taxonomy or SemanticTaxonomy.default())
    _emit(report.to_dict(), args.out)


def cmd_train(args) -> None:
    scenes = []
    taxonomy = None
    for path in args.scene:
        init, gt, taxonomy = io.load_scene(path)
        scenes.append((init, gt))
    cfg = _config(args.config, scenes[0][1])
    tc = TrainConfig(steps=args.steps, lr=args.lr)
    params, losses = train(scenes, cfg, None, tc, taxonomy)
    io.save_params(args.out, params, meta={"config": cfg.to_dict(), "steps": args.steps})
    print(json.dumps({"out": args.out, "steps": len(losses),
                      "first_loss": losses[0] if losses else None,
                      "final_loss": losses[-1] if losses else None}))


def cmd_ablate(args) -> None:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = args.variants.split(",") if args.variants else None
    table = ablation_run(args.suite, seeds, steps=args.steps, variants=variants,
                         n_train=args.train_scenes, n_eval=args.eval_scenes)
    if args.out:
        io.save_json(args.out, "ablation", table.to_dict())
    print(table.format())


def cmd_bench(args) -> None:
    cfg = _config(args.config)
    spec = SceneSpec(n_gaussians=args.n) if args.n else None
    _emit(bench(cfg, spec, args.repeats))


def cmd_export(args) -> None:
    grid, taxonomy = _load_grid_any(args.grid)
    taxonomy = taxonomy or SemanticTaxonomy.default()
    out = {}
    if args.csv:
        out["csv_rows"] = io.export_csv(args.csv, grid, taxonomy.empty_class if args.occupied_only else None)
    if args.pgm:
        out["pgm_slices"] = len(io.export_pgm(args.pgm, grid, taxonomy.d, axis=args.axis))
    if not out:
        raise InvalidInputError("nothing to export: pass --csv and/or --pgm")
    print(json.dumps(out))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsocc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a scene (initial Gaussians + GT grid)")
    p.add_argument("--spec", help="JSON SceneSpec fields (defaults otherwise)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("refine", help="run the refinement stack on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", help="JSON PipelineConfig fields")
    p.add_argument("--params", help="parameter file (fresh init if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("splat", help="splat Gaussians into the scene's grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--gaussians", help="refined Gaussians (scene init if omitted)")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_splat)

    p = sub.add_parser("eval", help="IoU / mIoU report of a predicted grid")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help="grid or scene file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train parameters on one or more scenes")
    p.add_argument("--scene", required=True, action="append")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=["dgga", "fusion", "topkm", "dsdga"])
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--variants", help="comma-separated subset of the suite's variants")
    p.add_argument("--train-scenes", type=int, default=8)
    p.add_argument("--eval-scenes", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="CPU wall time of forward and training step")
    p.add_argument("--config")
    p.add_argument("--n", type=int, help="Gaussians in the synthetic scene")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", help="export a grid as CSV and/or PGM slices")
    p.add_argument("--grid", required=True, help="grid or scene file")
    p.add_argument("--csv")
    p.add_argument("--pgm", help="output directory for slices")
    p.add_argument("--axis", type=int, default=2, choices=[0, 1, 2])
    p.add_argument("--occupied-only", action="store_true")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except GsoccError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
