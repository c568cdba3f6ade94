"""Command-line pipeline: gen-scenes, propose, train, refine, eval, gradcheck.

All subcommands are deterministic under a fixed config and seed; reruns
produce byte-identical artifacts. Per-scene work runs in parallel by
default (--jobs 1 gives a serial reference run), with results merged in
manifest order. Exit codes: 0 success, 2 validation error, 3 runtime error.
The default output directory can be set with the BOXLIFT_OUT environment
variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .artifacts import (
    RunConfig,
    apply_overrides,
    make_header,
    read_json,
    read_manifest,
    read_proposals_file,
    resolved_config_dict,
    run_config_from_dict,
    write_json,
    write_manifest,
    write_proposals_file,
    write_refined_file,
)
from .denoiser import (
    DenoiserModel,
    ddim_refine,
    full_loss_gradcheck,
    fuse_scores,
    rasterize_bev,
    train,
)
from .errors import BoxliftError, ConfigError, SchemaError, ValidationError
from .evaluate import Prediction, evaluate_corpus
from .imcv import run_imcv
from .scene import (
    BASE_CATEGORY_NAMES,
    NOVEL_CATEGORY_NAMES,
    generate_scene,
    load_scene,
    oracle_seek,
    save_detections,
    save_scene,
)

_SCENE_FILE_FMT = "scene_{:04d}.json"
_PROPOSALS_FILE_FMT = "proposals_{:04d}.json"
_REFINED_FILE_FMT = "refined_{:04d}.json"
_DETECTIONS_FILE_FMT = "detections_{:04d}.json"


def _load_run_config(args) -> RunConfig:
    doc = read_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{args.config}: config must be a JSON object")
    apply_overrides(doc, args.set or [])
    cfg = run_config_from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    elif cfg.out_dir is None:
        cfg.out_dir = os.environ.get("BOXLIFT_OUT")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out_dir:
        raise ValidationError("no output directory: pass --out or set BOXLIFT_OUT")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jobs(args) -> int:
    if args.jobs is not None:
        if args.jobs < 1:
            raise ValidationError("--jobs must be >= 1")
        return args.jobs
    return min(os.cpu_count() or 1, 8)


def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _run_parallel(worker, tasks: list, jobs: int) -> list:
    if jobs == 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


# ---------------------------------------------------------------------------
# gen-scenes


def _gen_scene_task(task) -> dict:
    cfg, seed, path, header = task
    scene = generate_scene(cfg, seed)
    save_scene(scene, path, header=header)
    return {"file": Path(path).name, "seed": seed, "points": int(scene.points.shape[0])}


def cmd_gen_scenes(args) -> int:
    cfg = _load_run_config(args)
    cfg.scene.validate()
    out = _out_dir(cfg)
    resolved = {
        "command": "gen-scenes",
        "count": args.count,
        "scene": asdict(cfg.scene),
        "seed": cfg.seed,
    }
    header = make_header(resolved, cfg.seed)
    tasks = []
    for i in range(args.count):
        seed_i = _scene_seed(cfg.seed, i)
        tasks.append((cfg.scene, seed_i, str(out / _SCENE_FILE_FMT.format(i)), header))
    rows = _run_parallel(_gen_scene_task, tasks, _jobs(args))
    write_manifest(
        out / "manifest.json",
        "scene-manifest",
        header,
        {"scene_config": asdict(cfg.scene), "scenes": rows},
    )
    print(f"wrote {len(rows)} scenes to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# propose


def _propose_task(task) -> dict:
    scene_path, scene_file, out_path, det_path, seeker, imcv_cfg, header = task
    try:
        scene = load_scene(scene_path)
    except SchemaError as e:
        raise SchemaError(f"{scene_path}: {e}") from e
    detections = oracle_seek(scene, seeker)
    proposals, diagnostics = run_imcv(scene, detections, imcv_cfg)
    write_proposals_file(out_path, scene_file, proposals, diagnostics, header)
    if det_path is not None:
        width = scene.cameras[0].image_width if scene.cameras else 0
        height = scene.cameras[0].image_height if scene.cameras else 0
        save_detections(detections, width, height, det_path, header=header)
    return {
        "file": Path(out_path).name,
        "n_proposals": len(proposals),
        "n_detections": len(detections),
    }


def cmd_propose(args) -> int:
    cfg = _load_run_config(args)
    cfg.seeker.validate()
    cfg.imcv.validate()
    out = _out_dir(cfg)
    manifest = read_manifest(args.scenes, "scene-manifest")
    scenes_dir = Path(args.scenes).parent
    resolved = {
        "command": "propose",
        "seeker": asdict(cfg.seeker),
        "imcv": asdict(cfg.imcv),
        "seed": cfg.seed,
    }
    header = make_header(resolved, cfg.seed)
    tasks = []
    for i, row in enumerate(manifest["scenes"]):
        det_path = str(out / _DETECTIONS_FILE_FMT.format(i)) if args.save_detections else None
        tasks.append(
            (
                str(scenes_dir / row["file"]),
                row["file"],
                str(out / _PROPOSALS_FILE_FMT.format(i)),
                det_path,
                cfg.seeker,
                cfg.imcv,
                header,
            )
        )
    rows = _run_parallel(_propose_task, tasks, _jobs(args))
    write_manifest(
        out / "manifest.json",
        "proposals-manifest",
        header,
        {"scene_manifest": str(args.scenes), "files": rows},
    )
    total = sum(r["n_proposals"] for r in rows)
    print(f"wrote {total} proposals over {len(rows)} scenes to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    cfg.model.validate()
    cfg.train.validate()
    out = _out_dir(cfg)
    manifest = read_manifest(args.scenes, "scene-manifest")
    scenes_dir = Path(args.scenes).parent
    scenes = [load_scene(scenes_dir / row["file"]) for row in manifest["scenes"]]

    resolved = {
        "command": "train",
        "model": asdict(cfg.model),
        "train": asdict(cfg.train),
        "seed": cfg.seed,
    }
    header = make_header(resolved, cfg.seed)

    start_step = 0
    history: list[float] = []
    if args.resume:
        model, progress = DenoiserModel.load(args.resume)
        if progress is None:
            raise ValidationError(f"{args.resume}: checkpoint has no training progress to resume")
        if progress.get("train_config") != asdict(cfg.train) or asdict(model.config) != asdict(
            cfg.model
        ):
            raise ValidationError(
                f"{args.resume}: checkpoint was trained with a different configuration"
            )
        start_step = int(progress["completed_steps"])
        history = list(progress["loss_history"])
    else:
        model = DenoiserModel.create(cfg.model, seed=cfg.seed)

    result = train(
        model,
        scenes,
        cfg.train,
        start_step=start_step,
        loss_history=history,
        max_steps=args.max_steps,
    )
    progress = {
        "completed_steps": result.completed_steps,
        "loss_history": result.loss_history,
        "train_config": asdict(cfg.train),
    }
    model.save(out / "checkpoint.json", train_progress=progress, header=header)
    with open(out / "loss.csv", "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(result.loss_history):
            f.write(f"{i},{loss!r}\n")
    print(
        f"trained {result.completed_steps} steps; checkpoint at {out / 'checkpoint.json'}",
        file=sys.stderr,
    )
    return 0


# ---------------------------------------------------------------------------
# refine


def cmd_refine(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    model, _ = DenoiserModel.load(args.checkpoint)
    prop_manifest = read_manifest(args.proposals, "proposals-manifest")
    prop_dir = Path(args.proposals).parent
    scene_manifest_path = Path(prop_manifest["scene_manifest"])
    if not scene_manifest_path.is_absolute():
        scene_manifest_path = Path.cwd() / scene_manifest_path
    scene_manifest = read_manifest(scene_manifest_path, "scene-manifest")
    scenes_dir = scene_manifest_path.parent
    scene_files = {row["file"] for row in scene_manifest["scenes"]}

    s_steps = cfg.refine.s_steps if cfg.refine.s_steps is not None else model.config.s_steps
    eta = cfg.refine.eta if cfg.refine.eta is not None else model.config.eta
    t_start = cfg.refine.t_start if cfg.refine.t_start is not None else model.config.t_start
    resolved = {
        "command": "refine",
        "refine": {
            "s_steps": s_steps,
            "eta": eta,
            "t_start": t_start,
            "w_iou": cfg.refine.w_iou,
            "w_seeker": cfg.refine.w_seeker,
        },
        "checkpoint": str(args.checkpoint),
        "seed": cfg.seed,
    }
    header = make_header(resolved, cfg.seed)

    rows = []
    for i, row in enumerate(prop_manifest["files"]):
        path = prop_dir / row["file"]
        scene_file, proposals, _diag, _ = read_proposals_file(path)
        if scene_file not in scene_files:
            raise SchemaError(
                f"{path}: scene file {scene_file!r} not present in {scene_manifest_path}"
            )
        scene = load_scene(scenes_dir / scene_file)
        bev = rasterize_bev(scene, model.config.bev_extent, model.config.bev_cell)
        rng = np.random.default_rng([cfg.seed, 3, i])
        refinements = []
        for prop in proposals:
            box, conf, oob = ddim_refine(
                model, bev, prop, s_steps=s_steps, eta=eta, t_start=t_start, rng=rng
            )
            refinements.append(
                {
                    "refined_box": box,
                    "iou_conf": conf,
                    "fused_score": fuse_scores(
                        conf, prop.seeker_score, cfg.refine.w_iou, cfg.refine.w_seeker
                    ),
                    "out_of_extent": oob,
                }
            )
        out_path = out / _REFINED_FILE_FMT.format(i)
        write_refined_file(out_path, scene_file, proposals, refinements, header)
        rows.append({"file": out_path.name, "n_proposals": len(proposals)})
    write_manifest(
        out / "manifest.json",
        "refined-manifest",
        header,
        {
            "scene_manifest": prop_manifest["scene_manifest"],
            "refine": resolved["refine"],
            "files": rows,
        },
    )
    print(f"refined {sum(r['n_proposals'] for r in rows)} proposals to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# eval


def _category_sets() -> dict[str, Optional[tuple[str, ...]]]:
    return {
        "overall": None,
        "base": BASE_CATEGORY_NAMES,
        "novel": NOVEL_CATEGORY_NAMES,
    }


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    results_manifest = read_json(args.results)
    kind = results_manifest.get("kind")
    if kind not in ("proposals-manifest", "refined-manifest"):
        raise SchemaError(f"{args.results}: expected a proposals or refined manifest")
    results_dir = Path(args.results).parent
    scene_manifest = read_manifest(args.scenes, "scene-manifest")
    scenes_dir = Path(args.scenes).parent
    scene_rows = scene_manifest["scenes"]

    files = results_manifest["files"]
    if len(files) != len(scene_rows):
        raise SchemaError(
            f"scene/proposal manifests disagree: {len(scene_rows)} scenes vs "
            f"{len(files)} result files"
        )

    scene_preds = []
    scene_gts = []
    for row, scene_row in zip(files, scene_rows):
        scene_file, proposals, _diag, refinements = read_proposals_file(results_dir / row["file"])
        if scene_file != scene_row["file"]:
            raise SchemaError(
                f"scene/proposal manifests disagree: result {row['file']} covers "
                f"{scene_file!r}, manifest lists {scene_row['file']!r}"
            )
        scene = load_scene(scenes_dir / scene_file)
        preds = []
        for prop, ref in zip(proposals, refinements):
            if ref is not None:
                preds.append(Prediction(ref["refined_box"], prop.category.name, ref["fused_score"]))
            else:
                preds.append(Prediction(prop.box, prop.category.name, prop.seeker_score))
        scene_preds.append(preds)
        scene_gts.append(scene.gt_boxes)

    criterion = cfg.eval.to_criterion()
    reports = {}
    for name, cats in _category_sets().items():
        reports[name] = evaluate_corpus(scene_preds, scene_gts, criterion, cats)

    doc = {
        "version": 1,
        "kind": "metrics-report",
        "header": make_header(
            {"command": "eval", "eval": asdict(cfg.eval), "seed": cfg.seed}, cfg.seed
        ),
        "criterion": asdict(cfg.eval),
        "reports": {name: rep.to_dict() for name, rep in reports.items()},
    }
    write_json(out / "report.json", doc)
    for name, rep in reports.items():
        print(f"== {name}")
        print(rep.format_table())
    if args.pr_csv:
        pr_dir = Path(args.pr_csv)
        pr_dir.mkdir(parents=True, exist_ok=True)
        for cat, curve in reports["overall"].pr_curves.items():
            with open(pr_dir / f"pr_{cat}.csv", "w", encoding="utf-8") as f:
                f.write("recall,precision\n")
                for r, p in curve:
                    f.write(f"{r!r},{p!r}\n")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    report = full_loss_gradcheck(seed=args.seed if args.seed is not None else 0, n_states=args.states)
    print(
        f"gradient check: max rel error {report.max_rel_error:.3e} "
        f"(worst {report.worst_param}[{report.worst_index}])"
    )
    if not report.ok(args.tol):
        print(f"FAIL: exceeds tolerance {args.tol}", file=sys.stderr)
        return 3
    print(f"PASS at tolerance {args.tol}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sp, out_required: bool = True) -> None:
    sp.add_argument("--config", help="JSON run-config file")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    if out_required:
        sp.add_argument("--out", help="output directory (default: $BOXLIFT_OUT)")
        sp.add_argument("--jobs", type=int, default=None, help="parallel workers (1 = serial)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxlift",
        description="Synthetic-scene 3D pseudo-label pipeline",
    )
    parser.add_argument("--version", action="version", version=f"boxlift {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-scenes", help="generate synthetic scene files")
    _add_common(sp)
    sp.add_argument("--count", type=int, default=1, help="number of scenes")
    sp.set_defaults(func=cmd_gen_scenes)

    sp = sub.add_parser("propose", help="run the seeker and proposal generator")
    _add_common(sp)
    sp.add_argument("--scenes", required=True, help="scene manifest path")
    sp.add_argument("--save-detections", action="store_true", help="also write detections files")
    sp.set_defaults(func=cmd_propose)

    sp = sub.add_parser("train", help="train the box denoiser on base-class scenes")
    _add_common(sp)
    sp.add_argument("--scenes", required=True, help="scene manifest path")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--max-steps", type=int, default=None, help="stop after this many total steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("refine", help="refine proposals with a trained checkpoint")
    _add_common(sp)
    sp.add_argument("--proposals", required=True, help="proposals manifest path")
    sp.add_argument("--checkpoint", required=True, help="denoiser checkpoint path")
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("eval", help="score proposals or refined proposals against gt")
    _add_common(sp)
    sp.add_argument("--results", required=True, help="proposals or refined manifest path")
    sp.add_argument("--scenes", required=True, help="scene manifest path")
    sp.add_argument("--pr-csv", help="directory for per-category PR curve CSVs")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the denoiser loss")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--states", type=int, default=3, help="number of random states")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, SchemaError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BoxliftError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
