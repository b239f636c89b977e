"""Command-line entry points: gen-data, train, detect, eval, sweep.

Every subcommand reads one INI config (plus a few overrides) and is
deterministic given (config, seed).  Exit codes: 0 all cases processed,
1 per-case failures occurred, 2 bad invocation or missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .classifier import save_report
from .config import PipelineConfig, load_config, save_config
from .diffusion import make_schedule
from .evalkit import (
    bins_from_edges,
    detection_metrics,
    evaluate_case,
    stratified_eval,
    sweep,
    write_report_csv,
    write_summary_csv,
    write_sweep_csv,
)
from .phantom import UNHEALTHY, generate_dataset, load_manifest, save_dataset
from .pipeline import (
    MissingArtifact,
    case_seed_for,
    detect_case,
    load_models,
    model_paths,
    train_classifier_stage,
    train_codec_stage,
    train_denoiser_stage,
    write_montage,
)
from .postprocess import connected_components
from .volgrid import read_mask, write_mask, write_volume
from .vqcodec import load_codec

_STAGES = ("codec", "denoiser", "classifier")


def _load(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _out_dir(args, default: str) -> Path:
    d = Path(args.out) if args.out else Path(default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _manifest(cfg: PipelineConfig) -> Path:
    path = Path(cfg.paths.data_dir) / "manifest.csv"
    if not path.exists():
        raise MissingArtifact(path)
    return path


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load(args)
    n = args.n_cases if args.n_cases is not None else cfg.n_cases
    if n < 0:
        print("error: n-cases must be >= 0", file=sys.stderr)
        return 2
    out = _out_dir(args, cfg.paths.data_dir)
    cases = generate_dataset(cfg.phantom, n, balanced=args.balanced) if n else []
    manifest = save_dataset(cases, out)
    unhealthy = sum(1 for c in cases if c.weak_label == UNHEALTHY)
    print(f"wrote {len(cases)} case(s) to {out} "
          f"({len(cases) - unhealthy} healthy / {unhealthy} unhealthy weak labels)")
    print(f"manifest: {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{float(v):.6f}"])


def cmd_train(args) -> int:
    cfg = _load(args)
    models = _out_dir(args, cfg.paths.models_dir)
    paths = model_paths(models)
    try:
        entries = load_manifest(_manifest(cfg))
        if args.stage == "codec":
            history = train_codec_stage(cfg, entries, paths.codec, resume=args.resume)
            _write_loss_csv(models / "codec_loss.csv",
                            [h["total"] for h in history])
            last = history[-1]["total"] if history else float("nan")
            print(f"codec: {len(history)} step(s), final loss {last:.6f}")
            print(f"checkpoint: {paths.codec}")
        elif args.stage == "denoiser":
            codec = _require_codec(cfg, paths)
            history = train_denoiser_stage(cfg, codec, entries, paths.denoiser,
                                           resume=args.resume)
            _write_loss_csv(models / "denoiser_loss.csv", history)
            last = history[-1] if history else float("nan")
            print(f"denoiser: {len(history)} step(s), final loss {last:.6f}")
            print(f"checkpoint: {paths.denoiser}")
        else:
            codec = _require_codec(cfg, paths)
            report = train_classifier_stage(cfg, codec, entries, paths.classifier,
                                            resume=args.resume)
            save_report(models / "classifier_report.csv", report)
            print(f"classifier: {len(report.epochs)} epoch(s), "
                  f"best val AUC {report.best_auc:.4f} at epoch {report.best_epoch}")
            print(f"checkpoint: {paths.classifier}")
    except MissingArtifact as err:
        print(f"error: {err} (run the prerequisite stage first)", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def _require_codec(cfg: PipelineConfig, paths):
    from .vqcodec import VQCodec

    if cfg.codec.identity:
        return VQCodec(cfg.codec)
    if not paths.codec.exists():
        raise MissingArtifact(paths.codec)
    return load_codec(paths.codec, cfg.codec)


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

def _detect_one(entry, index, cfg, models, schedule, out: Path) -> None:
    det = detect_case(entry.load_image(), entry.roi_centers_mm, cfg, models,
                      schedule, case_seed=case_seed_for(cfg.seed, index))
    write_volume(out / f"{entry.case_id}_anomaly.vol1", det.anomaly)
    write_volume(out / f"{entry.case_id}_recon.vol1", det.reconstruction)
    write_mask(out / f"{entry.case_id}_pred.vol1", det.prediction)
    write_montage(out / f"{entry.case_id}_montage.pgm", det.input,
                  det.reconstruction, det.anomaly, det.prediction)


_WORKER_STATE: dict = {}


def _worker_init(cfg, models_dir, out_dir):
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["models"] = load_models(cfg, models_dir)
    _WORKER_STATE["schedule"] = make_schedule(cfg.denoiser.timesteps)
    _WORKER_STATE["out"] = Path(out_dir)


def _worker_run(task):
    index, manifest_path = task
    entry = load_manifest(manifest_path)[index]
    try:
        _detect_one(entry, index, _WORKER_STATE["cfg"], _WORKER_STATE["models"],
                    _WORKER_STATE["schedule"], _WORKER_STATE["out"])
        return entry.case_id, None
    except Exception as err:  # per-case fault isolation
        return entry.case_id, f"{type(err).__name__}: {err}"


def cmd_detect(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg.paths.out_dir)
    try:
        manifest_path = _manifest(cfg)
        entries = load_manifest(manifest_path)
        models = load_models(cfg, cfg.paths.models_dir)
    except MissingArtifact as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    schedule = make_schedule(cfg.denoiser.timesteps)

    failures: list[tuple[str, str]] = []
    if args.workers > 1:
        tasks = [(i, manifest_path) for i in range(len(entries))]
        with ProcessPoolExecutor(max_workers=args.workers, initializer=_worker_init,
                                 initargs=(cfg, cfg.paths.models_dir, out)) as pool:
            for case_id, err in pool.map(_worker_run, tasks):
                if err is not None:
                    failures.append((case_id, err))
                    print(f"FAIL {case_id}: {err}", file=sys.stderr)
                else:
                    print(f"ok {case_id}")
    else:
        for i, entry in enumerate(entries):
            try:
                _detect_one(entry, i, cfg, models, schedule, out)
                print(f"ok {entry.case_id}")
            except Exception as err:
                failures.append((entry.case_id, f"{type(err).__name__}: {err}"))
                print(f"FAIL {entry.case_id}: {err}", file=sys.stderr)

    if failures:
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "error"])
            w.writerows(failures)
        print(f"{len(failures)} case(s) failed; see {out / 'failures.csv'}",
              file=sys.stderr)
        return 1
    print(f"processed {len(entries)} case(s) into {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_MASK_SUFFIXES = ("_pred", "_truth", "_mask")
_SKIP_SUFFIXES = ("_image", "_anomaly", "_recon")


def _collect_masks(dirpath: Path, prefer: str) -> dict[str, Path]:
    """Map case id -> mask path; `prefer` breaks id collisions."""
    found: dict[str, dict[str, Path]] = {}
    for path in sorted(Path(dirpath).glob("*.vol1")):
        stem = path.stem
        if any(stem.endswith(s) for s in _SKIP_SUFFIXES):
            continue
        kind = ""
        for s in _MASK_SUFFIXES:
            if stem.endswith(s):
                stem, kind = stem[: -len(s)], s
                break
        found.setdefault(stem, {})[kind] = path
    out = {}
    for case_id, kinds in found.items():
        out[case_id] = kinds.get(prefer) or next(iter(kinds.values()))
    return out


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg.paths.out_dir)
    pred_dir = Path(args.pred_dir) if args.pred_dir else Path(cfg.paths.out_dir)
    ref_dir = Path(args.ref_dir) if args.ref_dir else Path(cfg.paths.data_dir)
    for d in (pred_dir, ref_dir):
        if not d.is_dir():
            print(f"error: missing required artifact: {d}", file=sys.stderr)
            return 2
    preds = _collect_masks(pred_dir, "_pred")
    refs = _collect_masks(ref_dir, "_truth")
    if not refs:
        print(f"error: no reference masks found in {ref_dir}", file=sys.stderr)
        return 2

    stray = sorted(set(preds) - set(refs))
    if stray:
        print("error: predictions without references: " + ", ".join(stray),
              file=sys.stderr)
        return 2
    missing = sorted(set(refs) - set(preds))
    for case_id in missing:
        print(f"missing prediction for {case_id}: scored as empty", file=sys.stderr)

    conn = cfg.postprocess.component_connectivity
    results = []
    for case_id in sorted(refs):
        ref_mask = read_mask(refs[case_id])
        if case_id in preds:
            pred_mask = read_mask(preds[case_id])
            if pred_mask.dims != ref_mask.dims:
                print(f"error: {case_id}: prediction dims {pred_mask.dims} "
                      f"do not match reference dims {ref_mask.dims}", file=sys.stderr)
                return 2
        else:
            pred_mask = type(ref_mask)(np.zeros(ref_mask.dims, dtype=np.uint8),
                                       ref_mask.spacing, ref_mask.origin)
        results.append(evaluate_case(
            case_id,
            connected_components(pred_mask, conn),
            connected_components(ref_mask, conn),
            threshold=cfg.eval.iou_threshold,
            compute_dsc=not args.detection_only,
        ))

    bins = bins_from_edges(cfg.eval.size_bin_edges_cm)
    write_report_csv(out / "report.csv", results, bins)
    summary = {"all": detection_metrics(results)}
    summary.update(stratified_eval(results, bins))
    write_summary_csv(out / "summary.csv", summary)
    overall = summary["all"]
    dsc = "N/A" if overall.dsc_mean is None else f"{overall.dsc_mean:.4f}"
    print(f"evaluated {overall.n_cases} case(s): precision {overall.precision_mean:.4f}, "
          f"recall {overall.recall_mean:.4f}, f1 {overall.f1_mean:.4f}, dsc {dsc}")
    print(f"reports: {out / 'report.csv'}, {out / 'summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg.paths.out_dir)
    try:
        levels = [int(v) for v in args.levels.split(",") if v]
        scales = [float(v) for v in args.scales.split(",") if v]
    except ValueError:
        print("error: --levels and --scales must be comma-separated numbers",
              file=sys.stderr)
        return 2
    # any guided cell needs the classifier, even if the base config is unguided
    load_cfg = replace(cfg, sampler=replace(
        cfg.sampler, guidance_scale=max([cfg.sampler.guidance_scale, *scales])))
    try:
        entries = load_manifest(_manifest(cfg))
        models = load_models(load_cfg, cfg.paths.models_dir)
    except MissingArtifact as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if max(levels, default=0) > cfg.denoiser.timesteps:
        print("error: sweep level exceeds the schedule length", file=sys.stderr)
        return 2
    schedule = make_schedule(cfg.denoiser.timesteps)
    conn = cfg.postprocess.component_connectivity

    def run_case(task, mode, level, scale):
        index, entry = task
        run_cfg = replace(cfg, sampler=replace(
            cfg.sampler, mode=mode, noise_level=level, guidance_scale=scale))
        det = detect_case(entry.load_image(), entry.roi_centers_mm, run_cfg, models,
                          schedule, case_seed=case_seed_for(cfg.seed, index))
        return evaluate_case(entry.case_id, det.components,
                             connected_components(entry.load_truth(), conn),
                             threshold=cfg.eval.iou_threshold)

    try:
        (best_level, best_scale), rows = sweep(
            run_case, list(enumerate(entries)), cfg.sampler.mode, levels, scales)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    write_sweep_csv(out / "sweep.csv", rows)
    chosen = replace(cfg, sampler=replace(
        cfg.sampler, noise_level=best_level, guidance_scale=best_scale))
    save_config(out / "best_config.ini", chosen)
    print(f"best cell: L={best_level}, s={best_scale:g} (mode {cfg.sampler.mode})")
    print(f"wrote {out / 'sweep.csv'} and {out / 'best_config.ini'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxdiff",
        description="Weakly supervised 3D anomaly detection with latent diffusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override run seed")
        p.add_argument("--workers", type=int, default=1, help="parallel case workers")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    common(p)
    p.add_argument("--n-cases", type=int, default=None)
    p.add_argument("--balanced", action="store_true",
                   help="alternate healthy/unhealthy truth labels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one pipeline stage")
    common(p)
    p.add_argument("stage", choices=_STAGES)
    p.add_argument("--resume", action="store_true",
                   help="continue from the existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over a dataset")
    common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score predictions against references")
    common(p)
    p.add_argument("--pred-dir", default=None)
    p.add_argument("--ref-dir", default=None)
    p.add_argument("--detection-only", action="store_true",
                   help="skip DSC (report N/A)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-search noise level and guidance scale")
    common(p)
    p.add_argument("--levels", required=True, help="comma-separated L values")
    p.add_argument("--scales", required=True, help="comma-separated s values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
