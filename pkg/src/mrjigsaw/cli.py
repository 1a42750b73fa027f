"""``mrjigsaw`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import ENV_RUNS, ConfigError, RunConfig, load_config, parse_block
from .data import IngestError, SyntheticSpec, generate_synthetic, ingest_mrnet
from .models import build_downstream_model, build_pretext_model, count_parameters
from .patchgen import Geometry, assemble_mosaic, make_eval_sample, make_jumbled_sample
from .permset import cached_pool, generate_candidate_pool, load_permutation_set, sample_class_set, save_permutation_set

log = logging.getLogger("mrjigsaw")

REPORTED_PARAMS = {"pretext C=500": 173.0e6, "pretext C=1000": 173.5e6, "proposed": 77e6, "model2": 75e6, "model1": 72e6}


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        doc = {
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(record.created)),
            "level": record.levelname,
            "logger": record.name,
            "event": record.getMessage(),
        }
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc)


def setup_logging(run_dir: Path | None, verbose: bool = False) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_mrjigsaw", False):
            root.removeHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    err._mrjigsaw = True
    root.addHandler(err)
    if run_dir is not None:
        fh = logging.FileHandler(run_dir / "log.jsonl")
        fh.setFormatter(JsonLineFormatter())
        fh._mrjigsaw = True
        root.addHandler(fh)


def _run_dir(args, command: str) -> Path:
    from .pipeline import new_run_dir

    root = args.runs_dir or os.environ.get(ENV_RUNS) or "runs"
    run_dir = new_run_dir(root, command)
    setup_logging(run_dir, args.verbose)
    log.info("run directory %s", run_dir)
    return run_dir


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "runs_dir", None):
        cfg = cfg.model_copy(update={"runs_dir": args.runs_dir})
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_perms_generate(args) -> int:
    run_dir = _run_dir(args, "perms")
    t0 = time.time()
    if args.allow_large:
        pool = generate_candidate_pool(args.n_patches, args.threshold, allow_large=True)
    else:
        pool = cached_pool(args.n_patches, args.threshold)
    log.info(
        "pool size %d enumeration_order=%s n_patches=%d threshold>%d (%.1f s)",
        len(pool), pool.enumeration_order, pool.n_patches, pool.min_distance_exclusive, time.time() - t0,
    )
    pset = sample_class_set(pool, args.classes, args.seed)
    out = Path(args.out) if args.out else run_dir / "permutations.json"
    save_permutation_set(pset, out)
    (run_dir / "config.json").write_text(json.dumps(vars_json(args), indent=2))
    (run_dir / "pool.json").write_text(json.dumps({
        "pool_size": len(pool), "enumeration_order": pool.enumeration_order,
        "n_patches": pool.n_patches, "threshold_exclusive": pool.min_distance_exclusive,
        "pool_digest": pool.digest(),
    }, indent=2))
    print(json.dumps({"pool_size": len(pool), "enumeration_order": pool.enumeration_order, "out": str(out)}))
    return 0


def cmd_patchgen_preview(args) -> int:
    from PIL import Image

    from . import plotting

    run_dir = _run_dir(args, "preview")
    frame = np.asarray(Image.open(args.frame).convert("L"), dtype=np.float32) / 255.0
    geometry = Geometry(frame_size=frame.shape[0], patch_size=args.patch_size or frame.shape[0] // 4)
    if args.perms:
        pset = load_permutation_set(args.perms)
    else:
        pset = sample_class_set(cached_pool(), args.classes, args.seed)
    rng = np.random.default_rng(args.seed)
    ordered = make_eval_sample(frame, pset, 0, geometry)
    jumbled = make_jumbled_sample(frame, pset, rng, geometry)
    fig = np.hstack([assemble_mosaic(ordered.patches), np.ones((assemble_mosaic(ordered.patches).shape[0], 8), np.float32), assemble_mosaic(jumbled.patches)])
    out = Path(args.out)
    plotting.plot_mosaic(fig, out, f"ordered | class {jumbled.label}")
    (run_dir / "config.json").write_text(json.dumps(vars_json(args), indent=2))
    log.info("preview written to %s (label %d)", out, jumbled.label)
    return 0


def cmd_ingest(args) -> int:
    run_dir = _run_dir(args, "ingest")
    (run_dir / "config.json").write_text(json.dumps(vars_json(args), indent=2))
    try:
        manifest = ingest_mrnet(args.src, args.out, plane=args.plane, frame_size=args.frame_size)
    except IngestError as exc:
        (run_dir / "ingest_report.txt").write_text("\n".join(exc.problems) + "\n")
        log.error("ingestion failed with %d problem(s); see %s", len(exc.problems), run_dir / "ingest_report.txt")
        for p in exc.problems:
            print(p, file=sys.stderr)
        return 1
    log.info("ingested %s: %s", args.out, manifest.counts)
    if not manifest.notes.get("matches_reference_counts"):
        log.warning("counts %s differ from the MRNet reference %s", manifest.counts, manifest.notes["reference_counts"])
    return 0


def cmd_synth(args) -> int:
    spec = parse_block(SyntheticSpec, json.loads(Path(args.spec).read_text())) if args.spec else SyntheticSpec()
    run_dir = _run_dir(args, "synth")
    (run_dir / "config.json").write_text(json.dumps(spec.model_dump(), indent=2))
    manifest, _ = generate_synthetic(spec, args.out)
    log.info("synthetic store %s: %s digest=%s", args.out, manifest.counts, manifest.digest)
    return 0


def cmd_pretrain(args) -> int:
    from .pipeline import run_ablation, run_pretrain

    cfg = _config(args)
    run_dir = _run_dir(args, "pretrain")
    if args.oversample_pretext == "both":
        rows = run_ablation(cfg, run_dir)
        for r in rows:
            log.info("%s: accuracy %.4f auc %.4f", r["arm"], r["accuracy"]["point"], r["auc"]["point"])
        print(json.dumps({"run_dir": str(run_dir), "table": str(run_dir / "table_iii.csv")}))
        return 0
    flag = None if args.oversample_pretext is None else args.oversample_pretext == "on"
    result = run_pretrain(cfg, run_dir, oversample=flag)
    print(json.dumps({"run_dir": str(run_dir), "checkpoint": str(result.checkpoint), "best_val_acc": result.best_metric}))
    return 0


def cmd_finetune(args) -> int:
    from .pipeline import run_finetune

    cfg = _config(args)
    run_dir = _run_dir(args, "finetune")
    result, reports = run_finetune(cfg, run_dir, args.init)
    print(json.dumps({
        "run_dir": str(run_dir), "checkpoint": str(result.checkpoint),
        "accuracy": reports["accuracy"].to_json(), "auc": reports["auc"].to_json(),
    }))
    return 0


def cmd_eval(args) -> int:
    from .pipeline import run_eval

    run_dir = _run_dir(args, "eval")
    (run_dir / "config.json").write_text(json.dumps(vars_json(args), indent=2))
    out = Path(args.out) if args.out else run_dir / "report.json"
    reports, _, _ = run_eval(args.checkpoint, args.store, args.split, out, args.n_bootstrap, args.level, args.seed)
    for name, r in reports.items():
        log.info("%s %s", name, r.formatted())
    print(out.read_text())
    return 0


def cmd_explain(args) -> int:
    from .pipeline import run_explain

    store = args.store or os.environ.get("MRJIGSAW_STORE")
    if not store:
        raise ConfigError(["--store: required (or set MRJIGSAW_STORE)"])
    run_dir = _run_dir(args, "explain")
    (run_dir / "config.json").write_text(json.dumps(vars_json(args), indent=2))
    info = run_explain(args.checkpoint, store, args.clip, args.frame, args.out, args.alpha)
    print(json.dumps(info))
    return 0


def cmd_summary(args) -> int:
    setup_logging(None, args.verbose)
    cfg = _config(args)
    p = build_pretext_model(cfg.resolved_pretext_model(), device="meta")
    d = build_downstream_model(cfg.resolved_downstream_model(), device="meta")
    ps = count_parameters(p, torch.empty(1, 9, cfg.geometry.patch_size, cfg.geometry.patch_size, device="meta"))
    groups = [torch.empty(1, 1, cfg.geometry.frame_size, cfg.geometry.frame_size, device="meta") for _ in range(9)]
    ds = count_parameters(d, groups)
    if args.layers:
        print(ps.table())
        print()
        print(ds.table())
        print()
    print(f"pretext (C={p.config.class_count}): {ps.total:,} parameters")
    print(f"downstream ({d.config.variant}): {ds.total:,} parameters")
    if cfg.width_divisor == 1:
        ref = REPORTED_PARAMS.get(f"pretext C={p.config.class_count}")
        if ref:
            print(f"  pretext vs reported {ref / 1e6:.1f}M: {100 * (ps.total - ref) / ref:+.2f}%")
        ref = REPORTED_PARAMS[d.config.variant]
        print(f"  downstream vs reported {ref / 1e6:.0f}M: {100 * (ds.total - ref) / ref:+.2f}%")
    return 0


def vars_json(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func" and isinstance(v, (str, int, float, bool, type(None)))}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--runs-dir", help="root for run directories (env MRJIGSAW_RUNS, default ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mrjigsaw", description="Jigsaw self-supervision for knee MR clips.")
    sub = parser.add_subparsers(dest="command", required=True)

    perms = sub.add_parser("perms", help="permutation sets").add_subparsers(dest="action", required=True)
    p = perms.add_parser("generate", parents=[common])
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--n-patches", type=int, default=9)
    p.add_argument("--threshold", type=int, default=4)
    p.add_argument("--allow-large", action="store_true")
    p.set_defaults(func=cmd_perms_generate)

    pg = sub.add_parser("patchgen", help="jumbled patch tools").add_subparsers(dest="action", required=True)
    p = pg.add_parser("preview", parents=[common])
    p.add_argument("--frame", required=True, help="grayscale square frame image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--perms")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--patch-size", type=int)
    p.set_defaults(func=cmd_patchgen_preview)

    p = sub.add_parser("ingest", parents=[common], help="convert an MRNet directory into a clip store")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plane", default="sagittal", choices=("sagittal", "coronal", "axial"))
    p.add_argument("--frame-size", type=int, default=256)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic clip store")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="train the jigsaw pretext network")
    p.add_argument("--config")
    p.add_argument("--oversample-pretext", choices=("on", "off", "both"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="train the ACL classifier")
    p.add_argument("--config")
    p.add_argument("--init", required=True, help="pretext checkpoint or 'random'")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="accuracy/AUC with bootstrap intervals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--split", default="valid", choices=("train", "valid"))
    p.add_argument("--out")
    p.add_argument("--n-bootstrap", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.90)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common], help="Grad-CAM overlay for one frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--store")
    p.add_argument("--alpha", type=float, default=0.4)
    p.set_defaults(func=cmd_explain)

    for name, target in (("summary", sub), ("models", sub.add_parser("models").add_subparsers(dest="action", required=True))):
        p = target.add_parser("summary", parents=[common], help="parameter counts")
        p.add_argument("--config")
        p.add_argument("--layers", action="store_true", help="print the per-layer table")
        p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags before anything is written
    torch.set_num_threads(int(os.environ.get("MRJIGSAW_THREADS", torch.get_num_threads())))
    try:
        return args.func(args)
    except ConfigError as exc:
        for m in exc.messages:
            print(f"config error: {m}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
