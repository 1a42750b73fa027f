"""End-to-end commands shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import RunConfig, derive_seed
from .data import ClipRecord, generate_synthetic, load_store
from .evaluation import evaluate_predictions, write_report
from .explain import gradcam, overlay, pretext_patch_maps, save_heatmap
from .models import (
    DownstreamNet,
    JPOPNet,
    build_downstream_model,
    build_pretext_model,
    load_checkpoint,
    save_checkpoint,
    transfer_weights,
)
from .patchgen import Geometry, assemble_mosaic, make_eval_sample
from .permset import cached_pool, load_permutation_set, sample_class_set, save_permutation_set
from .training import divide_frames, predict_clips, sample_frames, train_downstream, train_pretext
from .plotting import plot_history

log = logging.getLogger(__name__)


def new_run_dir(root, command: str) -> Path:
    """A fresh timestamped directory; never reuses an existing one."""
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for i in range(1000):
        path = root / f"{stamp}-{command}" if i == 0 else root / f"{stamp}-{command}-{i}"
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"cannot allocate a run directory under {root}")


def write_resolved_config(cfg: RunConfig, run_dir: Path, **extra) -> Path:
    doc = cfg.model_dump(mode="json")
    if extra:
        doc["_command"] = extra
    path = run_dir / "config.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def resolve_store(cfg: RunConfig, run_dir: Path) -> Path:
    store = cfg.resolved_store()
    if store is not None and (store / "manifest.json").exists():
        return store
    if cfg.synthetic is None:
        raise FileNotFoundError(f"no clip store at {store} and no synthetic block to generate one")
    target = store or run_dir / "store"
    log.info("generating synthetic store at %s", target)
    generate_synthetic(cfg.synthetic, target)
    return target


def split_records(store: Path) -> tuple[list[ClipRecord], list[ClipRecord]]:
    return load_store(store, "train"), load_store(store, "valid")


def resolve_permutation_set(cfg: RunConfig, run_dir: Path):
    if cfg.permset.file:
        pset = load_permutation_set(cfg.permset.file)
        if len(pset) != cfg.permset.classes:
            raise ValueError(f"{cfg.permset.file} holds {len(pset)} classes, config asks for {cfg.permset.classes}")
    else:
        pool = cached_pool(cfg.permset.n_patches, cfg.permset.threshold)
        log.info("permutation pool size %d (enumeration order %s)", len(pool), pool.enumeration_order)
        pset = sample_class_set(pool, cfg.permset.classes, derive_seed(cfg.seed, "permset"))
    save_permutation_set(pset, run_dir / "permutations.json")
    return pset


def run_pretrain(cfg: RunConfig, run_dir: Path, oversample: bool | None = None, store: Path | None = None):
    if oversample is not None:
        cfg = cfg.model_copy(update={"pretext_train": cfg.pretext_train.model_copy(update={"oversample_pretext": oversample})})
    write_resolved_config(cfg, run_dir, command="pretrain")
    store = store or resolve_store(cfg, run_dir)
    train, valid = split_records(store)
    pset = resolve_permutation_set(cfg, run_dir)
    geometry = cfg.geometry.build()
    seed = derive_seed(cfg.seed, "pretext")
    model = build_pretext_model(cfg.resolved_pretext_model(), seed=seed)
    result = train_pretext(model, pset, train, valid, cfg.pretext_train, geometry=geometry, seed=seed, out_dir=run_dir)
    meta_path = result.checkpoint.with_suffix(".json")
    meta = json.loads(meta_path.read_text())
    meta.update({"permutations": "permutations.json", "store": str(store)})
    meta_path.write_text(json.dumps(meta, indent=2))
    plot_history(result.history, run_dir / "history.png", "pretext")
    return result


def run_finetune(cfg: RunConfig, run_dir: Path, init, store: Path | None = None):
    """Fine-tune from a pretext checkpoint (``init``) or from scratch (``"random"``)."""
    write_resolved_config(cfg, run_dir, command="finetune", init=str(init))
    store = store or resolve_store(cfg, run_dir)
    train, valid = split_records(store)
    seed = derive_seed(cfg.seed, "downstream")
    dcfg = cfg.resolved_downstream_model()
    model = build_downstream_model(dcfg, seed=seed)
    source = "random"
    if str(init) != "random":
        pretext, pmeta = load_checkpoint(init)
        if not isinstance(pretext, JPOPNet):
            raise ValueError(f"{init} is not a pretext checkpoint")
        report = transfer_weights(pretext, model)
        source = str(init)
        (run_dir / "transfer_report.json").write_text(json.dumps(
            {"source": source, "copied": report.copied, "initialized": report.initialized, "n_copied_conv": report.n_copied_conv},
            indent=2,
        ))
    save_checkpoint(model, run_dir / "transferred", seed=seed, epoch=-1, extra={"init": source})
    result = train_downstream(
        model, train, valid, cfg.downstream_train, seed=seed, out_dir=run_dir,
        extra_meta={"init": source, "geometry": cfg.geometry.model_dump(), "store": str(store)},
    )
    plot_history(result.history, run_dir / "history.png", f"downstream ({'SSL' if source != 'random' else 'random'} init)")
    scores = predict_clips(model, valid, dcfg.frame_cap, seed=derive_seed(cfg.seed, "eval"))
    labels = np.array([c.label for c in valid])
    reports = evaluate_predictions(labels, scores, n=cfg.eval.n_bootstrap, level=cfg.eval.level, seed=derive_seed(cfg.seed, "bootstrap"))
    write_report(reports, run_dir / "valid_report.json", {"init": source})
    return result, reports


def run_eval(checkpoint, store, split: str = "valid", out=None, n_bootstrap: int = 1000, level: float = 0.90, seed: int = 0):
    model, meta = load_checkpoint(checkpoint)
    if not isinstance(model, DownstreamNet):
        raise ValueError(f"{checkpoint} is not a downstream checkpoint")
    clips = load_store(store, split)
    scores = predict_clips(model, clips, model.config.frame_cap, seed=seed)
    labels = np.array([c.label for c in clips])
    reports = evaluate_predictions(labels, scores, n=n_bootstrap, level=level, seed=seed)
    if out is not None:
        out = Path(out)
        write_report(reports, out, {
            "checkpoint": str(checkpoint), "store": str(store), "split": split,
            "ci_note": "interval from resampling validation examples, not from training reruns",
            "predictions": [{"clip_id": c.clip_id, "label": int(c.label), "score": float(s)} for c, s in zip(clips, scores)],
        })
        plotting.plot_roc(labels, scores, out.with_suffix(".roc.png"), f"{split} ROC")
    return reports, labels, scores


def run_ablation(cfg: RunConfig, run_dir: Path) -> list[dict]:
    """Oversampled vs plain pretext training, each carried through fine-tuning and evaluation."""
    write_resolved_config(cfg, run_dir, command="pretrain", oversample_pretext="both")
    store = resolve_store(cfg, run_dir)
    rows = []
    for arm, flag in (("without oversampling", False), ("with oversampling", True)):
        sub = run_dir / ("oversampled" if flag else "plain")
        (sub / "pretext").mkdir(parents=True)
        (sub / "finetune").mkdir(parents=True)
        pre = run_pretrain(cfg, sub / "pretext", oversample=flag, store=store)
        _, reports = run_finetune(cfg, sub / "finetune", pre.checkpoint, store=store)
        rows.append({"arm": arm, "accuracy": reports["accuracy"].to_json(), "auc": reports["auc"].to_json()})
    write_comparison(rows, run_dir / "table_iii")
    return rows


def write_comparison(rows: list[dict], stem: Path) -> None:
    stem = Path(stem)
    stem.with_suffix(".json").write_text(json.dumps(rows, indent=2))
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "accuracy (5%-95% CI)", "AUC (5%-95% CI)"])
        for r in rows:
            a, u = r["accuracy"], r["auc"]
            w.writerow([
                r["arm"],
                f"{100 * a['point']:.2f} ({100 * a['low']:.2f}-{100 * a['high']:.2f})",
                f"{u['point']:.3f} ({u['low']:.3f}-{u['high']:.3f})",
            ])
    plotting.plot_comparison(rows, stem.with_suffix(".png"), "pretext oversampling ablation")


def explain_frame_indices(n_frames: int, cap: int, frame: int, seed: int = 0) -> np.ndarray:
    """Frame selection used for explanation; always contains ``frame``."""
    if not 0 <= frame < n_frames:
        raise ValueError(f"frame {frame} outside [0, {n_frames})")
    idx = sample_frames(n_frames, cap, np.random.default_rng(seed))
    if frame not in idx:
        idx[np.argmin(np.abs(idx - frame))] = frame
        idx = np.sort(idx)
    return idx


def run_explain(checkpoint, store, clip_id: str, frame: int, out, alpha: float = 0.4) -> dict:
    model, meta = load_checkpoint(checkpoint)
    clips = {c.clip_id: c for c in load_store(store)}
    if clip_id not in clips:
        raise KeyError(f"clip {clip_id} not in {store}")
    clip = clips[clip_id]
    out = Path(out)
    if isinstance(model, DownstreamNet):
        idx = explain_frame_indices(clip.n_frames, model.config.frame_cap, frame)
        frames = clip.frames[idx]
        groups = [torch.from_numpy(np.stack(g)).unsqueeze(1) for g in divide_frames(list(frames))]
        heat = gradcam(model, groups, source_id=clip_id)
        # divide_frames may repeat the last frame for short clips; positions follow the selection
        pos = int(np.searchsorted(idx, frame))
        values, image = heat.values[pos], clip.frames[frame]
        score = float(torch.sigmoid(model(groups)).item())
        info = {"kind": "downstream", "score": score}
    else:
        geometry = Geometry(**meta.get("geometry", {}))
        pset = load_permutation_set(Path(checkpoint).parent / meta.get("permutations", "permutations.json"))
        sample = make_eval_sample(clip.frames[frame], pset, 0, geometry)
        x = torch.from_numpy(sample.patches).unsqueeze(0)
        heat = pretext_patch_maps(model, x, target_output=0)
        values = assemble_mosaic(heat.values, gap=0)
        image = assemble_mosaic(sample.patches, gap=0)
        info = {"kind": "pretext", "target_class": 0}
    rgb = overlay(values, image, alpha)
    plotting.save_overlay(rgb, out)
    raw_path = out.with_name(out.stem + "_heat.png")
    save_heatmap(heat, values, raw_path, {"clip_id": clip_id, "frame": frame, **info})
    return {"overlay": str(out), "heatmap": str(raw_path), **info}
