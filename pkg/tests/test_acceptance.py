"""Acceptance suite: one PASS/FAIL line per criterion, printed as each check finishes.

The training criteria share session fixtures so each model is trained once.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from mrjigsaw import cli
from mrjigsaw.config import derive_seed, toy_config
from mrjigsaw.data import artifact_frames, load_store
from mrjigsaw.evaluation import auc
from mrjigsaw.explain import border_interior_ratio, gradcam, pretext_patch_maps, region_contrast
from mrjigsaw.models import (
    DownstreamModelConfig,
    PretextModelConfig,
    build_downstream_model,
    build_pretext_model,
    count_parameters,
    load_checkpoint,
    trace_stage_shapes,
)
from mrjigsaw.patchgen import make_eval_sample, tile_bounds
from mrjigsaw.permset import cached_pool, load_permutation_set
from mrjigsaw.pipeline import resolve_store, run_finetune, run_pretrain
from mrjigsaw.training import divide_frames, read_history, sample_frames

pytestmark = pytest.mark.slow

RESULTS: dict[int, tuple[bool, str]] = {}
TRANSFER_SEEDS = (0, 1, 2)


def _emit(config, text: str) -> None:
    capman = config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        sys.stdout.write(text + "\n")
        sys.stdout.flush()


@pytest.fixture
def verdict(pytestconfig):
    def record(n: int, title: str, ok: bool, detail: str) -> None:
        RESULTS[n] = (ok, title)
        _emit(pytestconfig, f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {title}: {detail}")

    return record


@pytest.fixture(scope="module", autouse=True)
def summary(pytestconfig):
    yield
    lines = ["", "acceptance summary"]
    for n in sorted(RESULTS):
        ok, title = RESULTS[n]
        lines.append(f"  {n:>2} {'PASS' if ok else 'FAIL'}  {title}")
    missing = sorted(set(range(1, 12)) - set(RESULTS))
    if missing:
        lines.append(f"  not run: {missing}")
    _emit(pytestconfig, "\n".join(lines))


def _full_geometry_cfg(root: Path, **overrides):
    """Toy widths and classes at the full 256 px frame geometry."""
    return toy_config(
        store=str(root / "store256"),
        geometry={"frame_size": 256, "patch_size": 64},
        pretext_model={"patch_size": 64},
        downstream_model={"frame_size": 256},
        synthetic={"frame_size": 256},
        **overrides,
    )


def _transfer_cfg(root: Path, seed: int):
    """96 px frames put the final discriminator map on the same 3x3 grid as the tiles."""
    return toy_config(
        seed=seed,
        store=str(root / f"store96_{seed}"),
        geometry={"frame_size": 96, "patch_size": 24},
        pretext_model={"patch_size": 24},
        downstream_model={"frame_size": 96},
        synthetic={"frame_size": 96, "n_per_class": 40, "seed": seed},
        downstream_train={"max_epochs": 10, "early_stop": {"patience": 10}},
    )


# ---------------------------------------------------------------------------
# shared training runs


@pytest.fixture(scope="session")
def toy_pretext(tmp_path_factory):
    root = tmp_path_factory.mktemp("c06")
    cfg = _full_geometry_cfg(root)
    run_dir = root / "pretrain"
    run_dir.mkdir()
    t0 = time.time()
    result = run_pretrain(cfg, run_dir)
    return {"cfg": cfg, "result": result, "elapsed": time.time() - t0, "run_dir": run_dir}


@pytest.fixture(scope="session")
def transfer_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("c07")
    runs = {}
    for seed in TRANSFER_SEEDS:
        cfg = _transfer_cfg(root, seed)
        base = root / f"seed{seed}"
        for sub in ("pretext", "ssl", "random"):
            (base / sub).mkdir(parents=True)
        store = resolve_store(cfg, base)
        pre = run_pretrain(cfg, base / "pretext", store=store)
        ssl, ssl_rep = run_finetune(cfg, base / "ssl", pre.checkpoint, store=store)
        rnd, rnd_rep = run_finetune(cfg, base / "random", "random", store=store)
        runs[seed] = {
            "cfg": cfg, "store": store, "pretext": pre, "ssl": ssl, "random": rnd,
            "ssl_auc": ssl_rep["auc"].point, "random_auc": rnd_rep["auc"].point,
            "base": base,
        }
    return runs


# ---------------------------------------------------------------------------
# criteria


def test_c01_permutation_pool(tmp_path, capsys, verdict):
    cached_pool.cache_clear()
    out = tmp_path / "perms.json"
    t0 = time.time()
    code = cli.main(["perms", "generate", "--classes", "500", "--seed", "0", "--out", str(out), "--runs-dir", str(tmp_path / "runs")])
    elapsed = time.time() - t0
    report = json.loads(capsys.readouterr().out)
    pset = load_permutation_set(out)
    ok = code == 0 and report["pool_size"] == 1887 and report["enumeration_order"] == "lexicographic" and elapsed < 300 and len(pset) == 500
    verdict(1, "permutation pool", ok,
            f"pool size {report['pool_size']} (target 1887), order {report['enumeration_order']}, {elapsed:.1f} s (limit 300 s)")
    assert ok


def test_c02_parameter_counts(tmp_path, capsys, verdict):
    rows = []
    for classes, reported, tol in ((500, 173.0e6, 0.01), (1000, 173.5e6, 0.01)):
        total = count_parameters(build_pretext_model(PretextModelConfig(class_count=classes), device="meta")).total
        rows.append((f"pretext C={classes}", total, reported, tol))
    total = count_parameters(build_downstream_model(DownstreamModelConfig(), device="meta")).total
    rows.append(("downstream proposed", total, 77e6, 0.03))
    code = cli.main(["models", "summary"])
    printed = capsys.readouterr().out
    cli_ok = code == 0 and f"{rows[0][1]:,}" in printed and f"{rows[2][1]:,}" in printed
    ok = cli_ok and all(abs(t - r) / r <= tol for _, t, r, tol in rows)
    detail = "; ".join(f"{name} {t / 1e6:.2f}M vs {r / 1e6:.1f}M ({100 * (t - r) / r:+.2f}%, tol {100 * tol:.0f}%)" for name, t, r, tol in rows)
    verdict(2, "parameter counts", ok, detail)
    assert ok


def test_c03_shape_ledger(verdict):
    pre = build_pretext_model(PretextModelConfig(), device="meta")
    s = trace_stage_shapes(pre, torch.empty(2, 9, 64, 64, device="meta"))
    checks = {
        "16x16x4608": s["concat_branches"] == (2, 4608, 16, 16),
        "16x16x2048": s["fusion"] == (2, 2048, 16, 16),
        "8x8x2048": s["concat_heads"] == (2, 2048, 8, 8),
    }
    for variant in ("proposed", "model1", "model2"):
        down = build_downstream_model(DownstreamModelConfig(variant=variant), device="meta")
        for per_group in (1, 2, 4):
            f = 9 * per_group
            ds = trace_stage_shapes(down, [torch.empty(per_group, 1, 256, 256, device="meta") for _ in range(9)])
            checks[f"{variant} |F|={f} 64x64x512"] = ds["concat_frames"] == (f, 512, 64, 64)
            checks[f"{variant} |F|={f} |F|x8x8x1024"] = ds["discriminator"] == (f, 1024, 8, 8)
    bad = [k for k, v in checks.items() if not v]
    verdict(3, "shape ledger", not bad, f"{len(checks) - len(bad)}/{len(checks)} shapes exact" + (f"; mismatched {bad}" if bad else ""))
    assert not bad


def test_c04_divide_frames(verdict):
    t0 = time.time()
    failures = []
    for n in range(1, 61):
        groups = divide_frames(list(range(n)))
        sizes = [len(g) for g in groups]
        flat = [x for g in groups for x in g]
        if len(groups) != 9 or min(sizes) < 1 or max(sizes) - min(sizes) > 1:
            failures.append(n)
        if n >= 9 and flat != list(range(n)):
            failures.append(n)
    hand = {36: [4] * 9, 20: [3, 3, 2, 2, 2, 2, 2, 2, 2]}
    hand_ok = all([len(g) for g in divide_frames(list(range(n)))] == v for n, v in hand.items())
    elapsed = time.time() - t0
    ok = not failures and hand_ok and elapsed < 1.0
    verdict(4, "divide_frames oracle", ok,
            f"|F| 1..60 {'all valid' if not failures else f'failed {failures}'}, hand-traced cases {'match' if hand_ok else 'differ'}, {elapsed * 1000:.1f} ms")
    assert ok


def _pairwise_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg)))


def test_c05_auc_oracle(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, max(2, n // 4), n) / 10.0  # coarse grid forces ties
        mismatches += auc(y, s) != _pairwise_auc(y, s)
    elapsed = time.time() - t0
    ok = mismatches == 0 and elapsed < 10
    verdict(5, "AUC oracle equivalence", ok, f"{100 - mismatches}/100 datasets exactly equal, {elapsed:.2f} s")
    assert ok


def test_c06_toy_pretext_learnability(toy_pretext, verdict):
    result, elapsed = toy_pretext["result"], toy_pretext["elapsed"]
    epochs = len(result.history)
    ok = result.best_metric >= 0.5 and epochs <= 30 and elapsed < 30 * 60
    verdict(6, "toy pretext learnability", ok,
            f"best val acc {result.best_metric:.3f} at epoch {result.best_epoch} (target >= 0.5, chance 0.1), "
            f"{epochs} epochs, {elapsed / 60:.1f} min, 256 px frames, widths / 8, C=10, 200 clips")
    assert ok


def test_c07_transfer_benefit(transfer_runs, verdict):
    pairs = [(s, r["ssl_auc"], r["random_auc"]) for s, r in transfer_runs.items()]
    wins = sum(a >= b for _, a, b in pairs)
    budgets = {(len(r["ssl"].history), len(r["random"].history)) for r in transfer_runs.values()}
    ok = wins >= 2 and budgets == {(10, 10)}
    detail = ", ".join(f"seed {s}: SSL {a:.3f} vs random {b:.3f}" for s, a, b in pairs)
    verdict(7, "transfer benefit", ok, f"{detail}; SSL >= random in {wins}/3 (need 2), epochs per arm {sorted(budgets)}")
    assert ok


def _clip_heat(model, clip, cap):
    idx = sample_frames(clip.n_frames, cap, np.random.default_rng(0))
    frames = clip.frames[idx]
    groups = divide_frames(list(frames))
    order = [int(i) for g in divide_frames(list(idx)) for i in g]
    heat = gradcam(model, [torch.from_numpy(np.stack(g)).unsqueeze(1) for g in groups], source_id=clip.clip_id)
    return heat.values, np.array(order)


def test_c08_explainability(transfer_runs, toy_pretext, verdict):
    run = transfer_runs[0]
    cfg = run["cfg"]
    model, _ = load_checkpoint(run["ssl"].checkpoint)
    spec = cfg.synthetic
    geometry = cfg.geometry.build()
    r0, r1, c0, c1 = tile_bounds(spec.artifact_tile, geometry)
    positives = [c for c in load_store(run["store"], "valid") if c.label == 1]
    hits = 0
    for clip in positives:
        maps, order = _clip_heat(model, clip, model.config.frame_cap)
        marked = np.isin(order, list(artifact_frames(spec, clip.n_frames)))
        inside, outside = region_contrast(maps[marked].mean(axis=0), (r0, r1, c0, c1))
        hits += inside > outside
    frac = hits / len(positives)

    # border check on the full-geometry pretext model with its 64 px patches
    pre_cfg = toy_pretext["cfg"]
    pre_model, pre_meta = load_checkpoint(toy_pretext["result"].checkpoint)
    pset = load_permutation_set(toy_pretext["run_dir"] / "permutations.json")
    pgeom = pre_cfg.geometry.build()
    ratios = []
    for i, clip in enumerate(load_store(pre_cfg.resolved_store(), "valid")[:20]):
        sample = make_eval_sample(clip.frames[clip.n_frames // 2], pset, i % len(pset), pgeom)
        maps = pretext_patch_maps(pre_model, torch.from_numpy(sample.patches).unsqueeze(0))
        if not maps.is_zero:
            ratios.append(border_interior_ratio(maps.values, strip=4))
    ratio = float(np.mean(ratios)) if ratios else math.inf

    ok = frac >= 0.7 and ratio < 2.0
    verdict(8, "explainability proxy", ok,
            f"heat inside artifact tile > outside on {hits}/{len(positives)} positive valid clips ({100 * frac:.0f}%, need 70%); "
            f"pretext border/interior heat {ratio:.2f} over {len(ratios)} samples (limit 2.0)")
    assert ok


def test_c09_oversampling_ablation(tmp_path, capsys, verdict):
    cfg = toy_config(
        store=str(tmp_path / "store"),
        geometry={"frame_size": 64, "patch_size": 16},
        pretext_model={"patch_size": 16},
        downstream_model={"frame_size": 64},
        pretext_train={"max_epochs": 3},
        downstream_train={"max_epochs": 2},
        eval={"n_bootstrap": 200},
        synthetic={"frame_size": 64, "n_per_class": 24, "n_positive": 8},
    )
    path = tmp_path / "cfg.json"
    path.write_text(cfg.model_dump_json())
    code = cli.main(["pretrain", "--config", str(path), "--oversample-pretext", "both", "--runs-dir", str(tmp_path / "runs")])
    out = json.loads(capsys.readouterr().out)
    run_dir = Path(out["run_dir"])
    rows = json.loads((run_dir / "table_iii.json").read_text())
    csv_lines = (run_dir / "table_iii.csv").read_text().strip().splitlines()
    flags = {
        arm: json.loads((run_dir / arm / "pretext" / "config.json").read_text())["pretext_train"]["oversample_pretext"]
        for arm in ("plain", "oversampled")
    }
    intervals_ok = all(r[m]["low"] <= r[m]["point"] <= r[m]["high"] for r in rows for m in ("accuracy", "auc"))
    ok = (
        code == 0 and len(rows) == 2 and len(csv_lines) == 3 and intervals_ok
        and flags == {"plain": False, "oversampled": True}
        and (run_dir / "table_iii.png").exists()
        and all((run_dir / a / "finetune" / "downstream.pt").exists() for a in ("plain", "oversampled"))
    )
    table = " | ".join(csv_lines[1:])
    verdict(9, "oversampling ablation harness", ok, f"both arms ran end to end on a 24/8 imbalanced store; {table}")
    assert ok


def test_c10_determinism(tmp_path, verdict):
    cfg = toy_config(
        store=str(tmp_path / "store"),
        geometry={"frame_size": 64, "patch_size": 16},
        pretext_model={"patch_size": 16},
        downstream_model={"frame_size": 64},
        pretext_train={"max_epochs": 4},
        synthetic={"frame_size": 64, "n_per_class": 20},
    )
    histories = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        run_dir.mkdir()
        run_pretrain(cfg, run_dir)
        histories.append(read_history(run_dir / "history.csv"))
    a, b = histories
    worst = max(abs(x[k] - y[k]) for x, y in zip(a, b) for k in x)
    ok = len(a) == len(b) and worst <= 1e-4
    verdict(10, "determinism", ok, f"{len(a)} epochs x {len(a[0])} columns, max abs difference {worst:.2e} (limit 1e-4)")
    assert ok


def _rel_err(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


def _fd_grad(fn, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            grad.view(-1)[i] = (fn(plus.view_as(x)) - fn(minus.view_as(x))) / (2 * h)
    return grad


def test_c11_gradient_check(verdict):
    pcfg = PretextModelConfig(patch_size=8, class_count=4, branch_filters=(2, 3), fusion_filters=4, head_filters=3, fc_dims=(5, 5))
    pre = build_pretext_model(pcfg, seed=derive_seed(0, "gradcheck")).double()
    x = torch.rand(1, 9, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
    pre(x)[0, 1].backward()
    err_pre = _rel_err(x.grad, _fd_grad(lambda v: pre(v)[0, 1], x.detach()))

    dcfg = DownstreamModelConfig(frame_size=32, branch_filters=(2, 3), narrow_filters=3, wide_filters=4, fc_width=5)
    down = build_downstream_model(dcfg, seed=derive_seed(0, "gradcheck")).double()
    g = torch.Generator().manual_seed(1)
    groups = [torch.rand(1, 1, 32, 32, dtype=torch.float64, generator=g) for _ in range(9)]
    k = 4
    probe = groups[k].clone().requires_grad_(True)
    down(groups[:k] + [probe] + groups[k + 1 :]).sum().backward()
    err_down = _rel_err(probe.grad, _fd_grad(lambda v: down(groups[:k] + [v] + groups[k + 1 :]).sum(), groups[k]))

    ok = err_pre <= 1e-3 and err_down <= 1e-3
    verdict(11, "gradient check", ok, f"relative error pretext {err_pre:.2e}, downstream {err_down:.2e} (limit 1e-3)")
    assert ok
