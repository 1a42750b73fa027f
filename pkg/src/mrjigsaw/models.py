"""JPOPNet pretext network, the downstream clip classifier, and weight transfer.

Both networks share the same nine-branch feature extractor. Each branch is
two conv blocks (two 3x3 same-padded convs, ReLU, 2x2 max-pool), so a
branch quarters the spatial side of its input.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

Variant = Literal["proposed", "model1", "model2"]


class ShapeError(ValueError):
    """An architecture stage cannot produce the shape the next stage needs."""


class TransferError(ValueError):
    pass


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PretextModelConfig(_Config):
    n_branches: int = 9
    in_channels: int = 1
    patch_size: int = 64
    branch_filters: tuple[int, int] = (256, 512)
    fusion_filters: int = 2048
    head_filters: int = 1024
    fc_dims: tuple[int, ...] = (1024, 1024)
    class_count: int = Field(500, ge=1)

    def scaled(self, divisor: int) -> "PretextModelConfig":
        """Copy with every width divided by ``divisor``."""
        d = lambda v: max(1, v // divisor)  # noqa: E731
        return self.model_copy(
            update=dict(
                branch_filters=tuple(d(v) for v in self.branch_filters),
                fusion_filters=d(self.fusion_filters),
                head_filters=d(self.head_filters),
                fc_dims=tuple(d(v) for v in self.fc_dims),
            )
        )


class DownstreamModelConfig(_Config):
    variant: Variant = "proposed"
    n_branches: int = 9
    in_channels: int = 1
    frame_size: int = 256
    frame_cap: int = 36
    branch_filters: tuple[int, int] = (256, 512)
    narrow_filters: int = 512
    wide_filters: int = 1024
    fc_width: int = 1024

    def scaled(self, divisor: int) -> "DownstreamModelConfig":
        d = lambda v: max(1, v // divisor)  # noqa: E731
        return self.model_copy(
            update=dict(
                branch_filters=tuple(d(v) for v in self.branch_filters),
                narrow_filters=d(self.narrow_filters),
                wide_filters=d(self.wide_filters),
                fc_width=d(self.fc_width),
            )
        )

    def matching_pretext(self, class_count: int = 500) -> PretextModelConfig:
        return PretextModelConfig(
            n_branches=self.n_branches,
            in_channels=self.in_channels,
            branch_filters=self.branch_filters,
            class_count=class_count,
        )


@dataclass(frozen=True)
class Stage:
    kind: Literal["maxpool", "block"]
    filters: tuple[int, int] = ()


@dataclass(frozen=True)
class DiscriminatorSchedule:
    stages: tuple[Stage, ...]
    fc_dims: tuple[int, ...]


def variant_schedule(variant: str, narrow: int = 512, wide: int = 1024, fc: int = 1024) -> DiscriminatorSchedule:
    """Discriminator layout of each ablation variant.

    Every block is two 3x3 convs with the second at stride 2; the maxpool
    stage is 2x2/2. All variants reduce 64x64 to 8x8.
    """
    if variant == "proposed":
        stages = (Stage("block", (narrow, narrow)), Stage("block", (wide, wide)), Stage("block", (wide, wide)))
        return DiscriminatorSchedule(stages, (fc, fc))
    if variant == "model2":
        stages = (Stage("maxpool"), Stage("block", (wide, wide)), Stage("block", (wide, wide)))
        return DiscriminatorSchedule(stages, (fc, fc))
    if variant == "model1":
        stages = (Stage("maxpool"), Stage("block", (narrow, narrow)), Stage("block", (wide, wide)))
        return DiscriminatorSchedule(stages, (fc,))
    raise ValueError(f"unknown variant {variant!r}; expected proposed, model1 or model2")


# ---------------------------------------------------------------------------
# shape plans (pure arithmetic; checked at build time)


def _halve(side: int, stage: str) -> int:
    if side < 2 or side % 2:
        raise ShapeError(f"stage {stage}: spatial side {side} cannot be halved exactly")
    return side // 2


def pretext_shape_plan(cfg: PretextModelConfig) -> dict[str, tuple[int, ...]]:
    """Channels-last shapes of every named stage for one sample."""
    b1, b2 = cfg.branch_filters
    s = cfg.patch_size
    plan = {"input": (cfg.n_branches, s, s, cfg.in_channels)}
    s = _halve(s, "branch.block1")
    plan["branch.block1"] = (s, s, b1)
    s = _halve(s, "branch.block2")
    plan["branch.block2"] = (s, s, b2)
    plan["concat_branches"] = (s, s, cfg.n_branches * b2)
    plan["fusion"] = (s, s, cfg.fusion_filters)
    h = _halve(s, "head_a")
    plan["head_a"] = (h, h, cfg.head_filters)
    plan["head_b"] = (h, h, cfg.head_filters)
    plan["concat_heads"] = (h, h, 2 * cfg.head_filters)
    plan["pool"] = (2 * cfg.head_filters,)
    for i, d in enumerate(cfg.fc_dims):
        plan[f"fc{i + 1}"] = (d,)
    plan["logits"] = (cfg.class_count,)
    return plan


def downstream_shape_plan(cfg: DownstreamModelConfig, n_frames: int | str = "F") -> dict[str, tuple]:
    b1, b2 = cfg.branch_filters
    s = cfg.frame_size
    plan: dict[str, tuple] = {"input": (n_frames, s, s, cfg.in_channels)}
    s = _halve(s, "branch.block1")
    s = _halve(s, "branch.block2")
    plan["concat_frames"] = (n_frames, s, s, b2)
    sched = variant_schedule(cfg.variant, cfg.narrow_filters, cfg.wide_filters, cfg.fc_width)
    ch = b2
    for i, st in enumerate(sched.stages):
        s = _halve(s, f"disc.{i}")
        ch = st.filters[-1] if st.kind == "block" else ch
        plan[f"disc.{i}"] = (n_frames, s, s, ch)
    plan["frame_pool"] = (n_frames, ch)
    plan["clip_pool"] = (ch,)
    for i, d in enumerate(sched.fc_dims):
        plan[f"fc{i + 1}"] = (d,)
    plan["logit"] = (1,)
    return plan


# ---------------------------------------------------------------------------
# modules


def conv_block(in_ch: int, filters: tuple[int, int], downsample: str) -> nn.Sequential:
    f1, f2 = filters
    if downsample == "maxpool":
        return nn.Sequential(
            nn.Conv2d(in_ch, f1, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(f1, f2, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2, 2),
        )
    if downsample == "stride":
        return nn.Sequential(
            nn.Conv2d(in_ch, f1, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(f1, f2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
    raise ValueError(f"unknown downsample {downsample!r}")


class Branch(nn.Sequential):
    def __init__(self, in_ch: int, filters: tuple[int, int]):
        b1, b2 = filters
        super().__init__(conv_block(in_ch, (b1, b1), "maxpool"), conv_block(b1, (b2, b2), "maxpool"))


def _mlp(in_dim: int, dims: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for d in dims:
        layers += [nn.Linear(in_dim, d), nn.ReLU(inplace=True)]
        in_dim = d
    return nn.Sequential(*layers)


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """He fan-in normal weights, zero biases, reproducible from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if m.weight.is_meta:
                continue
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(m.bias)
    return model


class JPOPNet(nn.Module):
    """Nine-branch jumbled-patch order classifier. Input (B, 9, P, P) -> logits (B, C)."""

    def __init__(self, cfg: PretextModelConfig):
        super().__init__()
        self.config = cfg
        b2 = cfg.branch_filters[1]
        self.branches = nn.ModuleList(Branch(cfg.in_channels, cfg.branch_filters) for _ in range(cfg.n_branches))
        self.concat_branches = nn.Identity()
        self.fusion = nn.Sequential(nn.Conv2d(cfg.n_branches * b2, cfg.fusion_filters, 3, padding=1), nn.ReLU(inplace=True))
        h = cfg.head_filters
        self.head_a = conv_block(cfg.fusion_filters, (h, h), "stride")
        self.head_b = nn.Sequential(nn.Conv2d(cfg.fusion_filters, h, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2, 2))
        self.concat_heads = nn.Identity()
        self.fc = _mlp(2 * h, cfg.fc_dims)
        self.out = nn.Linear(cfg.fc_dims[-1] if cfg.fc_dims else 2 * h, cfg.class_count)

    def branch_features(self, x: torch.Tensor) -> torch.Tensor:
        cin = self.config.in_channels
        if x.dim() == 4 and cin == 1:
            x = x.unsqueeze(2)
        feats = [branch(x[:, k]) for k, branch in enumerate(self.branches)]
        return self.concat_branches(torch.cat(feats, dim=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.fusion(self.branch_features(x))
        z = self.concat_heads(torch.cat([self.head_a(z), self.head_b(z)], dim=1))
        z = z.mean(dim=(2, 3))
        return self.out(self.fc(z))

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(x), dim=1)


class DownstreamNet(nn.Module):
    """Clip classifier. ``forward`` takes the nine frame groups, each (n_k, H, W)
    or (n_k, 1, H, W), and returns one logit of shape (1,)."""

    def __init__(self, cfg: DownstreamModelConfig):
        super().__init__()
        self.config = cfg
        self.branches = nn.ModuleList(Branch(cfg.in_channels, cfg.branch_filters) for _ in range(cfg.n_branches))
        self.concat_frames = nn.Identity()
        sched = variant_schedule(cfg.variant, cfg.narrow_filters, cfg.wide_filters, cfg.fc_width)
        stages: list[nn.Module] = []
        ch = cfg.branch_filters[1]
        for st in sched.stages:
            if st.kind == "maxpool":
                stages.append(nn.MaxPool2d(2, 2))
            else:
                stages.append(conv_block(ch, st.filters, "stride"))
                ch = st.filters[-1]
        self.discriminator = nn.Sequential(*stages)
        self.fc = _mlp(ch, sched.fc_dims)
        self.out = nn.Linear(sched.fc_dims[-1], 1)

    def frame_features(self, groups: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(groups) != len(self.branches):
            raise ValueError(f"expected {len(self.branches)} frame groups, got {len(groups)}")
        feats = []
        for branch, g in zip(self.branches, groups):
            if g.dim() == 3:
                g = g.unsqueeze(1)
            feats.append(branch(g))
        return self.concat_frames(torch.cat(feats, dim=0))

    def forward(self, groups: Sequence[torch.Tensor]) -> torch.Tensor:
        z = self.discriminator(self.frame_features(groups))
        z = z.mean(dim=(2, 3))  # per-frame global average pool
        z = z.max(dim=0).values  # max over frames
        return self.out(self.fc(z))

    def predict_proba(self, groups: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.sigmoid(self(groups))


def build_pretext_model(cfg: PretextModelConfig | None = None, seed: int = 0, device: str | torch.device = "cpu") -> JPOPNet:
    cfg = cfg or PretextModelConfig()
    pretext_shape_plan(cfg)
    with torch.device(device):
        model = JPOPNet(cfg)
    return init_weights(model, seed)


def build_downstream_model(
    cfg: DownstreamModelConfig | None = None,
    pretext_weights: JPOPNet | None = None,
    seed: int = 0,
    device: str | torch.device = "cpu",
) -> DownstreamNet:
    cfg = cfg or DownstreamModelConfig()
    downstream_shape_plan(cfg)
    with torch.device(device):
        model = DownstreamNet(cfg)
    init_weights(model, seed)
    if pretext_weights is not None:
        transfer_weights(pretext_weights, model)
    return model


@dataclass
class TransferReport:
    copied: list[str] = field(default_factory=list)
    initialized: list[str] = field(default_factory=list)

    @property
    def n_copied_conv(self) -> int:
        return len(self.copied)


def _conv_names(module: nn.Module, prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n, m in module.named_modules() if isinstance(m, nn.Conv2d)]


def transfer_weights(pretext: JPOPNet, downstream: DownstreamNet) -> TransferReport:
    """Copy every branch conv from the pretext net into the downstream net."""
    src = pretext.branches.state_dict()
    dst = downstream.branches.state_dict()
    mismatched = [
        f"branches.{k}: {tuple(src[k].shape) if k in src else None} -> {tuple(v.shape)}"
        for k, v in dst.items()
        if k not in src or src[k].shape != v.shape
    ]
    if mismatched:
        raise TransferError("incompatible branch layers:\n  " + "\n  ".join(mismatched))
    downstream.branches.load_state_dict(src)
    report = TransferReport()
    for name, m in downstream.named_modules():
        if isinstance(m, nn.Conv2d) and name.startswith("branches."):
            report.copied.append(name)
        elif isinstance(m, (nn.Conv2d, nn.Linear)):
            report.initialized.append(name)
    return report


# ---------------------------------------------------------------------------
# introspection


@dataclass(frozen=True)
class LayerSummary:
    name: str
    kind: str
    out_shape: tuple
    n_params: int


@dataclass(frozen=True)
class ModelSummary:
    layers: tuple[LayerSummary, ...]
    total: int

    def table(self) -> str:
        rows = [f"{'layer':<34}{'type':<12}{'output':<26}{'params':>14}"]
        for l in self.layers:
            rows.append(f"{l.name:<34}{l.kind:<12}{str(l.out_shape):<26}{l.n_params:>14,}")
        rows.append(f"{'total':<72}{self.total:>14,}")
        return "\n".join(rows)


def count_parameters(model: nn.Module, example_input=None) -> ModelSummary:
    """Exact per-layer parameter counts (weights + biases).

    With ``example_input`` a forward pass records each layer's output shape;
    on a meta-device model this costs nothing.
    """
    shapes: dict[str, tuple] = {}
    hooks = []
    if example_input is not None:
        for name, m in model.named_modules():
            if isinstance(m, (nn.Conv2d, nn.Linear, nn.MaxPool2d)):
                hooks.append(m.register_forward_hook(
                    lambda mod, inp, out, name=name: shapes.__setitem__(name, tuple(out.shape))
                ))
        try:
            with torch.no_grad():
                model(example_input)
        finally:
            for h in hooks:
                h.remove()
    layers = []
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            n = sum(p.numel() for p in m.parameters(recurse=False))
            layers.append(LayerSummary(name, type(m).__name__, shapes.get(name, ()), n))
    total = sum(p.numel() for p in model.parameters())
    assert total == sum(l.n_params for l in layers)
    return ModelSummary(tuple(layers), total)


def trace_stage_shapes(model: nn.Module, example_input) -> dict[str, tuple]:
    """Output shapes of the named stages reached by one forward pass."""
    names = {
        JPOPNet: ("branches.0.0", "branches.0.1", "concat_branches", "fusion", "head_a", "head_b", "concat_heads", "fc", "out"),
        DownstreamNet: ("concat_frames", "discriminator", "fc", "out"),
    }[type(model)]
    shapes: dict[str, tuple] = {}
    hooks = []
    mods = dict(model.named_modules())
    for n in names:
        hooks.append(mods[n].register_forward_hook(lambda m, i, o, n=n: shapes.__setitem__(n, tuple(o.shape))))
    if isinstance(model, DownstreamNet):
        for i, st in enumerate(model.discriminator):
            hooks.append(st.register_forward_hook(lambda m, inp, o, i=i: shapes.__setitem__(f"disc.{i}", tuple(o.shape))))
    try:
        with torch.no_grad():
            model(example_input)
    finally:
        for h in hooks:
            h.remove()
    return shapes


# ---------------------------------------------------------------------------
# checkpoints


def _git_rev() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def save_checkpoint(model: nn.Module, path, *, seed: int, epoch: int, metrics: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``<path>.pt`` weights and a ``<path>.json`` sidecar, each atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights = path.with_suffix(".pt")
    tmp = weights.with_suffix(".pt.tmp")
    torch.save(model.state_dict(), tmp)
    tmp.replace(weights)
    kind = "pretext" if isinstance(model, JPOPNet) else "downstream"
    meta = {
        "kind": kind,
        "config": model.config.model_dump(mode="json"),
        "seed": seed,
        "epoch": epoch,
        "metrics": metrics or {},
        "git_rev": _git_rev(),
    }
    if extra:
        meta.update(extra)
    side = path.with_suffix(".json")
    tmp = side.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(meta, indent=2))
    tmp.replace(side)
    return weights


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta["kind"] == "pretext":
        model = JPOPNet(PretextModelConfig(**meta["config"]))
    else:
        model = DownstreamNet(DownstreamModelConfig(**meta["config"]))
    model.load_state_dict(torch.load(path.with_suffix(".pt"), map_location="cpu", weights_only=True))
    return model, meta
