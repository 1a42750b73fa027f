"""Grad-CAM heatmaps for the pretext and downstream networks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .models import DownstreamNet, JPOPNet

ZERO_EPS = 1e-12


@dataclass
class Heatmap:
    values: np.ndarray  # (..., H, W) in [0, 1]
    target_layer: str
    target_class: int | None
    source_id: str | None = None
    is_zero: bool = False
    raw: np.ndarray | None = field(default=None, repr=False)  # pre-normalization, upsampled


def default_target_layer(model: nn.Module) -> str:
    if isinstance(model, JPOPNet):
        return "fusion"
    if isinstance(model, DownstreamNet):
        last = len(model.discriminator) - 1
        block = model.discriminator[last]
        if isinstance(block, nn.Sequential):
            convs = [i for i, m in enumerate(block) if isinstance(m, nn.Conv2d)]
            # the ReLU after the last conv, so the map sees rectified activations
            return f"discriminator.{last}.{convs[-1] + 1}"
        return f"discriminator.{last}"
    raise TypeError(f"no default Grad-CAM layer for {type(model).__name__}")


def _normalize(cam: np.ndarray) -> tuple[np.ndarray, bool]:
    peak = float(cam.max()) if cam.size else 0.0
    if peak < ZERO_EPS:
        return np.zeros_like(cam), True
    return cam / peak, False


def _activation_and_grad(model: nn.Module, inputs, layer: str, target_fn):
    module = dict(model.named_modules()).get(layer)
    if module is None:
        raise ValueError(f"model has no layer {layer!r}")
    store = {}

    def hook(mod, inp, out):
        store["act"] = out
        out.register_hook(lambda g: store.__setitem__("grad", g))

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            out = model(inputs)
            target = target_fn(out)
            model.zero_grad(set_to_none=True)
            target.backward()
    finally:
        handle.remove()
        model.train(was_training)
    act = store["act"].detach()
    if act.dim() != 4 or act.shape[-1] * act.shape[-2] <= 1:
        raise ValueError(f"layer {layer!r} has no spatial extent (activation shape {tuple(act.shape)})")
    grad = store.get("grad")
    grad = torch.zeros_like(act) if grad is None else grad.detach()
    return act, grad


def _cam(act: torch.Tensor, grad: torch.Tensor, size: int) -> np.ndarray:
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=(size, size), mode="bilinear", align_corners=False)
    return cam[:, 0].double().numpy()


def gradcam(model: nn.Module, inputs, target_layer: str | None = None, target_output: int | None = None, source_id: str | None = None) -> Heatmap:
    """Grad-CAM of one input.

    Pretext: ``inputs`` is (1, 9, P, P); the map lives in patch coordinates
    and ``target_output`` picks the class logit (default: the argmax).
    Downstream: ``inputs`` is the list of nine frame groups; the result holds
    one map per frame, (F, L, L), normalized jointly.
    """
    layer = target_layer or default_target_layer(model)
    if isinstance(model, JPOPNet):
        size = inputs.shape[-1]
        if target_output is None:
            with torch.no_grad():
                target_output = int(model(inputs).argmax(1)[0])
        act, grad = _activation_and_grad(model, inputs, layer, lambda out: out[0, target_output])
        raw = _cam(act, grad, size)[0]
    else:
        size = inputs[0].shape[-1]
        act, grad = _activation_and_grad(model, inputs, layer, lambda out: out.reshape(-1)[0])
        raw = _cam(act, grad, size)
        target_output = None
    values, zero = _normalize(raw)
    return Heatmap(values.astype(np.float32), layer, target_output, source_id, zero, raw)


def pretext_patch_maps(model: JPOPNet, inputs: torch.Tensor, target_output: int | None = None) -> Heatmap:
    """Per-patch Grad-CAM at the branch concatenation, (9, P, P), jointly normalized."""
    size = inputs.shape[-1]
    if target_output is None:
        with torch.no_grad():
            target_output = int(model(inputs).argmax(1)[0])
    act, grad = _activation_and_grad(model, inputs, "concat_branches", lambda out: out[0, target_output])
    n = len(model.branches)
    per = act.shape[1] // n
    maps = [
        _cam(act[:, k * per : (k + 1) * per], grad[:, k * per : (k + 1) * per], size)[0]
        for k in range(n)
    ]
    raw = np.stack(maps)
    values, zero = _normalize(raw)
    return Heatmap(values.astype(np.float32), "concat_branches", target_output, None, zero, raw)


def border_interior_ratio(maps: np.ndarray, strip: int = 4) -> float:
    """Mean heat in the ``strip``-pixel border of each patch over mean heat inside it."""
    maps = np.asarray(maps, dtype=float)
    mask = np.zeros(maps.shape[-2:], dtype=bool)
    mask[:strip, :] = mask[-strip:, :] = mask[:, :strip] = mask[:, -strip:] = True
    border = maps[..., mask].mean()
    interior = maps[..., ~mask].mean()
    if interior <= 0:
        return float("inf") if border > 0 else 1.0
    return float(border / interior)


def region_contrast(heat: np.ndarray, box: tuple[int, int, int, int]) -> tuple[float, float]:
    """(mean heat inside box, mean heat outside) for a (H, W) map."""
    r0, r1, c0, c1 = box
    mask = np.zeros(heat.shape, dtype=bool)
    mask[r0:r1, c0:c1] = True
    return float(heat[mask].mean()), float(heat[~mask].mean())


def overlay(heatmap: np.ndarray, frame: np.ndarray, alpha: float = 0.4, cmap: str = "jet") -> np.ndarray:
    """Colormapped heat blended over a grayscale frame, (H, W, 3) uint8."""
    import matplotlib

    heatmap = np.asarray(heatmap, dtype=float)
    frame = np.asarray(frame, dtype=float)
    if heatmap.shape != frame.shape:
        raise ValueError(f"heatmap {heatmap.shape} and frame {frame.shape} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    gray = np.repeat(np.clip(frame, 0, 1)[..., None], 3, axis=-1)
    colored = matplotlib.colormaps[cmap](np.clip(heatmap, 0, 1))[..., :3]
    rgb = (1.0 - alpha) * gray + alpha * colored
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def save_heatmap(heat: Heatmap, values: np.ndarray, path, meta: dict | None = None) -> Path:
    """16-bit grayscale PNG of one (H, W) map plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.rint(np.clip(values, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(img).save(path)
    doc = {
        "target_layer": heat.target_layer,
        "target_class": heat.target_class,
        "source_id": heat.source_id,
        "is_zero": heat.is_zero,
        "scale": "uint16 / 65535",
    }
    doc.update(meta or {})
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2))
    return path
