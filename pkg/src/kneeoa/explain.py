"""Grad-CAM attention maps and heatmap overlays.

Any model exposing ``activation(x, layer)``, ``logits_from(layer, A)``,
``prepare(images)`` and ``n_classes`` can be explained; :class:`Classifier`
does.  Maps are computed from pre-softmax scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .imaging import GrayImage, ResampleFilter, quantize, resample_matrix
from .nngraph import Tape, Tensor, ops


class LayerError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class Explainable(Protocol):
    n_classes: int

    def prepare(self, images) -> np.ndarray: ...

    def activation(self, x: Tensor, layer: int) -> Tensor: ...

    def logits_from(self, layer: int, act: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class CamMap:
    weights: np.ndarray
    target_class: int
    layer: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


def _build_colormap() -> np.ndarray:
    # blue -> cyan -> green -> yellow -> red, 256 entries
    stops = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    rgb = np.array([[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=float)
    pos = np.arange(256) / 255.0
    table = np.stack([np.interp(pos, stops, rgb[:, c]) for c in range(3)], axis=1)
    return np.floor(table + 0.5).astype(np.uint8)


COLORMAP = _build_colormap()
COLORMAP.setflags(write=False)


def default_layer(model) -> int:
    return len(model.channels) - 1


def grad_cam(model: Explainable, img: GrayImage, class_c: int, layer_l: int | None = None) -> CamMap:
    """Gradient-weighted class activation map for one image."""
    if layer_l is None:
        layer_l = default_layer(model)
    if not 0 <= class_c < model.n_classes:
        raise ParameterError(f"class {class_c} outside 0..{model.n_classes - 1}")
    try:
        act = model.activation(Tensor(model.prepare([img])), layer_l)
    except (ValueError, IndexError, TypeError) as exc:
        raise LayerError(f"layer {layer_l!r} has no spatial activation: {exc}") from exc
    if act.data.ndim != 4:
        raise LayerError(f"layer {layer_l!r} output has shape {act.shape}, expected (1, K, h, w)")
    A = Tensor(act.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        logits = model.logits_from(layer_l, A)
        onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
        onehot[0, class_c] = 1.0
        score = ops.sum(ops.mul(logits, Tensor(onehot)))
    if not any(r.output is score for r in tape.records):
        grads = np.zeros_like(A.data)  # score does not depend on the layer
    else:
        tape.backward(score, wrt=[A])
        grads = A.grad if A.grad is not None else np.zeros_like(A.data)
    alpha = grads[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, A.data[0], axes=1), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return CamMap(cam, class_c, layer_l)


def upsample_cam(cam: CamMap, width: int, height: int) -> np.ndarray:
    """Bilinear resize of the map to ``height x width``, kept in [0, 1]."""
    ry = resample_matrix(cam.shape[0], height, ResampleFilter.BILINEAR)
    rx = resample_matrix(cam.shape[1], width, ResampleFilter.BILINEAR)
    return np.clip(ry @ cam.weights @ rx.T, 0.0, 1.0)


def overlay(img: GrayImage, cam: CamMap, blend: float = 0.5) -> np.ndarray:
    """Blend the colormapped CAM onto the image; returns an (H, W, 3) uint8 raster."""
    if not 0.0 <= blend <= 1.0:
        raise ParameterError(f"blend {blend} outside [0, 1]")
    heat = upsample_cam(cam, img.width, img.height)
    color = COLORMAP[np.floor(heat * 255 + 0.5).astype(np.intp)].astype(np.float64)
    gray = np.repeat(quantize(img)[..., None].astype(np.float64), 3, axis=2)
    out = (1.0 - blend) * gray + blend * color
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
