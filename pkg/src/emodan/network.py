"""Multi-stage landmark/emotion network.

Each stage is the VGG-style feed-forward block of four conv pairs with max
pooling, a shared 256-unit dense layer and two heads (landmark offsets and
emotion logits). Stages after the first see the input image warped to the
canonical shape, a heatmap of the previous landmark estimate and a feature
image decoded from the previous stage's dense layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import N_LANDMARKS, EmotionDistribution, GrayImage, LandmarkSet, TrainConfig, as_points, validate_distribution
from .geometry import HEATMAP_RADIUS, SimilarityTransform, apply_transform, invert_transform

CONV_LAYERS = ("conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b", "conv4a", "conv4b")
BODY = (
    "conv1a", "conv1b", "pool1",
    "conv2a", "conv2b", "pool2",
    "conv3a", "conv3b", "pool3",
    "conv4a", "conv4b", "pool4",
    "fc1",
)
HEADS = ("fc2_landmark", "fc2_emotion")
FC_UNITS = 256


class StructuralError(RuntimeError):
    pass


def _conv_channels(width: int) -> dict[str, tuple[int, int]]:
    w = [width, 2 * width, 4 * width, 8 * width]
    return {
        "conv1a": (None, w[0]), "conv1b": (w[0], w[0]),
        "conv2a": (w[0], w[1]), "conv2b": (w[1], w[1]),
        "conv3a": (w[1], w[2]), "conv3b": (w[2], w[2]),
        "conv4a": (w[2], w[3]), "conv4b": (w[3], w[3]),
    }


class ConnectionLayer(nn.Module):
    """Dense features -> (size/4)^2 image, bilinearly upsampled to size x size."""

    def __init__(self, image_size: int, in_features: int = FC_UNITS):
        super().__init__()
        self.image_size = image_size
        self.low = image_size // 4
        self.fc = nn.Linear(in_features, self.low * self.low)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        low = self.fc(features).view(-1, 1, self.low, self.low)
        return F.interpolate(low, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)


class Stage(nn.Module):
    def __init__(self, in_channels: int, image_size: int, width: int, n_classes: int,
                 dropout_p: float = 0.5, with_connection: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.dropout_p = dropout_p
        layers = {}
        for name, (cin, cout) in _conv_channels(width).items():
            layers[name] = nn.Conv2d(in_channels if cin is None else cin, cout, 3, stride=1, padding=1)
        final = image_size // 16
        layers["fc1"] = nn.Linear(8 * width * final * final, FC_UNITS)
        layers["fc2_landmark"] = nn.Linear(FC_UNITS, 2 * N_LANDMARKS)
        layers["fc2_emotion"] = nn.Linear(FC_UNITS, n_classes)
        self.layers = nn.ModuleDict(layers)
        self.connection = ConnectionLayer(image_size) if with_connection else None
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # heads start near zero: uniform emotion prior, shape = previous estimate
        for name in HEADS:
            nn.init.normal_(self.layers[name].weight, std=1e-3)

    def _step(self, name: str, x: torch.Tensor) -> torch.Tensor:
        if name.startswith("pool"):
            x = F.max_pool2d(x, kernel_size=2, stride=2)
            return F.dropout(x, self.dropout_p, self.training) if self.dropout_p else x
        layer = self.layers[name]
        if name == "fc1":
            x = x.flatten(1)
            if x.shape[1] != layer.in_features:
                raise StructuralError(f"fc1: expected {layer.in_features} inputs, got {x.shape[1]}")
        elif x.shape[1] != layer.in_channels:
            raise StructuralError(f"{name}: expected {layer.in_channels} input channels, got {x.shape[1]}")
        return F.relu(layer(x))

    def body(self, x: torch.Tensor, upto: str = "fc1") -> torch.Tensor:
        """Activations (post-ReLU) of layer ``upto``."""
        if x.dim() != 4 or x.shape[-2:] != (self.image_size, self.image_size):
            raise StructuralError(f"conv1a: expected N x C x {self.image_size} x {self.image_size} input, got {tuple(x.shape)}")
        for name in BODY:
            x = self._step(name, x)
            if name == upto:
                return x
        raise KeyError(upto)

    def resume(self, a: torch.Tensor, after: str) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Continue the forward pass from the output of layer ``after``.

        Returns (fc1 features, landmark delta, emotion logits).
        """
        x = a
        for name in BODY[BODY.index(after) + 1:]:
            x = self._step(name, x)
        return x, self.layers["fc2_landmark"](x), self.layers["fc2_emotion"](x)

    def forward(self, x: torch.Tensor):
        return self.resume(self.body(x, "conv1a"), "conv1a")


# ---------------------------------------------------------------------------
# batched torch geometry; transforms are (B, 4) rows of [a, b, tx, ty] with
# linear part [[a, -b], [b, a]]


def fit_similarity(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Least-squares similarity params mapping each src shape (B, 68, 2) onto dst."""
    dst = dst.expand_as(src)
    ms, md = src.mean(1, keepdim=True), dst.mean(1, keepdim=True)
    sc, dc = src - ms, dst - md
    denom = (sc**2).sum((1, 2))
    a = (sc * dc).sum((1, 2)) / denom
    b = (sc[..., 0] * dc[..., 1] - sc[..., 1] * dc[..., 0]).sum(1) / denom
    mx, my = ms[:, 0, 0], ms[:, 0, 1]
    tx = md[:, 0, 0] - (a * mx - b * my)
    ty = md[:, 0, 1] - (b * mx + a * my)
    return torch.stack([a, b, tx, ty], dim=1)


def apply_similarity(params: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    a, b, tx, ty = (params[:, i, None] for i in range(4))
    x, y = pts[..., 0], pts[..., 1]
    return torch.stack([a * x - b * y + tx, b * x + a * y + ty], dim=-1)


def invert_similarity(params: torch.Tensor) -> torch.Tensor:
    a, b, tx, ty = params.unbind(1)
    det = a * a + b * b
    ia, ib = a / det, -b / det
    return torch.stack([ia, ib, -(ia * tx - ib * ty), -(ib * tx + ia * ty)], dim=1)


def warp_batch(images: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Bilinear warp with zero fill; output pixel p reads input at T^-1(p)."""
    n, _, h, w = images.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=images.dtype), torch.arange(w, dtype=images.dtype), indexing="ij"
    )
    grid = torch.stack([xs, ys], -1).reshape(1, -1, 2).expand(n, -1, -1)
    src = apply_similarity(invert_similarity(params), grid)
    gx = src[..., 0] / (w - 1) * 2 - 1
    gy = src[..., 1] / (h - 1) * 2 - 1
    g = torch.stack([gx, gy], -1).view(n, h, w, 2)
    return F.grid_sample(images, g, mode="bilinear", padding_mode="zeros", align_corners=True)


def heatmap_batch(pts: torch.Tensor, size: int, radius: float = HEATMAP_RADIUS) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=pts.dtype), torch.arange(size, dtype=pts.dtype), indexing="ij"
    )
    best = torch.full((pts.shape[0], size, size), math.inf, dtype=pts.dtype)
    for i in range(pts.shape[1]):
        px = pts[:, i, 0, None, None]
        py = pts[:, i, 1, None, None]
        best = torch.minimum(best, torch.hypot(xs - px, ys - py))
    return torch.where(best <= radius, 1.0 / (1.0 + best), torch.zeros_like(best)).unsqueeze(1)


@dataclass
class StageResult:
    shape: torch.Tensor  # (B, 68, 2), image frame
    delta: torch.Tensor  # (B, 136), canonical frame
    logits: torch.Tensor
    features: torch.Tensor  # fc1, (B, 256)
    transform: torch.Tensor  # image -> canonical params, (B, 4)
    stage_input: torch.Tensor


class EmotionalDAN(nn.Module):
    def __init__(self, n_classes: int = 7, stages: int = 2, image_size: int = 224, width: int = 64,
                 dropout_p: float = 0.5, canonical_shape: Optional[np.ndarray] = None):
        super().__init__()
        self.n_classes = n_classes
        self.image_size = image_size
        self.width = width
        self.stages = nn.ModuleList(
            Stage(1 if t == 0 else 3, image_size, width, n_classes, dropout_p, with_connection=t > 0)
            for t in range(stages)
        )
        if canonical_shape is None:
            canonical_shape = default_canonical_shape(image_size)
        self.register_buffer("canonical_shape", torch.tensor(np.array(as_points(canonical_shape)), dtype=torch.float32))

    @classmethod
    def from_config(cls, cfg: TrainConfig, canonical_shape=None) -> "EmotionalDAN":
        return cls(cfg.n_classes, cfg.stages, cfg.image_size, cfg.width, cfg.dropout_p, canonical_shape)

    def landmark_unit(self) -> torch.Tensor:
        """Pixels per unit of landmark-head output: the canonical inter-pupil distance."""
        c = self.canonical_shape
        return torch.linalg.norm(c[36:42].mean(0) - c[42:48].mean(0))

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def stage_input(self, images: torch.Tensor, t: int, prev: Optional[StageResult]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(stage input, transform params, previous shape in image frame) for stage t (0-based)."""
        n = images.shape[0]
        canon = self.canonical_shape.to(images.dtype)
        if t == 0:
            prev_shape = canon.expand(n, -1, -1)
            ident = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=images.dtype).expand(n, -1)
            return images, ident, prev_shape
        # earlier stages are frozen while stage t trains
        prev_shape = prev.shape.detach()
        params = fit_similarity(prev_shape, canon)
        warped = warp_batch(images, params)
        heat = heatmap_batch(apply_similarity(params, prev_shape), self.image_size)
        feat = self.stages[t].connection(prev.features.detach())
        return torch.cat([warped, heat, feat], dim=1), params, prev_shape

    def forward(self, images: torch.Tensor, upto: Optional[int] = None) -> list[StageResult]:
        results: list[StageResult] = []
        last = self.n_stages if upto is None else upto + 1
        prev = None
        for t in range(last):
            x, params, prev_shape = self.stage_input(images, t, prev)
            features, raw, logits = self.stages[t](x)
            delta = raw * self.landmark_unit()
            shape = compose_batch(prev_shape, delta, params)
            prev = StageResult(shape, delta, logits, features, params, x)
            results.append(prev)
        return results


def compose_batch(prev_shape: torch.Tensor, delta: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """S_t = T^-1(T(S_{t-1}) + delta), batched."""
    canon = apply_similarity(params, prev_shape) + delta.view(-1, N_LANDMARKS, 2)
    return apply_similarity(invert_similarity(params), canon)


def compose_stage_output(prev_shape: LandmarkSet | np.ndarray, delta: Sequence[float], t: SimilarityTransform) -> LandmarkSet:
    """Align the previous estimate, add the canonical-frame offset, map back."""
    canonical = apply_transform(t, prev_shape).points + np.asarray(delta, dtype=np.float64).reshape(N_LANDMARKS, 2)
    return apply_transform(invert_transform(t), canonical, frame="image")


def connection_layer(shared_features, layer: ConnectionLayer) -> np.ndarray:
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(shared_features), dtype=layer.fc.weight.dtype).view(1, -1)
        return layer(x)[0, 0].numpy()


def stage_forward(x: torch.Tensor, stage: Stage, training: bool = False):
    """Run one stage on a prepared input; returns (fc1, landmark delta, logits)."""
    was = stage.training
    stage.train(training)
    try:
        return stage(x)
    finally:
        stage.train(was)


def default_canonical_shape(image_size: int) -> np.ndarray:
    """Template frontal shape scaled to the image; replaced by the training mean."""
    from .data import template_shape

    return template_shape() * (image_size / 224.0)


def forward_full(img: GrayImage | np.ndarray, model: EmotionalDAN) -> list[tuple[LandmarkSet, EmotionDistribution]]:
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    dtype = model.canonical_shape.dtype
    x = torch.as_tensor(px, dtype=dtype).view(1, 1, *px.shape)
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            results = model(x)
    finally:
        model.train(was)
    out = []
    for r in results:
        probs = torch.softmax(r.logits.double(), dim=1)[0].numpy()
        out.append((LandmarkSet(r.shape[0].double().numpy()), validate_distribution(probs)))
    return out


def predict(model: EmotionalDAN, images: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Final-stage (shapes (N, 68, 2), probabilities (N, C)) for normalized images (N, S, S)."""
    was = model.training
    model.eval()
    shapes, probs = [], []
    dtype = model.canonical_shape.dtype
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = torch.as_tensor(np.asarray(images[i:i + batch_size]), dtype=dtype).unsqueeze(1)
                r = model(x)[-1]
                shapes.append(r.shape.double().numpy())
                probs.append(torch.softmax(r.logits.double(), 1).numpy())
    finally:
        model.train(was)
    return np.concatenate(shapes), np.concatenate(probs)


# ---------------------------------------------------------------------------
# architecture audit


@dataclass(frozen=True)
class AuditRow:
    name: str
    input_shape: tuple[int, int, int]  # H, W, C
    output_shape: tuple[int, int, int]
    kernel: str


def _hwc(t: torch.Tensor) -> tuple[int, int, int]:
    if t.dim() == 4:
        return (t.shape[2], t.shape[3], t.shape[1])
    return (1, 1, t.shape[1])


def shape_audit(stage: Stage) -> list[AuditRow]:
    """Run a zero image through ``stage`` and record every layer's shapes."""
    x = torch.zeros(1, stage.in_channels, stage.image_size, stage.image_size,
                    dtype=stage.layers["fc1"].weight.dtype)
    rows = []
    was = stage.training
    stage.eval()
    with torch.no_grad():
        for name in BODY:
            y = stage._step(name, x)
            if name.startswith("conv"):
                conv = stage.layers[name]
                kernel = f"{conv.kernel_size[0]}×{conv.kernel_size[1]},{conv.in_channels},{conv.stride[0]}"
            elif name.startswith("pool"):
                kernel = "2×2,1,2"
            else:
                kernel = "-"
            rows.append(AuditRow(name, _hwc(x), _hwc(y), kernel))
            x = y
        for name in HEADS:
            rows.append(AuditRow(name, _hwc(x), _hwc(stage.layers[name](x)), "-"))
    stage.train(was)
    return rows


# ---------------------------------------------------------------------------
# checkpoints: one .npz archive, parameters keyed stage{t}/{layer}/{weight|bias}


def _named_params(model: EmotionalDAN):
    for t, stage in enumerate(model.stages, 1):
        for name, layer in stage.layers.items():
            yield f"stage{t}/{name}", layer
        if stage.connection is not None:
            yield f"stage{t}/connection", stage.connection.fc


def state_arrays(model: EmotionalDAN) -> dict[str, np.ndarray]:
    out = {}
    for key, layer in _named_params(model):
        out[f"{key}/weight"] = layer.weight.detach().cpu().numpy().copy()
        out[f"{key}/bias"] = layer.bias.detach().cpu().numpy().copy()
    return out


def save_checkpoint(path, model: EmotionalDAN, cfg: TrainConfig, norm_stats: tuple[float, float] = (0.0, 1.0)) -> Path:
    arrays = state_arrays(model)
    arrays["canonical_shape"] = model.canonical_shape.cpu().numpy().astype(np.float64)
    arrays["config"] = np.array(json.dumps(cfg.to_dict(), sort_keys=True))
    arrays["norm_stats"] = np.asarray(norm_stats, dtype=np.float64)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[EmotionalDAN, TrainConfig, tuple[float, float]]:
    with np.load(path, allow_pickle=False) as z:
        cfg = TrainConfig.from_dict(json.loads(str(z["config"])))
        model = EmotionalDAN.from_config(cfg, canonical_shape=z["canonical_shape"])
        with torch.no_grad():
            for key, layer in _named_params(model):
                for kind in ("weight", "bias"):
                    name = f"{key}/{kind}"
                    if name not in z:
                        raise StructuralError(f"checkpoint {path} lacks {name}")
                    src = torch.as_tensor(z[name])
                    dst = getattr(layer, kind)
                    if src.shape != dst.shape:
                        raise StructuralError(f"{name}: shape {tuple(src.shape)} != expected {tuple(dst.shape)}")
                    dst.copy_(src)
        mean, std = (float(v) for v in z["norm_stats"])
    model.eval()
    return model, cfg, (mean, std)
