"""Grad-CAM localization maps and their comparison with action-unit landmarks."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .core import SEVEN_CLASSES, EmotionLabel, GrayImage, LandmarkSet, ValidationError, as_points
from .network import EmotionalDAN

LAYERS = ("conv4a", "conv4b")
EXPRESSIONS = tuple(c for c in SEVEN_CLASSES if c != "neutral")
DEFAULT_EPSILON = 11.2  # px, 5% of a 224 px face crop
REPORT_COLUMNS = ("emotion", "layer", "k", "overlap", "n_images")


@dataclass(frozen=True)
class AUEntry:
    au: tuple[int, ...]
    name: str
    landmarks: tuple[int, ...]


def _r(a, b):
    return tuple(range(a, b + 1))


_BROWS_INNER = (20, 21, 22, 23)
_BROWS_OUTER = (17, 18, 19, 24, 25, 26)
_LIDS = (37, 38, 39, 42, 43, 44)
_LIP_CORNERS = (48, 49, 53, 54, 55, 59, 60, 64)
_JAW_DROP = _r(55, 67)

# EMFACS prototypes and the 68-point indices near each action unit
AU_TABLE: dict[str, tuple[AUEntry, ...]] = {
    "happiness": (
        AUEntry((6,), "Cheek Raiser", (1, 2, 14, 15)),
        AUEntry((12,), "Lip Corner Puller", _LIP_CORNERS),
    ),
    "sadness": (
        AUEntry((1,), "Inner Brow Raiser", _r(17, 21)),
        AUEntry((4,), "Brow Lowerer", _r(22, 26)),
        AUEntry((15,), "Lip Corner Depressor", _LIP_CORNERS),
    ),
    "surprise": (
        AUEntry((1,), "Inner Brow Raiser", _BROWS_INNER),
        AUEntry((2,), "Outer Brow Raiser", _BROWS_OUTER),
        AUEntry((5,), "Upper Lid Raiser", _LIDS),
        AUEntry((26,), "Jaw Drop", _JAW_DROP),
    ),
    "fear": (
        AUEntry((1,), "Inner Brow Raiser", _BROWS_INNER),
        AUEntry((2,), "Outer Brow Raiser", _BROWS_OUTER),
        AUEntry((4,), "Brow Lowerer", _r(17, 26)),
        AUEntry((5, 7), "Upper Lid Raiser, Lid Tightener", _LIDS),
        AUEntry((20,), "Lip Stretcher", _LIP_CORNERS),
        AUEntry((26,), "Jaw Drop", _JAW_DROP),
    ),
    "disgust": (
        AUEntry((9,), "Nose Wrinkler", _r(27, 35)),
        AUEntry((15,), "Lip Corner Depressor", _LIP_CORNERS),
        AUEntry((16,), "Lower Lip Depressor", (48, 54, 55, 56, 57, 58, 59, 60, 64)),
    ),
    "anger": (
        AUEntry((4,), "Brow Lowerer", _r(17, 26)),
        AUEntry((5, 7), "Upper Lid Raiser, Lid Tightener", _LIDS),
        AUEntry((23,), "Lip Tightener", _r(48, 67)),
    ),
}


def related_landmarks(emotion: str | EmotionLabel, table=AU_TABLE) -> frozenset[int]:
    name = emotion.name if isinstance(emotion, EmotionLabel) else emotion
    if name not in table:
        raise ValidationError(f"no action-unit definition for {name!r}")
    return frozenset(i for entry in table[name] for i in entry.landmarks)


@dataclass(frozen=True, eq=False)
class LocalizationMap:
    values: np.ndarray  # (u, v), non-negative
    layer: str
    class_id: int


@dataclass(frozen=True)
class FrontalSubset:
    members: tuple[int, ...]
    epsilon: float
    mean_left_corner: tuple[float, float]
    mean_right_corner: tuple[float, float]


# ---------------------------------------------------------------------------
# Grad-CAM


def gradcam_from_activations(activations: torch.Tensor, score_fn: Callable[[torch.Tensor], torch.Tensor]) -> np.ndarray:
    """Grad-CAM for a batch of feature maps A (N, K, u, v).

    ``score_fn(A)`` must return one class score per sample (N,). Channel
    weights are the spatial means of d score / d A; the map is
    ReLU(sum_k weight_k * A_k).
    """
    a = activations.detach().clone().requires_grad_(True)
    scores = score_fn(a)
    (grad,) = torch.autograd.grad(scores.sum(), a)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * a.detach()).sum(1))
    return cam.numpy()


def gradcam_batch(model: EmotionalDAN, images: np.ndarray, class_ids: Sequence[int], layer: str = "conv4a",
                  stage: Optional[int] = None) -> np.ndarray:
    """Maps (N, u, v) of ``layer`` in stage ``stage`` (1-based, default final) for normalized images (N, S, S)."""
    if layer not in LAYERS:
        raise ValidationError(f"layer must be one of {LAYERS}, got {layer!r}")
    ids = torch.as_tensor(np.asarray(class_ids, dtype=np.int64)).view(-1)
    if ids.numel() and (ids.min() < 0 or ids.max() >= model.n_classes):
        raise ValidationError(f"class id outside 0..{model.n_classes - 1}")
    t = (stage or model.n_stages) - 1
    dtype = model.canonical_shape.dtype
    x = torch.as_tensor(np.asarray(images), dtype=dtype).unsqueeze(1)
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            prev = model(x, upto=t - 1)[-1] if t > 0 else None
            stage_in, _, _ = model.stage_input(x, t, prev)
            st = model.stages[t]
            acts = st.body(stage_in, layer)

        def score(a):
            logits = st.resume(a, layer)[2]
            return logits.gather(1, ids.view(-1, 1)).squeeze(1)

        return gradcam_from_activations(acts, score)
    finally:
        model.train(was)


def gradcam(model: EmotionalDAN, img: GrayImage | np.ndarray, class_id: int, layer: str = "conv4a",
            stage: Optional[int] = None) -> LocalizationMap:
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    return LocalizationMap(gradcam_batch(model, px[None], [class_id], layer, stage)[0], layer, int(class_id))


# ---------------------------------------------------------------------------
# aggregation


def select_frontal_subset(shapes: Sequence[LandmarkSet | np.ndarray], epsilon: float = DEFAULT_EPSILON,
                          ids: Optional[Sequence[int]] = None) -> FrontalSubset:
    """Keep samples whose outer eye corners (36, 45) lie within ``epsilon`` of the mean corners."""
    if len(shapes) == 0:
        raise ValidationError("frontal subset of an empty sample set")
    pts = np.stack([as_points(s) for s in shapes])
    ids = list(range(len(pts))) if ids is None else list(ids)
    left_mean = pts[:, 36].mean(0)
    right_mean = pts[:, 45].mean(0)
    ok = (np.linalg.norm(pts[:, 36] - left_mean, axis=1) < epsilon) & (
        np.linalg.norm(pts[:, 45] - right_mean, axis=1) < epsilon
    )
    members = tuple(i for i, keep in zip(ids, ok) if keep)
    if not members:
        warnings.warn(f"no sample has both eye corners within {epsilon} px of the mean", stacklevel=2)
    return FrontalSubset(members, float(epsilon), tuple(left_mean.tolist()), tuple(right_mean.tolist()))


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def mean_localization_map(maps: Sequence[LocalizationMap], normalize: bool = True) -> LocalizationMap:
    """Element-wise mean of min-max normalized maps."""
    if not maps:
        raise ValidationError("mean of zero localization maps is undefined")
    first = maps[0]
    for m in maps[1:]:
        if m.layer != first.layer or m.class_id != first.class_id or m.values.shape != first.values.shape:
            raise ValidationError("maps must share layer, class and shape")
    stack = np.stack([_minmax(m.values) if normalize else m.values for m in maps])
    return LocalizationMap(stack.sum(0) / len(maps), first.layer, first.class_id)


def upsample_map(values: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel centres and edge clamping.

    Interpolation is written as a + f * (b - a) so constant regions stay
    exactly constant.
    """
    values = np.asarray(values, dtype=np.float64)
    u, v = values.shape

    def coords(n_src):
        s = (np.arange(size) + 0.5) * n_src / size - 0.5
        s = np.clip(s, 0, n_src - 1)
        i0 = np.minimum(np.floor(s).astype(np.int64), n_src - 1)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, s - i0

    r0, r1, fr = coords(u)
    c0, c1, fc = coords(v)
    top = values[r0][:, c0] + fc * (values[r0][:, c1] - values[r0][:, c0])
    bottom = values[r1][:, c0] + fc * (values[r1][:, c1] - values[r1][:, c0])
    return top + fr[:, None] * (bottom - top)


def landmark_activations(m: LocalizationMap | np.ndarray, reference_shape: LandmarkSet | np.ndarray,
                         size: int = 224) -> np.ndarray:
    values = m.values if isinstance(m, LocalizationMap) else np.asarray(m)
    up = upsample_map(values, size)
    pts = np.clip(np.rint(as_points(reference_shape)).astype(np.int64), 0, size - 1)
    return up[pts[:, 1], pts[:, 0]]


def top_k_activated_landmarks(m: LocalizationMap | np.ndarray, reference_shape: LandmarkSet | np.ndarray, k: int,
                              size: int = 224) -> set[int]:
    """Indices of the k landmarks with the highest upsampled activation; ties go to the lower index."""
    if not 1 <= k <= 68:
        raise ValidationError(f"k must lie in 1..68, got {k}")
    act = landmark_activations(m, reference_shape, size)
    order = sorted(range(68), key=lambda i: (-act[i], i))
    return set(order[:k])


def au_overlap_accuracy(topk: set[int], emotion: str | EmotionLabel, table=AU_TABLE) -> float:
    related = related_landmarks(emotion, table)
    if len(topk) != len(related):
        raise ValidationError(f"expected k = {len(related)} landmarks, got {len(topk)}")
    return len(set(topk) & related) / len(related)


# ---------------------------------------------------------------------------
# rendering


def _hot(m: np.ndarray) -> np.ndarray:
    return np.stack([np.clip(3 * m, 0, 1), np.clip(3 * m - 1, 0, 1), np.clip(3 * m - 2, 0, 1)], -1)


def render_overlay(img: GrayImage | np.ndarray, m: LocalizationMap | np.ndarray,
                   landmarks: Optional[LandmarkSet | np.ndarray] = None, path=None,
                   highlight: Optional[set[int]] = None, strength: float = 0.5) -> np.ndarray:
    """Blend a normalized heatmap over the face; returns the uint8 RGB array and optionally writes it.

    Landmarks are drawn as dots, red for indices in ``highlight`` and blue otherwise.
    """
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    size = px.shape[0]
    gray = _minmax(px)[..., None].repeat(3, axis=2)
    values = m.values if isinstance(m, LocalizationMap) else np.asarray(m)
    heat = _minmax(upsample_map(values, size))
    w = strength * heat[..., None]
    rgb = (1 - w) * gray + w * _hot(heat)
    out = np.round(rgb * 255).astype(np.uint8)
    if landmarks is not None:
        im = Image.fromarray(out)
        d = ImageDraw.Draw(im)
        for i, (x, y) in enumerate(as_points(landmarks)):
            color = (255, 0, 0) if highlight and i in highlight else (40, 90, 255)
            d.ellipse([x - 1.5, y - 1.5, x + 1.5, y + 1.5], fill=color)
        out = np.asarray(im)
    if path is not None:
        Image.fromarray(out).save(path)
    return out


# ---------------------------------------------------------------------------
# per-emotion analysis


@dataclass
class EmotionAnalysis:
    emotion: str
    layer: str
    k: int
    overlap: float
    n_images: int
    mean_map: Optional[LocalizationMap]
    topk: set[int]


def analyze(model: EmotionalDAN, images: np.ndarray, landmarks: np.ndarray, labels: Sequence[int],
            epsilon: float = DEFAULT_EPSILON, layers: Sequence[str] = LAYERS, stage: Optional[int] = None,
            per_image_reference: bool = False) -> list[EmotionAnalysis]:
    """Frontal subset -> per-class Grad-CAM -> mean map -> top-k landmarks -> AU overlap.

    ``labels`` are seven-class ids. Emotions without frontal samples get
    overlap NaN and n_images 0.
    """
    if model.n_classes != len(SEVEN_CLASSES):
        raise ValidationError("action-unit analysis needs a seven-class model")
    size = images.shape[-1]
    labels = np.asarray(labels)
    frontal = np.array(select_frontal_subset(list(landmarks), epsilon).members, dtype=np.int64)
    out = []
    for layer in layers:
        for name in EXPRESSIONS:
            cid = SEVEN_CLASSES.index(name)
            members = frontal[labels[frontal] == cid] if len(frontal) else frontal
            k = len(related_landmarks(name))
            if len(members) == 0:
                out.append(EmotionAnalysis(name, layer, k, math.nan, 0, None, set()))
                continue
            cams = []
            for i in range(0, len(members), 32):
                chunk = members[i:i + 32]
                cams.extend(gradcam_batch(model, images[chunk], [cid] * len(chunk), layer, stage))
            maps = [LocalizationMap(c, layer, cid) for c in cams]
            mean_map = mean_localization_map(maps)
            if per_image_reference:
                acts = np.mean([landmark_activations(_minmax(c), landmarks[j], size) for c, j in zip(cams, members)], 0)
                topk = set(sorted(range(68), key=lambda i: (-acts[i], i))[:k])
            else:
                ref = landmarks[members].mean(0)
                topk = top_k_activated_landmarks(mean_map, ref, k, size)
            out.append(EmotionAnalysis(name, layer, k, au_overlap_accuracy(topk, name), len(members), mean_map, topk))
    return out


def layer_averages(results: Sequence[EmotionAnalysis]) -> dict[str, float]:
    """Mean overlap per layer over the emotions that had images."""
    avgs = {}
    for layer in dict.fromkeys(r.layer for r in results):
        vals = [r.overlap for r in results if r.layer == layer and not math.isnan(r.overlap)]
        avgs[layer] = float(np.mean(vals)) if vals else math.nan
    return avgs


def write_report(path, results: Sequence[EmotionAnalysis]) -> Path:
    path = Path(path)
    avgs = layer_averages(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in results:
            w.writerow([r.emotion, r.layer, r.k, _fmt(r.overlap), r.n_images])
        for layer, avg in avgs.items():
            n = sum(r.n_images for r in results if r.layer == layer)
            w.writerow(["average", layer, "", _fmt(avg), n])
    return path


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"
