"""Manifests, preprocessing, the synthetic face corpus and accuracy metrics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .core import (
    N_LANDMARKS,
    EmotionLabel,
    GrayImage,
    LandmarkSet,
    Scheme,
    ValidationError,
    class_names,
    resolve_label,
)
from .geometry import bilinear_sample

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LUMA = (0.299, 0.587, 0.114)
MANIFEST_HEADER = (
    ["path", "x0", "y0", "x1", "y1"]
    + [f"lm{i}_{ax}" for i in range(N_LANDMARKS) for ax in ("x", "y")]
    + ["label", "dataset", "split"]
)


@dataclass(eq=False)
class SampleRecord:
    path: str
    landmarks: np.ndarray  # (68, 2) px, original image frame
    label: str
    dataset: str = "default"
    box: Optional[tuple[float, float, float, float]] = None  # x0, y0, x1, y1
    split: str = "train"

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.path == other.path
            and self.label == other.label
            and self.dataset == other.dataset
            and self.box == other.box
            and self.split == other.split
            and np.array_equal(self.landmarks, other.landmarks)
        )


@dataclass(eq=False)
class DatasetManifest:
    records: list[SampleRecord]
    root: Path = field(default_factory=Path)  # relative image paths resolve here
    stats: Optional[tuple[float, float]] = None  # train mean, train std
    rejected: int = 0

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def image_path(self, rec: SampleRecord) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p


# ---------------------------------------------------------------------------
# manifest CSV


def _fmt(v: float) -> str:
    return repr(float(v))


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            box = [""] * 4 if r.box is None else [_fmt(v) for v in r.box]
            lms = [_fmt(v) for v in np.asarray(r.landmarks, dtype=np.float64).reshape(-1)]
            w.writerow([r.path, *box, *lms, r.label, r.dataset, r.split])
    return path


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    Rows with missing landmark values are dropped and counted in
    ``manifest.rejected``; any other malformed row raises with its line number.
    """
    path = Path(path)
    records, rejected = [], 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty manifest")
        required = MANIFEST_HEADER[:-1]
        if header[: len(required)] != required:
            raise ValidationError(f"{path}:1: unexpected header")
        has_split = len(header) > len(required) and header[len(required)] == "split"
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            lm_fields = row[5 : 5 + 2 * N_LANDMARKS]
            if any(not v.strip() for v in lm_fields):
                rejected += 1
                continue
            try:
                lms = np.array([float(v) for v in lm_fields]).reshape(N_LANDMARKS, 2)
                box_fields = row[1:5]
                if all(not v.strip() for v in box_fields):
                    box = None
                else:
                    box = tuple(float(v) for v in box_fields)
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            label = row[5 + 2 * N_LANDMARKS].strip().lower()
            try:
                resolve_label(label, Scheme.SEVEN, drop_contempt=True)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            split = row[len(required)].strip() if has_split else "train"
            if split not in SPLITS:
                raise ValidationError(f"{path}:{lineno}: unknown split {split!r}")
            records.append(SampleRecord(row[0], lms, label, row[6 + 2 * N_LANDMARKS], box, split))
    if rejected:
        log.warning("%s: rejected %d record(s) with missing landmarks", path, rejected)
    if not records:
        raise ValidationError(f"{path}: manifest has no usable records")
    manifest = DatasetManifest(records, path.parent, rejected=rejected)
    if check_images:
        missing = [str(manifest.image_path(r)) for r in records if not manifest.image_path(r).is_file()]
        if missing:
            raise ValidationError(f"{path}: missing image file(s): {', '.join(missing)}")
    return manifest


# ---------------------------------------------------------------------------
# preprocessing


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I", "F", "I;16"):
                return np.asarray(im, dtype=np.float64)
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def to_gray(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] >= 3:
        return arr[..., :3] @ np.asarray(LUMA)
    raise ValidationError(f"unsupported image array of shape {arr.shape}")


def crop_resize(gray: np.ndarray, box: Optional[Sequence[float]], size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Crop to ``box`` and resize to ``size`` x ``size``.

    Output pixel u samples source x0 + u * (x1 - x0) / size, so a point maps
    as x' = (x - x0) * size / (x1 - x0). Returns (image, scale, offset) with
    x' = (x - offset) * scale.
    """
    h, w = gray.shape
    if box is None:
        box = (0.0, 0.0, float(w), float(h))
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise ValidationError(f"degenerate bounding box {box}")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValidationError(f"bounding box {box} lies outside the {w}x{h} image")
    sx, sy = (x1 - x0) / size, (y1 - y0) / size
    u = np.arange(size, dtype=np.float64)
    xs = x0 + u * sx
    ys = y0 + u * sy
    gx, gy = np.meshgrid(xs, ys)
    out = bilinear_sample(gray, gx, gy, mode="edge")
    return out, np.array([1 / sx, 1 / sy]), np.array([x0, y0])


def preprocess(rec: SampleRecord, stats: Optional[tuple[float, float]] = None, size: int = 224,
               root: Path | str = ".") -> tuple[GrayImage, LandmarkSet]:
    path = Path(rec.path)
    if not path.is_absolute():
        path = Path(root) / path
    gray = to_gray(load_image(path))
    img, scale, offset = crop_resize(gray, rec.box, size)
    mean, std = stats if stats is not None else (0.0, 1.0)
    if std <= 0:
        raise ValidationError("normalization std must be positive")
    lms = (np.asarray(rec.landmarks, dtype=np.float64) - offset) * scale
    return GrayImage((img - mean) / std), LandmarkSet(lms)


def compute_norm_stats(manifest: DatasetManifest, size: int = 224) -> tuple[float, float]:
    """Pixel mean/std over the train split after grayscale + crop + resize."""
    train = manifest.split("train")
    if not train:
        raise ValidationError("manifest has no train split")
    total = total_sq = 0.0
    count = 0
    for rec in train:
        img, _ = preprocess(rec, None, size, manifest.root)
        total += img.pixels.sum()
        total_sq += (img.pixels**2).sum()
        count += img.pixels.size
    mean = total / count
    std = math.sqrt(max(total_sq / count - mean * mean, 0.0))
    return mean, (std if std > 0 else 1.0)


@dataclass
class ArrayDataset:
    images: np.ndarray  # (N, S, S) normalized
    landmarks: np.ndarray  # (N, 68, 2)
    labels: np.ndarray  # (N,) class ids in the chosen scheme
    tags: list[str]

    def __len__(self):
        return len(self.labels)


def load_arrays(manifest: DatasetManifest, split: Optional[str], scheme: Scheme | str, size: int,
                stats: tuple[float, float], drop_contempt: bool = True) -> ArrayDataset:
    """Preprocess every record of ``split`` (all records if None) with a label in ``scheme``."""
    recs = manifest.records if split is None else manifest.split(split)
    images, lms, labels, tags = [], [], [], []
    for rec in recs:
        label = resolve_label(rec.label, scheme, drop_contempt)
        if label is None:
            continue
        img, pts = preprocess(rec, stats, size, manifest.root)
        images.append(img.pixels.astype(np.float32))
        lms.append(pts.points)
        labels.append(label.class_id)
        tags.append(rec.dataset)
    if not images:
        return ArrayDataset(np.zeros((0, size, size), np.float32), np.zeros((0, N_LANDMARKS, 2)), np.zeros(0, np.int64), [])
    return ArrayDataset(np.stack(images), np.stack(lms), np.asarray(labels, dtype=np.int64), tags)


# ---------------------------------------------------------------------------
# synthetic faces

# deviations from neutral: brow raise, inner-brow tilt, eye aperture,
# mouth-corner lift, mouth opening, mouth width
EXPRESSIONS = {
    "neutral": (0.0, 0.0, 1.0, 0.0, 0.0, 1.0),
    "happiness": (0.0, 0.0, 0.75, 1.0, 0.3, 1.15),
    "sadness": (0.0, 1.0, 0.8, -0.9, 0.0, 0.95),
    "surprise": (1.0, 0.0, 1.6, 0.0, 1.2, 0.8),
    "fear": (0.6, 0.8, 1.4, -0.4, 0.6, 1.1),
    "disgust": (-0.6, -0.4, 0.6, -0.6, 0.15, 0.9),
    "anger": (-0.8, -1.0, 0.7, -0.2, 0.0, 0.85),
    "contempt": (0.0, 0.0, 0.9, 0.3, 0.0, 1.0),
}
_NEUTRAL = np.asarray(EXPRESSIONS["neutral"])


def face_shape(expression: Sequence[float]) -> np.ndarray:
    """68 landmarks of a frontal cartoon face centred on the origin (224 px scale)."""
    raise_, tilt, eye_open, lift, mouth_open, mouth_w = expression
    pts = np.zeros((N_LANDMARKS, 2))
    # jaw, image-left ear to image-right ear through the chin
    phi = np.linspace(-0.1, math.pi + 0.1, 17)
    pts[0:17] = np.stack([-72 * np.cos(phi), 88 * np.sin(phi)], 1)
    # brows; t = 0 outer end, 1 inner end
    t = np.linspace(0, 1, 5)
    arch = -4 * np.sin(np.pi * (0.3 + 0.6 * t))
    brow_y = -44 - 8 * raise_ + arch - 6 * tilt * t
    pts[17:22] = np.stack([-58 + 42 * t, brow_y], 1)
    pts[22:27] = np.stack([16 + 42 * t, brow_y[::-1]], 1)
    # nose
    pts[27:31] = np.stack([np.zeros(4), np.linspace(-28, 10, 4)], 1)
    pts[31:36] = np.stack([np.linspace(-14, 14, 5), np.array([18, 21, 23, 21, 18.0])], 1)
    # eyes
    half_h = 5.5 * eye_open
    for start, cx in ((36, -32.0), (42, 32.0)):
        cy = -22.0
        pts[start:start + 6] = [
            (cx - 13, cy), (cx - 5, cy - half_h), (cx + 5, cy - half_h),
            (cx + 13, cy), (cx + 5, cy + half_h), (cx - 5, cy + half_h),
        ]
    # mouth
    w = 26 * mouth_w
    gap = 14 * mouth_open

    def lip(xs, thickness):
        u = xs / w
        bell = 1 - u**2
        return 48 - 8 * lift * u**2 + thickness * bell

    ux = w * np.array([-0.66, -0.33, 0.0, 0.33, 0.66])
    pts[48] = (-w, lip(np.array(-w), 0))
    pts[49:54] = np.stack([ux, lip(ux, -(4 + gap / 2))], 1)
    pts[54] = (w, lip(np.array(w), 0))
    lx = ux[::-1]
    pts[55:60] = np.stack([lx, lip(lx, 5 + gap / 2)], 1)
    iw = 0.8 * w
    pts[60] = (-iw, lip(np.array(-iw), 0))
    ix = iw * np.array([-0.5, 0.0, 0.5])
    pts[61:64] = np.stack([ix, lip(ix, -gap / 2)], 1)
    pts[64] = (iw, lip(np.array(iw), 0))
    pts[65:68] = np.stack([ix[::-1], lip(ix[::-1], gap / 2)], 1)
    return pts


def template_shape(size: int = 224) -> np.ndarray:
    """Neutral, unjittered face shape in a size x size image."""
    return (face_shape(EXPRESSIONS["neutral"]) + 112.0) * (size / 224.0)


def render_face(landmarks: np.ndarray, size: int = 224, skin: int = 170, background: int = 70,
                noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw a grayscale cartoon face whose features pass through ``landmarks``."""
    im = Image.new("L", (size, size), background)
    d = ImageDraw.Draw(im)
    p = [tuple(map(float, xy)) for xy in landmarks]
    jaw = p[0:17]
    # forehead arc closing the head outline
    c = np.mean(landmarks[[0, 16]], axis=0)
    r = np.linalg.norm(landmarks[16] - landmarks[0]) / 2
    ang = math.atan2(landmarks[16, 1] - landmarks[0, 1], landmarks[16, 0] - landmarks[0, 0])
    top = [
        (c[0] + r * math.cos(ang + a), c[1] + r * 1.1 * math.sin(ang + a))
        for a in np.linspace(0, -math.pi, 24)
    ]
    d.polygon(jaw + top[1:-1], fill=skin)
    d.line(p[17:22], fill=35, width=5)
    d.line(p[22:27], fill=35, width=5)
    for eye in (p[36:42], p[42:48]):
        d.polygon(eye, fill=235)
        ex, ey = np.mean(eye, axis=0)
        rr = max(1.5, min(4.0, abs(eye[1][1] - eye[5][1]) / 2))
        d.ellipse([ex - rr, ey - rr, ex + rr, ey + rr], fill=20)
    d.line(p[27:31], fill=110, width=3)
    d.line(p[31:36], fill=110, width=3)
    d.polygon(p[48:60], fill=95)
    d.polygon(p[60:68], fill=25)
    arr = np.asarray(im, dtype=np.float64)
    if noise is not None:
        arr = np.clip(arr + noise, 0, 255)
    return arr


def _scheme_labels(n: int, scheme: Scheme) -> list[str]:
    if scheme is Scheme.SEVEN:
        names = list(class_names(Scheme.SEVEN))
        return [names[i % 7] for i in range(n)]
    negatives = ["sadness", "anger", "fear", "disgust"]
    out = []
    for i in range(n):
        k = i % 3
        out.append(negatives[(i // 3) % 4] if k == 0 else ("happiness" if k == 1 else "neutral"))
    return out


def synth_sample(label: str, rng: np.random.Generator, size: int = 224) -> tuple[np.ndarray, np.ndarray]:
    """One jittered (image, landmarks) pair for a raw emotion label."""
    expr = np.asarray(EXPRESSIONS[label])
    intensity = rng.uniform(0.85, 1.15)
    expr = _NEUTRAL + intensity * (expr - _NEUTRAL)
    pts = face_shape(expr)
    scale = rng.uniform(0.94, 1.06)
    rot = rng.uniform(-0.08, 0.08)
    shift = rng.uniform(-8, 8, size=2)
    c, s = math.cos(rot), math.sin(rot)
    pts = scale * pts @ np.array([[c, -s], [s, c]]).T + 112.0 + shift
    pts *= size / 224.0
    skin = int(rng.integers(150, 200))
    background = int(rng.integers(40, 100))
    noise = rng.normal(0, 3.0, size=(size, size))
    return render_face(pts, size, skin, background, noise), pts


def generate_synthetic_corpus(n: int, seed: int, scheme: Scheme | str = Scheme.SEVEN, out_dir=None,
                              val_fraction: float = 0.0, test_fraction: float = 0.0,
                              dataset: str = "synthetic", size: int = 224) -> DatasetManifest:
    """Render ``n`` labelled faces as PNGs under ``out_dir`` and write ``manifest.csv``.

    Classes are assigned round-robin; everything else is drawn from ``seed``.
    """
    if n < 8:
        raise ValidationError("synthetic corpus needs n >= 8")
    scheme = Scheme(scheme)
    out = Path(out_dir if out_dir is not None else ".")
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = _scheme_labels(n, scheme)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    order = rng.permutation(n)
    split = ["train"] * n
    for i in order[:n_test]:
        split[i] = "test"
    for i in order[n_test:n_test + n_val]:
        split[i] = "val"
    records = []
    for i, label in enumerate(labels):
        img, pts = synth_sample(label, rng, size)
        rel = f"images/{i:05d}_{label}.png"
        Image.fromarray(np.round(img).astype(np.uint8), mode="L").save(out / rel)
        records.append(SampleRecord(rel, pts, label, dataset, None, split[i]))
    manifest = DatasetManifest(records, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# metrics


def compute_accuracy(preds: Sequence, gts: Sequence, n_classes: Optional[int] = None) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows = ground truth, cols = prediction)."""
    if len(preds) != len(gts):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(gts)} labels")
    if not len(gts):
        raise ValidationError("no samples to score")

    def ids(seq):
        return [x.class_id if isinstance(x, EmotionLabel) else int(x) for x in seq]

    for p, g in zip(preds, gts):
        if isinstance(p, EmotionLabel) and isinstance(g, EmotionLabel) and p.scheme is not g.scheme:
            raise ValidationError("prediction and ground truth use different label schemes")
    if n_classes is None:
        first = gts[0]
        n_classes = len(class_names(first.scheme)) if isinstance(first, EmotionLabel) else max(max(ids(preds)), max(ids(gts))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(ids(preds), ids(gts)):
        cm[g, p] += 1
    return float(np.trace(cm) / cm.sum()), cm


def write_confusion(path, cm: np.ndarray, names: Sequence[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, cm):
            w.writerow([name, *row.tolist()])
    return path
