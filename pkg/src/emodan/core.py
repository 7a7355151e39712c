"""Domain types, emotion taxonomy and training configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

N_LANDMARKS = 68

# 68-point layout
JAW = tuple(range(0, 17))
LEFT_BROW = tuple(range(17, 22))
RIGHT_BROW = tuple(range(22, 27))
NOSE = tuple(range(27, 36))
LEFT_EYE = tuple(range(36, 42))
RIGHT_EYE = tuple(range(42, 48))
MOUTH = tuple(range(48, 68))


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class Scheme(str, Enum):
    SEVEN = "seven"
    THREE = "three"


SEVEN_CLASSES = ("neutral", "happiness", "sadness", "surprise", "fear", "disgust", "anger")
THREE_CLASSES = ("negative", "positive", "neutral")

# raw labels accepted at ingestion time
RAW_LABELS = ("fear", "sadness", "disgust", "anger", "happiness", "contempt", "neutral", "surprise")

_TO_THREE = {
    "fear": "negative",
    "sadness": "negative",
    "disgust": "negative",
    "anger": "negative",
    "happiness": "positive",
    "contempt": "positive",
    "neutral": "neutral",
    "surprise": None,
}


def class_names(scheme: Scheme | str) -> tuple[str, ...]:
    return SEVEN_CLASSES if Scheme(scheme) is Scheme.SEVEN else THREE_CLASSES


@dataclass(frozen=True)
class EmotionLabel:
    class_id: int
    scheme: Scheme = Scheme.SEVEN

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        n = len(class_names(self.scheme))
        if not 0 <= self.class_id < n:
            raise ValidationError(f"class_id {self.class_id} out of range for {self.scheme.value} scheme")

    @property
    def name(self) -> str:
        return class_names(self.scheme)[self.class_id]

    @classmethod
    def from_name(cls, name: str, scheme: Scheme | str = Scheme.SEVEN) -> "EmotionLabel":
        names = class_names(scheme)
        try:
            return cls(names.index(name), Scheme(scheme))
        except ValueError:
            raise ValidationError(f"unknown {Scheme(scheme).value}-class label {name!r}") from None


def map_to_three_classes(label: EmotionLabel | str) -> Optional[EmotionLabel]:
    """Collapse a raw or seven-class label onto negative/positive/neutral.

    Surprise has no three-class counterpart and returns None; such samples
    are meant to be dropped.
    """
    name = label.name if isinstance(label, EmotionLabel) else str(label).strip().lower()
    if isinstance(label, EmotionLabel) and label.scheme is Scheme.THREE:
        return label
    if name not in _TO_THREE:
        raise ValidationError(f"unknown source label {name!r}")
    target = _TO_THREE[name]
    if target is None:
        return None
    return EmotionLabel.from_name(target, Scheme.THREE)


def resolve_label(raw: str, scheme: Scheme | str, drop_contempt: bool = True) -> Optional[EmotionLabel]:
    """Turn a raw dataset label into a label of ``scheme`` or None if excluded."""
    raw = raw.strip().lower()
    if raw not in RAW_LABELS:
        raise ValidationError(f"unknown source label {raw!r}")
    if Scheme(scheme) is Scheme.THREE:
        return map_to_three_classes(raw)
    if raw == "contempt":
        if drop_contempt:
            return None
        raise ValidationError("contempt has no seven-class id; enable drop_contempt")
    return EmotionLabel.from_name(raw, Scheme.SEVEN)


@dataclass(frozen=True, eq=False)
class EmotionDistribution:
    probs: np.ndarray

    @property
    def scheme(self) -> Scheme:
        return Scheme.SEVEN if len(self.probs) == 7 else Scheme.THREE

    def argmax(self) -> EmotionLabel:
        return EmotionLabel(int(np.argmax(self.probs)), self.scheme)


def validate_distribution(v: Sequence[float], tol: float = 1e-6) -> EmotionDistribution:
    p = np.asarray(v, dtype=np.float64)
    if p.ndim != 1 or len(p) not in (3, 7):
        raise ValidationError(f"distribution must have length 3 or 7, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("distribution has non-finite entries")
    if np.any(p < 0):
        raise ValidationError(f"distribution has a negative entry: {p.min()}")
    if abs(p.sum() - 1.0) > tol:
        raise ValidationError(f"distribution must sum to 1 (+-{tol}), sums to {p.sum()}")
    return EmotionDistribution(p)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """68 (x, y) points in pixel units; ``frame`` is 'image' or 'canonical'."""

    points: np.ndarray
    frame: str = "image"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape == (2 * N_LANDMARKS,):
            pts = pts.reshape(N_LANDMARKS, 2)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValidationError(f"expected {N_LANDMARKS} points, got array of shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("landmark coordinates must be finite")
        if self.frame not in ("image", "canonical"):
            raise ValidationError(f"unknown frame {self.frame!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1)

    def __len__(self):
        return N_LANDMARKS


def as_points(s: LandmarkSet | np.ndarray) -> np.ndarray:
    if isinstance(s, LandmarkSet):
        return s.points
    return LandmarkSet(s).points


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValidationError(f"gray image must be 2-D, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValidationError("image intensities must be finite")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TrainConfig:
    alpha: float = 0.4
    beta: float = 0.6
    base_lr: float = 1e-4
    max_lr: float = 0.05
    # None -> two epochs' worth of iterations
    step_size: Optional[int] = None
    dropout_p: float = 0.5
    stages: int = 2
    emotion_scheme: Scheme = Scheme.SEVEN
    image_size: int = 224
    width: int = 64
    batch_size: int = 32
    momentum: float = 0.9
    grad_clip: float = 1.0
    max_epochs: int = 200
    patience: int = 5
    min_delta: float = 1e-4
    drop_contempt: bool = True
    seed: int = 0

    def __post_init__(self):
        self.emotion_scheme = Scheme(self.emotion_scheme)
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValidationError("alpha and beta must be non-negative with a positive sum")
        if not self.base_lr < self.max_lr:
            raise ValidationError("base_lr must be smaller than max_lr")
        if self.stages < 1:
            raise ValidationError("stages must be >= 1")
        if self.step_size is not None and self.step_size < 1:
            raise ValidationError("step_size must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValidationError("dropout_p must lie in [0, 1)")
        if self.image_size < 16:
            raise ValidationError("image_size must be >= 16 (four 2x2 poolings)")

    @property
    def n_classes(self) -> int:
        return len(class_names(self.emotion_scheme))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["emotion_scheme"] = self.emotion_scheme.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], value)
        return cls(**kwargs)


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    value = value.strip()
    default = f.default
    if f.name == "step_size":
        return None if value.lower() in ("", "none", "auto") else int(value)
    if f.name == "emotion_scheme":
        return Scheme(value)
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{f.name}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def read_kv_file(path) -> dict:
    """Parse a flat ``key = value`` text file; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv_file(path, values: dict) -> None:
    with open(path, "w") as fh:
        for key, value in values.items():
            if isinstance(value, Enum):
                value = value.value
            fh.write(f"{key} = {'none' if value is None else value}\n")
