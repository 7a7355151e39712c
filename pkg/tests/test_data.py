import csv
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from emodan.core import EmotionLabel, Scheme, ValidationError
from emodan.data import (
    LUMA,
    MANIFEST_HEADER,
    DatasetManifest,
    SampleRecord,
    compute_accuracy,
    compute_norm_stats,
    crop_resize,
    generate_synthetic_corpus,
    load_arrays,
    load_manifest,
    preprocess,
    to_gray,
    write_confusion,
    write_manifest,
)


def _save(path, arr, mode="L"):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


def test_preprocess_identity_pipeline(tmp_path, rng):
    px = rng.integers(0, 256, size=(224, 224))
    _save(tmp_path / "a.png", px)
    rec = SampleRecord("a.png", np.zeros((68, 2)) + 50, "neutral")
    img, lms = preprocess(rec, (0.0, 1.0), 224, tmp_path)
    assert img.pixels.shape == (224, 224)
    assert np.array_equal(img.pixels, px.astype(float))
    assert np.array_equal(lms.points, rec.landmarks)


def test_preprocess_box_corner_mapping(tmp_path, rng):
    _save(tmp_path / "b.png", rng.integers(0, 256, size=(300, 400)))
    box = (40.0, 30.0, 340.0, 280.0)
    lm = np.tile([[100.0, 100.0]], (68, 1))
    lm[0] = box[:2]
    lm[1] = box[2:]
    img, pts = preprocess(SampleRecord("b.png", lm, "fear", box=box), None, 56, tmp_path)
    assert img.pixels.shape == (56, 56)
    assert np.allclose(pts.points[0], (0, 0), atol=1e-12)
    assert np.allclose(pts.points[1], (56, 56), atol=1e-12)
    # affine oracle on an interior point
    assert np.allclose(pts.points[2], ((100 - 40) * 56 / 300, (100 - 30) * 56 / 250), atol=1e-12)


def test_crop_resize_samples_box_origin(rng):
    gray = rng.uniform(size=(50, 60))
    out, scale, offset = crop_resize(gray, (10, 5, 40, 35), 30)
    assert np.array_equal(out, gray[5:35, 10:40])  # integer box, unit scale
    assert np.array_equal(scale, (1, 1)) and np.array_equal(offset, (10, 5))
    with pytest.raises(ValidationError):
        crop_resize(gray, (10, 5, 10, 35), 30)
    with pytest.raises(ValidationError):
        crop_resize(gray, (0, 0, 61, 50), 30)


def test_rgb_uses_luma_weights(rng):
    rgb = rng.uniform(0, 255, size=(4, 4, 3))
    expect = LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]
    assert np.allclose(to_gray(rgb), expect, atol=1e-12)


def test_synthetic_corpus_is_deterministic(tmp_path):
    a = generate_synthetic_corpus(14, 5, "seven", tmp_path / "a", size=64)
    generate_synthetic_corpus(14, 5, "seven", tmp_path / "b", size=64)
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
    for r in a.records:
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
    generate_synthetic_corpus(14, 6, "seven", tmp_path / "c", size=64)
    assert (tmp_path / "c/manifest.csv").read_bytes() != (tmp_path / "a/manifest.csv").read_bytes()


def test_synthetic_happiness_curvature(tmp_path):
    m = generate_synthetic_corpus(35, 1, "seven", tmp_path, size=64)
    happy = [r for r in m.records if r.label == "happiness"]
    assert happy
    for r in happy:
        assert r.landmarks[48, 1] < r.landmarks[57, 1]
        assert r.landmarks[54, 1] < r.landmarks[57, 1]


@pytest.mark.parametrize("scheme,n", [("seven", 23), ("three", 20)])
def test_synthetic_class_balance(tmp_path, scheme, n):
    m = generate_synthetic_corpus(n, 0, scheme, tmp_path, size=32)
    ds = load_arrays(m, None, scheme, 32, (0.0, 1.0))
    counts = Counter(ds.labels.tolist())
    k = 7 if scheme == "seven" else 3
    assert len(counts) == k and max(counts.values()) - min(counts.values()) <= 1


def test_synthetic_splits(tmp_path):
    m = generate_synthetic_corpus(20, 0, "seven", tmp_path, val_fraction=0.2, test_fraction=0.1, size=32)
    assert (len(m.split("train")), len(m.split("val")), len(m.split("test"))) == (14, 4, 2)


def test_manifest_roundtrip(small_corpus, tmp_path):
    path = write_manifest(small_corpus, tmp_path / "m.csv")
    back = load_manifest(path, check_images=False)
    assert back == small_corpus


def test_empty_manifest(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValidationError, match="empty"):
        load_manifest(tmp_path / "e.csv")
    (tmp_path / "h.csv").write_text(",".join(MANIFEST_HEADER) + "\n")
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "h.csv")


def test_missing_image_listed(tmp_path, small_corpus):
    recs = list(small_corpus.records[:2]) + [SampleRecord("images/ghost.png", np.ones((68, 2)), "anger")]
    write_manifest(DatasetManifest(recs), tmp_path / "m.csv")
    for r in recs[:2]:
        (tmp_path / r.path).parent.mkdir(exist_ok=True)
        (tmp_path / r.path).write_bytes((small_corpus.root / r.path).read_bytes())
    with pytest.raises(ValidationError, match="ghost.png"):
        load_manifest(tmp_path / "m.csv")


def test_bad_rows(tmp_path, small_corpus):
    path = write_manifest(DatasetManifest(small_corpus.records[:3]), tmp_path / "m.csv")
    rows = list(csv.reader(open(path)))
    rows[2][7] = ""  # one landmark coordinate missing
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    m = load_manifest(path, check_images=False)
    assert len(m) == 2 and m.rejected == 1
    rows[3][-3] = "boredom"
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with pytest.raises(ValidationError, match=r"m.csv:4.*boredom"):
        load_manifest(path, check_images=False)


def test_norm_stats_only_depend_on_train(tmp_path):
    m = generate_synthetic_corpus(20, 2, "seven", tmp_path, val_fraction=0.3, size=32)
    base = compute_norm_stats(m, 32)
    # reshuffle which held-out records are val vs test
    for r in m.records:
        if r.split != "train":
            r.split = "test" if r.split == "val" else "val"
    assert compute_norm_stats(m, 32) == base
    rev = DatasetManifest(list(reversed(m.records)), m.root)
    assert compute_norm_stats(rev, 32) == pytest.approx(base, rel=1e-12)


def test_load_arrays_three_scheme_drops_surprise(small_corpus):
    ds7 = load_arrays(small_corpus, None, "seven", 32, (0.0, 1.0))
    ds3 = load_arrays(small_corpus, None, "three", 32, (0.0, 1.0))
    n_surprise = sum(r.label == "surprise" for r in small_corpus.records)
    assert len(ds3) == len(ds7) - n_surprise
    assert set(ds3.labels.tolist()) <= {0, 1, 2}


def test_accuracy_examples():
    labels = [EmotionLabel(i % 7) for i in range(14)]
    assert compute_accuracy(labels, labels)[0] == 1.0
    wrong = [EmotionLabel((i + 1) % 7) for i in range(14)]
    assert compute_accuracy(wrong, labels)[0] == 0.0


def test_accuracy_tally_oracle():
    gts = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
    preds = [0, 1, 2, 0, 1, 0, 0, 2, 2, 1]
    acc, cm = compute_accuracy([EmotionLabel(p, Scheme.THREE) for p in preds],
                               [EmotionLabel(g, Scheme.THREE) for g in gts])
    assert acc == 0.7
    oracle = np.zeros((3, 3), int)
    for g, p in zip(gts, preds):
        oracle[g][p] += 1
    assert np.array_equal(cm, oracle)


def test_accuracy_errors():
    with pytest.raises(ValidationError):
        compute_accuracy([EmotionLabel(0)], [])
    with pytest.raises(ValidationError):
        compute_accuracy([EmotionLabel(0)], [EmotionLabel(0, Scheme.THREE)])


def test_confusion_csv(tmp_path):
    cm = np.array([[2, 1, 0], [0, 3, 0], [1, 0, 4]])
    path = write_confusion(tmp_path / "c.csv", cm, ["negative", "positive", "neutral"])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["true\\pred", "negative", "positive", "neutral"]
    assert rows[3] == ["neutral", "1", "0", "4"]
