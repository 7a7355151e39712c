from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from PIL import Image

from emodan.core import EmotionLabel, ValidationError
from emodan.explain import (
    AU_TABLE,
    EXPRESSIONS,
    LocalizationMap,
    analyze,
    au_overlap_accuracy,
    gradcam,
    gradcam_batch,
    gradcam_from_activations,
    layer_averages,
    mean_localization_map,
    related_landmarks,
    render_overlay,
    select_frontal_subset,
    top_k_activated_landmarks,
    upsample_map,
    write_report,
)
from emodan.network import EmotionalDAN

from conftest import random_shape

REPORTED_4A = (0.375, 0.455, 0.522, 0.633, 0.214, 0.647)
REPORTED_4B = (0.312, 0.409, 0.478, 0.6, 0.429, 0.559)

# tiny net on A of shape (1, 2, 2, 2): y = <W, A> + 0.5 * <V, A>^2
W = torch.tensor([[[0.3, -1.2], [0.7, 0.1]], [[-0.4, 0.9], [0.2, -0.6]]], dtype=torch.float64)
V = torch.tensor([[[0.5, 0.1], [-0.3, 0.8]], [[0.2, -0.7], [0.4, 0.05]]], dtype=torch.float64)
A = torch.tensor([[[[1.0, 0.5], [2.0, 0.0]], [[0.3, 1.5], [0.8, 2.2]]]], dtype=torch.float64)


def tiny_score(a, w=W):
    lin = (a * w).sum((1, 2, 3))
    quad = (a * V).sum((1, 2, 3))
    return lin + 0.5 * quad**2


def brute_force_cam(a, score, h=1e-6):
    a = a[0].numpy()
    grads = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        up, down = a.copy(), a.copy()
        up[idx] += h
        down[idx] -= h
        f = lambda z: score(torch.tensor(z)[None]).item()
        grads[idx] = (f(up) - f(down)) / (2 * h)
    weights = grads.mean(axis=(1, 2))
    pre = sum(weights[k] * a[k] for k in range(a.shape[0]))
    return np.maximum(pre, 0)


def test_gradcam_matches_brute_force():
    cam = gradcam_from_activations(A, tiny_score)[0]
    oracle = brute_force_cam(A, tiny_score)
    assert np.abs(cam - oracle).max() < 1e-6
    assert np.all(cam >= 0)


def test_gradcam_constant_score_gives_zero():
    cam = gradcam_from_activations(A, lambda a: (a * 0).sum((1, 2, 3)) + 3.0)
    assert np.all(cam == 0)


def test_gradcam_unit_gradient_is_relu_of_map():
    a = torch.tensor([[[[1.0, -2.0], [0.5, 3.0]]]], dtype=torch.float64)
    cam = gradcam_from_activations(a, lambda z: z.sum((1, 2, 3)))
    assert np.array_equal(cam[0], np.maximum(a[0, 0].numpy(), 0))


def test_gradcam_rescaling_invariance():
    # linear head: doubling A and halving the weights leaves the weighted sum unchanged
    lin = lambda w: (lambda a: (a * w).sum((1, 2, 3)))
    base = gradcam_from_activations(A, lin(W))
    scaled = gradcam_from_activations(2 * A, lin(W / 2))
    assert np.allclose(base, scaled, atol=1e-12)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return EmotionalDAN(7, 2, 32, width=2).eval()


def manual_final_stage_cam(model, img, class_id, layer):
    """Functional re-implementation of the last stage with A taken as a leaf."""
    x = torch.tensor(img, dtype=torch.float32).view(1, 1, *img.shape)
    with torch.no_grad():
        prev = model(x, upto=model.n_stages - 2)[-1]
        inp, _, _ = model.stage_input(x, model.n_stages - 1, prev)
    L = model.stages[-1].layers
    h = inp
    order = ["conv1a", "conv1b", None, "conv2a", "conv2b", None, "conv3a", "conv3b", None, "conv4a", "conv4b", None]
    act = None
    for name in order:
        if name is None:
            h = F.max_pool2d(h, 2)
            continue
        h = F.relu(F.conv2d(h, L[name].weight, L[name].bias, padding=1))
        if name == layer:
            act = h.detach().requires_grad_(True)
            h = act
    logits = F.linear(F.relu(F.linear(h.flatten(1), L["fc1"].weight, L["fc1"].bias)), L["fc2_emotion"].weight,
                      L["fc2_emotion"].bias)
    (g,) = torch.autograd.grad(logits[0, class_id], act)
    return F.relu((g.mean((2, 3), keepdim=True) * act).sum(1))[0].detach().numpy()


@pytest.mark.parametrize("layer", ["conv4a", "conv4b"])
def test_gradcam_on_model_matches_functional_oracle(model, rng, layer):
    img = rng.normal(size=(32, 32))
    m = gradcam(model, img, 2, layer)
    assert m.values.shape == (4, 4) and np.all(m.values >= 0)
    assert np.allclose(m.values, manual_final_stage_cam(model, img, 2, layer), atol=1e-6)


def test_gradcam_batch_matches_single(model, rng):
    imgs = rng.normal(size=(3, 32, 32))
    batch = gradcam_batch(model, imgs, [0, 4, 6], "conv4a")
    for i, c in enumerate([0, 4, 6]):
        assert np.allclose(batch[i], gradcam(model, imgs[i], c, "conv4a").values, atol=1e-6)


def test_gradcam_rejects_bad_class_and_layer(model, rng):
    img = rng.normal(size=(32, 32))
    with pytest.raises(ValidationError):
        gradcam(model, img, 7)
    with pytest.raises(ValidationError):
        gradcam(model, img, 0, "conv3b")


def test_frontal_subset_rules(face):
    eps = 5.0
    shapes = [face.copy() for _ in range(5)]
    assert select_frontal_subset(shapes, eps).members == (0, 1, 2, 3, 4)
    shifted = face.copy()
    shifted[36] += (2 * eps, 0)
    shifted[45] += (2 * eps, 0)
    sub = select_frontal_subset(shapes + [shifted], eps)
    assert 5 not in sub.members


def test_frontal_subset_oracle(rng):
    shapes = [random_shape(rng, spread=60) for _ in range(40)]
    eps = 8.0
    got = select_frontal_subset(shapes, eps).members
    ml = sum(s[36] for s in shapes) / len(shapes)
    mr = sum(s[45] for s in shapes) / len(shapes)
    oracle = tuple(i for i, s in enumerate(shapes) if np.hypot(*(s[36] - ml)) < eps and np.hypot(*(s[45] - mr)) < eps)
    assert got == oracle and 0 < len(got) < 40


def test_frontal_subset_empty_cases(face):
    with pytest.raises(ValidationError):
        select_frontal_subset([], 5.0)
    a, b = face.copy(), face.copy()
    b[36] += 40
    b[45] += 40
    with pytest.warns(UserWarning):
        assert select_frontal_subset([a, b], 5.0).members == ()


def test_mean_map_examples(rng):
    m = rng.uniform(size=(4, 4))
    m[0, 0], m[1, 1] = 0.0, 1.0
    single = mean_localization_map([LocalizationMap(m, "conv4a", 1)])
    assert np.array_equal(single.values, m)
    a = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
    a[0, 0], a[0, 1] = 0, 1
    b = 1 - a
    mean = mean_localization_map([LocalizationMap(a, "conv4a", 1), LocalizationMap(b, "conv4a", 1)]).values
    assert np.all(mean == 0.5)
    with pytest.raises(ValidationError):
        mean_localization_map([])


def test_mean_map_oracle_and_permutation(rng):
    raw = [rng.uniform(0, rng.uniform(1, 9), size=(6, 6)) for _ in range(10)]
    maps = [LocalizationMap(r, "conv4b", 3) for r in raw]
    got = mean_localization_map(maps).values
    oracle = np.zeros((6, 6))
    for r in raw:
        oracle += (r - r.min()) / (r.max() - r.min())
    oracle /= 10
    assert np.abs(got - oracle).max() < 1e-12
    perm = [maps[i] for i in rng.permutation(10)]
    assert np.allclose(mean_localization_map(perm).values, got, atol=1e-15)


def test_upsample_matches_torch(rng):
    m = rng.uniform(size=(7, 7))
    ref = F.interpolate(torch.tensor(m)[None, None], size=(56, 56), mode="bilinear", align_corners=False)[0, 0]
    assert np.allclose(upsample_map(m, 56), ref.numpy(), atol=1e-12)


def test_topk_mouth_support(face):
    # full-resolution map, so upsampling is the identity and nothing bleeds onto the jaw
    m = np.zeros((224, 224))
    mouth = np.rint(face[48:68]).astype(int)
    m[mouth[:, 1], mouth[:, 0]] = np.random.default_rng(0).uniform(0.5, 1, size=20)
    top = top_k_activated_landmarks(m, face, 20)
    assert top == set(range(48, 68))
    assert top_k_activated_landmarks(m, face, 5) <= set(range(48, 68))


def test_topk_constant_map_tie_break(face):
    for k in (1, 12, 36):
        assert top_k_activated_landmarks(np.ones((28, 28)), face, k) == set(range(k))


def test_topk_sort_oracle(rng):
    for _ in range(10):
        m = rng.uniform(size=(28, 28))
        ref = random_shape(rng)
        k = int(rng.integers(1, 68))
        up = F.interpolate(torch.tensor(m)[None, None], size=(224, 224), mode="bilinear", align_corners=False)[0, 0].numpy()
        vals = [up[int(round(y)), int(round(x))] for x, y in ref]
        oracle = set(np.argsort(-np.asarray(vals), kind="stable")[:k].tolist())
        assert top_k_activated_landmarks(m, ref, k) == oracle


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 68), st.floats(0.01, 100), st.floats(-50, 50))
def test_topk_size_and_affine_invariance(seed, k, scale, offset):
    rng = np.random.default_rng(seed)
    m = rng.uniform(size=(14, 14))
    ref = random_shape(rng)
    top = top_k_activated_landmarks(m, ref, k, size=224)
    assert len(top) == k
    assert top_k_activated_landmarks(scale * m + offset, ref, k, size=224) == top


def test_topk_rejects_bad_k(face):
    with pytest.raises(ValidationError):
        top_k_activated_landmarks(np.ones((4, 4)), face, 0)


def test_related_landmark_counts():
    counts = {e: len(related_landmarks(e)) for e in EXPRESSIONS}
    assert counts == {"happiness": 12, "sadness": 18, "surprise": 29, "fear": 33, "disgust": 20, "anger": 36}
    assert set(AU_TABLE) == set(EXPRESSIONS)


def test_overlap_extremes():
    rel = related_landmarks("fear")
    assert au_overlap_accuracy(set(rel), "fear") == 1.0
    others = set(range(68)) - rel
    assert au_overlap_accuracy(set(sorted(others)[: len(rel)]), EmotionLabel.from_name("fear")) == 0.0


def test_overlap_neutral_and_k_mismatch():
    with pytest.raises(ValidationError, match="neutral"):
        au_overlap_accuracy({0}, "neutral")
    with pytest.raises(ValidationError):
        au_overlap_accuracy({0, 1}, "happiness")


@settings(max_examples=50)
@given(st.sampled_from(EXPRESSIONS), st.randoms(use_true_random=False))
def test_overlap_is_rational_with_related_denominator(emotion, r):
    rel = related_landmarks(emotion)
    top = set(r.sample(range(68), len(rel)))
    v = au_overlap_accuracy(top, emotion)
    assert Fraction(v).limit_denominator(len(rel)) * len(rel) == len(top & rel)


def test_reported_average_columns():
    assert np.mean(REPORTED_4A) == pytest.approx(0.474, abs=1e-3)
    assert np.mean(REPORTED_4B) == pytest.approx(0.464, abs=1e-3)


def test_overlay_zero_map_is_gray(rng):
    img = rng.uniform(0, 1, size=(224, 224))
    img[0, 0], img[0, 1] = 0, 1
    out = render_overlay(img, np.zeros((28, 28)))
    assert out.shape == (224, 224, 3)
    gray = np.round(img * 255).astype(np.uint8)
    for c in range(3):
        assert np.array_equal(out[..., c], gray)


def test_overlay_peak_location(tmp_path):
    img = np.full((224, 224), 0.5)
    img[0, 0] = 0.0
    m = np.zeros((28, 28))
    m[9, 20] = 1.0
    render_overlay(img, m, path=tmp_path / "o.png")
    written = np.asarray(Image.open(tmp_path / "o.png")).astype(int)
    heat = written[..., 0] - written[..., 2]
    y, x = np.unravel_index(np.argmax(heat), heat.shape)
    # cell (9, 20) of a 28-grid covers pixels 72..79 x 160..167
    assert 72 <= y < 80 and 160 <= x < 168


def test_analyze_report_schema(model, rng, tmp_path, face):
    n = 21
    imgs = rng.normal(size=(n, 32, 32))
    lms = np.stack([face * 32 / 224 + rng.normal(0, 0.2, size=(68, 2)) for _ in range(n)])
    labels = np.arange(n) % 7
    results = analyze(model, imgs, lms, labels, epsilon=2.0)
    assert len(results) == 12
    path = write_report(tmp_path / "r.csv", results)
    lines = path.read_text().splitlines()
    assert lines[0] == "emotion,layer,k,overlap,n_images"
    assert len(lines) == 1 + 12 + 2
    avgs = layer_averages(results)
    for layer in ("conv4a", "conv4b"):
        six = [r.overlap for r in results if r.layer == layer]
        assert avgs[layer] == pytest.approx(sum(six) / 6)


def test_analyze_needs_seven_classes(rng, face):
    m3 = EmotionalDAN(3, 1, 32, width=2)
    with pytest.raises(ValidationError):
        analyze(m3, rng.normal(size=(2, 32, 32)), np.stack([face] * 2), [0, 1])
