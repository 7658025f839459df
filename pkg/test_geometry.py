"""Similarity estimation, inversion, warping and face alignment"""

import numpy as np
import pytest
import torch

from conftest import directional_fd_check, random_image, smooth_image, template_landmarks
from src.restoration.geometry import (
    ARCFACE_112,
    FaceTemplate,
    Landmarks5,
    SimilarityTransform,
    align_face,
    estimate_similarity,
    invert_transform,
    landmark_box,
    warp_bilinear,
)
from src.restoration.synth import synth_portrait
from src.restoration.types import DegenerateLandmarks, ShapeError


def random_transform(rng: np.random.Generator) -> SimilarityTransform:
    return SimilarityTransform.from_params(
        scale=rng.uniform(0.2, 5.0),
        angle=rng.uniform(-np.pi, np.pi),
        tx=rng.uniform(-100, 100),
        ty=rng.uniform(-100, 100),
    )


def normal_equation_solution(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least squares over (a, b, tx, ty) with x' = a x - b y + tx, y' = b x + a y + ty"""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, -y, 1.0, 0.0])
        rhs.append(u)
        rows.append([y, x, 0.0, 1.0])
        rhs.append(v)
    a = np.asarray(rows)
    return np.linalg.solve(a.T @ a, a.T @ np.asarray(rhs))


def test_landmarks_validation():
    with pytest.raises(ValueError):
        Landmarks5(points=[(1.0, 1.0)] * 5)
    with pytest.raises(ValueError):
        Landmarks5(points=[(0.0, 0.0)] * 4)
    with pytest.raises(ValueError):
        Landmarks5(points=[(float("nan"), 0.0)] + [(float(i), 1.0) for i in range(4)])

    lm = template_landmarks(112)
    assert Landmarks5.from_flat(lm.to_flat()) == lm
    assert lm.eye_distance == pytest.approx(np.linalg.norm(ARCFACE_112[1] - ARCFACE_112[0]))


def test_similarity_transform_form():
    with pytest.raises(ValueError):
        SimilarityTransform(matrix=[[1.0, 0.5, 0.0], [0.0, 1.0, 0.0]])
    with pytest.raises(ValueError):
        SimilarityTransform(matrix=[[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
    t = SimilarityTransform.from_params(2.0, 0.3, 5.0, -1.0)
    assert t.scale == pytest.approx(2.0)
    assert t.angle == pytest.approx(0.3)
    assert t.translation == pytest.approx((5.0, -1.0))


def test_face_template():
    tpl = FaceTemplate.arcface(128)
    assert tpl.side == 128
    np.testing.assert_allclose(tpl.points.as_array(), ARCFACE_112 * 128 / 112)
    with pytest.raises(ValueError):
        FaceTemplate(points=Landmarks5.from_array(ARCFACE_112), side=64)


def test_estimate_identity():
    pts = FaceTemplate.arcface(112).points
    t = estimate_similarity(pts, pts)
    np.testing.assert_allclose(t.array, SimilarityTransform.identity().array, atol=1e-9)


def test_estimate_scaled_shifted_template():
    dst = FaceTemplate.arcface(112).points.as_array()
    src = dst * 2.0 + np.array([10.0, 20.0])
    t = estimate_similarity(src, dst)
    assert np.abs(t.apply(src) - dst).max() < 1e-9


def test_estimate_recovers_random_transforms(rng):
    base = ARCFACE_112
    for _ in range(1000):
        truth = random_transform(rng)
        src = base + rng.normal(0.0, 10.0, size=base.shape)
        got = estimate_similarity(src, truth.apply(src))
        assert np.abs(got.array - truth.array).max() < 1e-8


def test_estimate_matches_normal_equations(rng):
    for _ in range(50):
        src = rng.uniform(0, 200, size=(5, 2))
        dst = rng.uniform(0, 200, size=(5, 2))
        a, b, tx, ty = normal_equation_solution(src, dst)
        got = estimate_similarity(src, dst).array
        expected = np.array([[a, -b, tx], [b, a, ty]])
        assert np.abs(got - expected).max() < 1e-8


def test_estimate_degenerate():
    same = [(3.0, 4.0)] * 5
    with pytest.raises(DegenerateLandmarks):
        estimate_similarity(np.array(same), ARCFACE_112)
    with pytest.raises(ShapeError):
        estimate_similarity(ARCFACE_112, ARCFACE_112[:4])


def test_invert_transform(rng):
    ident = SimilarityTransform.identity()
    np.testing.assert_allclose(invert_transform(ident).array, ident.array, atol=1e-12)

    inv = invert_transform(SimilarityTransform.from_params(2.0, 0.0))
    assert inv.scale == pytest.approx(0.5)
    assert inv.angle == pytest.approx(0.0)
    assert inv.translation == pytest.approx((0.0, 0.0))

    for _ in range(20):
        t = random_transform(rng)
        pts = rng.uniform(-500, 500, size=(100, 2))
        back = invert_transform(t).apply(t.apply(pts))
        assert np.abs(back - pts).max() < 1e-9
        m = invert_transform(t).array
        assert abs(m[0, 0] - m[1, 1]) < 1e-9 and abs(m[0, 1] + m[1, 0]) < 1e-9


def test_warp_identity_and_constant():
    img = random_image(1, size=32)
    out = warp_bilinear(img, SimilarityTransform.identity(), 32, 32)
    assert torch.allclose(out, img, atol=1e-12)

    const = torch.full((3, 40, 40), 0.5, dtype=torch.float64)
    t = SimilarityTransform.from_params(1.3, 0.4, -7.0, 12.0)
    out = warp_bilinear(const, t, 25, 31)
    assert out.shape == (3, 25, 31)
    assert torch.allclose(out, torch.full_like(out, 0.5), atol=1e-12)


def test_warp_value_range(rng):
    img = random_image(2, size=48)
    for _ in range(5):
        out = warp_bilinear(img, random_transform(rng), 30, 30)
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12


def test_warp_errors():
    with pytest.raises(ShapeError):
        warp_bilinear(torch.zeros(4, 8, 8), SimilarityTransform.identity(), 8, 8)
    with pytest.raises(ShapeError):
        warp_bilinear(torch.zeros(3, 8, 8), SimilarityTransform.identity(), 1, 8)


def test_warp_gradient_wrt_image():
    t = SimilarityTransform.from_params(0.83, 0.21, 3.37, 2.71)
    weights = random_image(3, size=20)

    def f(img):
        return (warp_bilinear(img, t, 20, 20) * weights).sum()

    assert directional_fd_check(f, random_image(4, size=24), directions=5, coords=50) < 1e-4


def test_warp_gradient_wrt_transform():
    img = smooth_image(5, size=32)
    theta0 = torch.tensor([[0.91, -0.13, 3.37], [0.13, 0.91, 2.71]], dtype=torch.float64)

    def f(theta):
        return warp_bilinear(img, theta, 16, 16).pow(2).sum()

    assert directional_fd_check(f, theta0, directions=3, coords=6, h=1e-7) < 1e-4


def test_align_identity_crop():
    portrait = random_image(6, size=96)
    tpl = FaceTemplate.arcface(64)
    out = align_face(portrait, tpl.points, tpl)
    assert torch.allclose(out, portrait[:, :64, :64], atol=1e-9)


def test_align_render_round_trip():
    """A face placed by a known transform aligns back onto its canonical patch"""
    tpl = FaceTemplate.arcface(64)
    face = smooth_image(7, size=64)
    place = SimilarityTransform.from_params(1.4, 0.25, 30.0, 18.0)
    portrait = warp_bilinear(face, invert_transform(place), 160, 160)
    lm = Landmarks5.from_array(place.apply(tpl.points.as_array()))
    aligned = align_face(portrait, lm, tpl)
    assert (aligned - face)[:, 4:-4, 4:-4].abs().mean() < 0.02


def test_align_idempotent_on_synthetic_portrait():
    img, lm = synth_portrait(11, 12, size=128)
    tpl = FaceTemplate.arcface(64)
    once = align_face(img.double(), lm, tpl)
    twice = align_face(once, tpl.points, tpl)
    assert (once - twice).abs().mean() < 0.02


def test_align_gradient_footprint():
    tpl = FaceTemplate.arcface(32)
    lm = Landmarks5.from_array(tpl.points.as_array() * 0.7 + 9.0)
    portrait = random_image(8, size=64).requires_grad_(True)
    align_face(portrait, lm, tpl).mean().backward()
    grad = portrait.grad
    assert grad.abs().sum() > 0
    # the warp footprint lies inside the landmark-scaled crop region
    assert grad[:, 40:, :].abs().sum() == 0
    assert grad[:, :, 40:].abs().sum() == 0

    def f(x):
        return align_face(x, lm, tpl).mean()

    assert directional_fd_check(f, random_image(9, size=64), coords=20) < 1e-4


def test_align_batch_landmark_count():
    tpl = FaceTemplate.arcface(32)
    batch = random_image(10, size=64)[None].repeat(2, 1, 1, 1)
    with pytest.raises(ShapeError):
        align_face(batch, [tpl.points], tpl)


def test_landmark_box():
    lm = Landmarks5.from_array(ARCFACE_112)
    box = landmark_box(lm, 0.1, 112, 112)
    x0, y0, x1, y1 = box
    arr = ARCFACE_112
    assert x0 <= arr[:, 0].min() and x1 > arr[:, 0].max()
    assert y0 <= arr[:, 1].min() and y1 > arr[:, 1].max()
    small = landmark_box(lm, 0.1, 28, 28, scale=0.25)
    assert all(0 <= v <= 28 for v in small)
    assert landmark_box(Landmarks5.from_array(ARCFACE_112 + 500.0), 0.1, 112, 112) is None
