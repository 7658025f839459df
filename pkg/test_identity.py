"""Embedders and the identity similarity criterion"""

import sys
import textwrap

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from conftest import FixedEmbedder, directional_fd_check, random_image, smooth_image
from src.restoration.identity import (
    ExternalEmbedder,
    IdentityEmbedding,
    ToyEmbedder,
    cosine,
    embed_identities,
    pairwise_similarity,
    similarity,
)
from src.restoration.registry import registry
from src.restoration.synth import synth_face
from src.restoration.types import ConfigError, ExternalProcessError, ShapeError, ZeroEmbedding


def test_toy_embedder_is_deterministic():
    face = smooth_image(0, size=64)
    a = ToyEmbedder().embed(face)
    b = ToyEmbedder().embed(face)
    assert a.shape == (1, 128)
    assert torch.equal(a, b)
    assert ToyEmbedder(dim=32).embed(face).shape == (1, 32)


def test_toy_embedder_ignores_brightness_offset():
    face = smooth_image(1, size=64) * 0.8
    e = ToyEmbedder()
    assert similarity(face, face + 0.1, e) == pytest.approx(1.0, abs=1e-9)


def test_toy_embedder_rejects_non_square():
    with pytest.raises(ShapeError):
        ToyEmbedder().embed(torch.zeros(3, 32, 48))


def test_cosine_range_and_symmetry(embedder):
    x = random_image(2, size=64)
    y = random_image(3, size=64)
    assert similarity(x, x, embedder) == pytest.approx(1.0)
    s = similarity(x, y, embedder)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(similarity(y, x, embedder), abs=1e-12)


def test_cosine_zero_norm():
    with pytest.raises(ZeroEmbedding):
        cosine(torch.zeros(1, 4), torch.ones(1, 4))


def test_constant_face_has_zero_embedding(embedder):
    flat = torch.full((3, 64, 64), 0.4, dtype=torch.float64)
    with pytest.raises(ZeroEmbedding):
        similarity(flat, random_image(4, size=64), embedder)


def test_absent_side_scores_zero(embedder):
    x = random_image(5, size=64)
    assert similarity(x, None, embedder) == 0.0
    assert similarity(None, x, embedder) == 0.0


def test_pairwise_similarity_with_presence(embedder):
    x = torch.stack([random_image(s, size=64) for s in (6, 7, 8)])
    y = torch.stack([random_image(s, size=64) for s in (9, 10, 11)])
    full = pairwise_similarity(x, y, embedder)
    present = torch.tensor([True, False, True])
    partial = pairwise_similarity(x, y, embedder, present)
    assert partial[1] == 0.0
    assert torch.allclose(partial[present], full[present])
    assert torch.equal(pairwise_similarity(x, None, embedder), torch.zeros(3, dtype=x.dtype))


def test_similarity_gradient(embedder):
    y = smooth_image(12, size=64)

    def f(x):
        return pairwise_similarity(x[None], y[None], embedder)[0]

    assert directional_fd_check(f, smooth_image(13, size=64), coords=20) < 1e-4


def test_cosine_of_antipodal_embeddings():
    v = [0.3, -1.2, 0.7, 2.0]
    emb = FixedEmbedder({2: v, 4: [-c for c in v]})
    flat_a = torch.full((3, 16, 16), 0.2, dtype=torch.float64)
    flat_b = torch.full((3, 16, 16), 0.4, dtype=torch.float64)
    assert similarity(flat_a, flat_b, emb) == pytest.approx(-1.0, abs=1e-12)
    assert similarity(flat_a, flat_a, emb) == pytest.approx(1.0, abs=1e-12)


def test_cosine_is_scale_invariant():
    gen = torch.Generator().manual_seed(3)
    u = torch.randn(4, 16, generator=gen, dtype=torch.float64)
    v = torch.randn(4, 16, generator=gen, dtype=torch.float64)
    scales = torch.tensor([[0.01], [1.0], [3.0], [250.0]], dtype=torch.float64)
    assert torch.allclose(cosine(u * scales, v / scales), cosine(u, v), rtol=0, atol=1e-12)


def test_synthetic_identities_separate(embedder):
    same, different = [], []
    for i in range(100):
        a, _ = synth_face(100 + i, 1000 + i, size=64)
        b, _ = synth_face(100 + i, 2000 + i, size=64)
        c, _ = synth_face(300 + i, 2000 + i, size=64)
        same.append(similarity(a, b, embedder))
        different.append(similarity(a, c, embedder))
    same, different = np.array(same), np.array(different)
    assert same.mean() > 0.8
    assert different.mean() < 0.5
    assert np.mean(same > 0.8) >= 0.9
    assert np.mean(different < 0.5) >= 0.9


def test_embed_identities(embedder):
    faces = torch.stack([smooth_image(14, size=64), smooth_image(15, size=64)])
    embedded = embed_identities(faces, embedder)
    assert [len(e.vector) for e in embedded] == [128, 128]
    direct = embedder.embed(faces).double()
    assert np.allclose(embedded[1].as_array(), direct[1].numpy(), rtol=0, atol=1e-12)
    with pytest.raises(ZeroEmbedding):
        embed_identities(torch.full((1, 3, 64, 64), 0.4, dtype=torch.float64), embedder)
    with pytest.raises(ValidationError):
        IdentityEmbedding(vector=[0.0, 0.0])
    with pytest.raises(ValidationError):
        IdentityEmbedding(vector=[1.0, float("nan")])


def _script(tmp_path, body: str) -> str:
    path = tmp_path / "embed.py"
    path.write_text(textwrap.dedent(body))
    return f"{sys.executable} {path}"


def test_external_embedder(tmp_path):
    cmd = _script(
        tmp_path,
        """
        import json, sys
        from PIL import Image
        img = Image.open(sys.argv[1]).convert("L")
        mean = sum(img.getdata()) / (img.width * img.height) / 255.0
        print(json.dumps([1.0, mean, 0.5, -0.5]))
        """,
    )
    emb = ExternalEmbedder(cmd, dim=4, timeout=60.0)
    out = emb.embed(torch.stack([smooth_image(15, size=32), smooth_image(16, size=32)]))
    assert out.shape == (2, 4)
    assert torch.allclose(out[:, 0], torch.ones(2, dtype=out.dtype))
    assert not emb.differentiable


def test_external_embedder_failures(tmp_path):
    face = smooth_image(17, size=32)
    wrong_dim = ExternalEmbedder(_script(tmp_path, "print('[1.0, 2.0]')\n"), dim=4)
    with pytest.raises(ExternalProcessError):
        wrong_dim.embed(face)

    (tmp_path / "fail.py").write_text("import sys\nsys.exit(3)\n")
    failing = ExternalEmbedder(f"{sys.executable} {tmp_path / 'fail.py'}", dim=4)
    with pytest.raises(ExternalProcessError):
        failing.embed(face)

    with pytest.raises(ExternalProcessError):
        ExternalEmbedder("", dim=4)


def test_registry_backends():
    assert isinstance(registry.create_embedder("toy", dim=16), ToyEmbedder)
    with pytest.raises(ConfigError):
        registry.create_embedder("arcface")
    available = registry.get_available_backends()
    assert {b["type"] for b in available["embedders"]} == {"toy", "external"}
    assert "toy" in {b["type"] for b in available["perceptual"]}
    assert {"none", "latent_l2"} <= {b["type"] for b in available["regularizers"]}
