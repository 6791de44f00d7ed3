import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffinv.core import (
    DegenerateDelta,
    DimensionMismatch,
    Delta,
    Provenance,
    cosine_alignment_loss,
    image_delta,
    normalized,
    slerp,
    text_delta,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, 6, elements=finite)


def unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / torch.linalg.vector_norm(v)


def random_unit_pair(gen, d=16):
    return unit(torch.randn(d, generator=gen, dtype=torch.float64)), unit(torch.randn(d, generator=gen, dtype=torch.float64))


def D(v, prov=Provenance.IMAGE):
    return Delta(torch.as_tensor(v, dtype=torch.float64), prov)


def test_identical_embeddings_give_degenerate_delta():
    v = torch.arange(5, dtype=torch.float64)
    for fn in (image_delta, text_delta):
        d = fn(v, v)
        assert d.degenerate
        assert torch.count_nonzero(d.direction) == 0


def test_delta_provenance_and_arithmetic():
    a, b = torch.tensor([1.0, 2.0, 3.0]), torch.tensor([0.5, 2.0, -1.0])
    assert image_delta(a, b).provenance is Provenance.IMAGE
    assert text_delta(a, b).provenance is Provenance.TEXT
    assert torch.equal(image_delta(a, b).direction, torch.tensor([0.5, 0.0, 4.0]))
    assert not image_delta(a, b).degenerate


def test_delta_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        image_delta(torch.zeros(3), torch.zeros(4))


def test_delta_rejects_non_finite():
    with pytest.raises(ValueError):
        text_delta(torch.tensor([1.0, float("nan")]), torch.zeros(2))


def test_image_delta_matches_mock_matrix(backend, rng):
    a, a2 = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    d = image_delta(backend.encode_image(a2), backend.encode_image(a))
    expected = backend.W_img.numpy() @ (a2.reshape(-1) - a.reshape(-1))
    np.testing.assert_allclose(d.direction.numpy(), expected, atol=1e-6)


def test_text_delta_matches_mock_matrix(backend):
    ids_a, ids_b = [3, 7, 1], [3, 9, 1]
    d = text_delta(backend.encode_text(ids_b), backend.encode_text(ids_a))
    W, R, V = backend.W_txt.numpy(), backend.R_pos.numpy(), backend.vocab.embeddings.numpy()
    expected = W @ R[1] @ (V[9] - V[7])
    np.testing.assert_allclose(d.direction.numpy(), expected, atol=1e-6)


@given(vectors, vectors)
def test_delta_antisymmetry_property(a, b):
    s = image_delta(a, b).direction + image_delta(b, a).direction
    assert torch.count_nonzero(s) == 0


def test_slerp_endpoints():
    gen = torch.Generator().manual_seed(0)
    for _ in range(50):
        u, v = random_unit_pair(gen)
        u, v = 3.0 * u, 0.5 * v
        assert torch.allclose(slerp(D(u), D(v), 0.0).direction, u, atol=1e-6)
        assert torch.allclose(slerp(D(u), D(v), 1.0).direction, v, atol=1e-6)


def test_slerp_orthogonal_midpoint():
    u, v = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    out = slerp(D(u), D(v, Provenance.TEXT), 0.5)
    assert torch.allclose(out.direction, (math.sqrt(2) / 2) * (u + v), atol=1e-12)
    assert abs(out.norm() - 1.0) < 1e-12
    assert out.provenance is Provenance.INTERPOLATED and out.alpha == 0.5
    assert not out.fallback


def test_slerp_rejects_bad_input():
    u = torch.tensor([1.0, 0.0])
    with pytest.raises(ValueError):
        slerp(D(u), D(u), 1.5)
    with pytest.raises(DegenerateDelta):
        slerp(D(torch.zeros(2)), D(u), 0.5)
    with pytest.raises(DimensionMismatch):
        slerp(D(u), D(torch.ones(3)), 0.5)


def test_slerp_parallel_falls_back_to_lerp():
    u = torch.tensor([1.0, 2.0], dtype=torch.float64)
    out = slerp(D(u), D(2 * u), 0.25)
    assert out.fallback and not out.antiparallel
    assert torch.allclose(out.direction, 0.75 * u + 0.25 * 2 * u)


def test_slerp_antiparallel_warns():
    u = torch.tensor([1.0, 0.0], dtype=torch.float64)
    with pytest.warns(RuntimeWarning):
        out = slerp(D(u), D(-u), 0.3)
    assert out.fallback and out.antiparallel


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_slerp_preserves_unit_norm(seed, alpha):
    u, v = random_unit_pair(torch.Generator().manual_seed(seed), d=8)
    out = slerp(D(u), D(v), alpha)
    if not out.fallback:
        assert abs(out.norm() - 1.0) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0 - 1e-5))
def test_slerp_continuity(seed, alpha):
    u, v = random_unit_pair(torch.Generator().manual_seed(seed), d=8)
    a = slerp(D(u), D(v), alpha).direction
    b = slerp(D(u), D(v), alpha + 1e-5).direction
    assert float(torch.linalg.vector_norm(a - b)) < 1e-4


def test_slerp_swap_reverses_path():
    gen = torch.Generator().manual_seed(3)
    u, v = random_unit_pair(gen)
    for alpha in (0.1, 0.5, 0.8):
        assert torch.allclose(slerp(D(u), D(v), alpha).direction, slerp(D(v), D(u), 1 - alpha).direction, atol=1e-12)


def test_normalized():
    d = normalized(D(torch.tensor([3.0, 4.0], dtype=torch.float64)))
    assert torch.allclose(d.direction, torch.tensor([0.6, 0.8], dtype=torch.float64))
    with pytest.raises(DegenerateDelta):
        normalized(image_delta(torch.ones(2), torch.ones(2)))


def test_cosine_loss_examples():
    t = D(torch.tensor([1.0, 2.0, -1.0], dtype=torch.float64))
    assert float(cosine_alignment_loss(t.direction.clone(), t)) == pytest.approx(0.0, abs=1e-12)
    assert float(cosine_alignment_loss(-t.direction, t)) == pytest.approx(2.0, abs=1e-12)
    assert float(cosine_alignment_loss(torch.zeros(3, dtype=torch.float64), t)) == 1.0


def test_cosine_loss_zero_input_has_zero_gradient():
    t = D(torch.tensor([1.0, 2.0], dtype=torch.float64))
    x = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    loss = cosine_alignment_loss(x, t)
    loss.backward()
    assert float(loss.detach()) == 1.0
    assert torch.count_nonzero(x.grad) == 0


def test_cosine_loss_errors():
    t = D(torch.tensor([1.0, 2.0]))
    with pytest.raises(DimensionMismatch):
        cosine_alignment_loss(torch.ones(3), t)
    with pytest.raises(DegenerateDelta):
        cosine_alignment_loss(torch.ones(2), D(torch.zeros(2)))


@given(vectors, vectors, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_loss_range_and_scale_invariance(r, t, a, b):
    r, t = torch.as_tensor(r), torch.as_tensor(t)
    if float(torch.linalg.vector_norm(t)) < 1e-6 or float(torch.linalg.vector_norm(r)) < 1e-6:
        return
    base = float(cosine_alignment_loss(r, D(t)))
    assert 0.0 <= base <= 2.0
    assert float(cosine_alignment_loss(a * r, D(b * t))) == pytest.approx(base, abs=1e-9)
