"""Acceptance gate: one test per criterion; the terminal summary prints PASS/FAIL per criterion."""

import math
import os
import time
import warnings

import numpy as np
import pytest
import torch

import diffinv.runner as runner_mod
from diffinv.anchoring import hard_prompt_invert
from diffinv.backends import MockBackend, TracingBackend
from diffinv.cli import EXIT_OK, main
from diffinv.config import RunConfig, with_overrides
from diffinv.core import Delta, Provenance, cosine_alignment_loss, image_delta, slerp, text_delta
from diffinv.core import cosine
from diffinv.dataset import TripletImages, read_manifest, read_triplets, sample_triplets
from diffinv.evalharness import directional_score
from diffinv.inversion import (
    InversionConfig,
    InversionContext,
    clip_representation,
    init_diff_tokens,
    negate,
    optimize,
    sample_draws,
    token_consistency_loss,
)
from diffinv.runner import Runner, ablation_sweep
from tests.conftest import make_dataset

criterion = pytest.mark.criterion


def _unit(gen, d):
    v = torch.randn(d, generator=gen, dtype=torch.float64)
    return v / torch.linalg.vector_norm(v)


def _context(backend, seed, config):
    rng = np.random.default_rng(seed)
    A, Ap = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    res = optimize(A, Ap, InversionConfig(iterations=0, n_tokens=config.n_tokens), backend)
    ctx = InversionContext(backend, backend.encode_latent(A), backend.encode_latent(Ap), res.anchors[0], res.anchors[1],
                           res.deltas["interpolated"], config)
    return ctx, A, Ap


def _tokens(values):
    d = init_diff_tokens(values.shape[0], values.shape[1])
    with torch.no_grad():
        d.embeddings.copy_(values)
    return d


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(1, "slerp endpoints, unit norm, orthogonal midpoint, continuity (1000 pairs, < 5 s)")
def test_slerp_suite():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(2024)
    D = lambda v: Delta(v, Provenance.IMAGE)
    for _ in range(1000):
        u, v = _unit(gen, 16), _unit(gen, 16)
        alpha = float(torch.rand((), generator=gen, dtype=torch.float64))
        assert float((slerp(D(u), D(v), 0.0).direction - u).abs().max()) <= 1e-6
        assert float((slerp(D(u), D(v), 1.0).direction - v).abs().max()) <= 1e-6
        mid = slerp(D(u), D(v), alpha)
        assert mid.fallback or abs(mid.norm() - 1.0) <= 1e-6
        a = min(alpha, 1 - 1e-5)
        step = slerp(D(u), D(v), a + 1e-5).direction - slerp(D(u), D(v), a).direction
        assert float(torch.linalg.vector_norm(step)) < 1e-4
    e0, e1 = torch.eye(16, dtype=torch.float64)[:2]
    out = slerp(D(e0), D(e1), 0.5).direction
    assert float((out - (math.sqrt(2) / 2) * (e0 + e1)).abs().max()) <= 1e-6
    assert time.perf_counter() - start < 5.0


@criterion(2, "image/text delta antisymmetry, exact, 1000 pairs")
def test_delta_antisymmetry():
    gen = torch.Generator().manual_seed(7)
    for _ in range(1000):
        a = torch.randn(16, generator=gen, dtype=torch.float64)
        b = torch.randn(16, generator=gen, dtype=torch.float64)
        for fn in (image_delta, text_delta):
            assert torch.equal(fn(a, b).direction, -fn(b, a).direction)


@criterion(3, "zero-init tokens exact; step-0 alignment term is 1 under the zero-vector convention")
def test_zero_initialization():
    backend = MockBackend(seed=0)
    d = init_diff_tokens(5, 8)
    assert d.embeddings.shape == (5, 8)
    assert torch.count_nonzero(d.embeddings.detach()) == 0
    zero_rep = torch.zeros(backend.d_joint, dtype=torch.float64, requires_grad=True)
    ctx, _, _ = _context(backend, 0, InversionConfig())
    loss = cosine_alignment_loss(zero_rep, ctx.d_inter)
    loss.backward()
    assert float(loss.detach()) == 1.0 and torch.count_nonzero(zero_rep.grad) == 0
    # the bridge that maps zero tokens to the zero vector hits the convention on the real step-0 path
    ctx.config = InversionConfig(clip_bridge="meanpool_project")
    draws = sample_draws(torch.Generator().manual_seed(0), (0, backend.schedule.T), backend.latent_shape)
    total, l_tc, l_clip = ctx.loss(d, draws)
    assert float(l_clip.detach()) == 1.0
    assert math.isfinite(float(total.detach()))
    # the default bridge is finite at step 0 too
    ctx.config = InversionConfig()
    assert math.isfinite(float(ctx.loss(d, draws)[2].detach()))


@criterion(4, "analytic gradient vs central differences (h=1e-4), rel err < 1e-3, n=5, d_tok=8, < 30 s")
def test_gradient_check():
    start = time.perf_counter()
    backend = MockBackend(seed=0, d_tok=8)
    ctx, _, _ = _context(backend, 3, InversionConfig())
    base = 0.3 * torch.randn(5, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    draws = sample_draws(torch.Generator().manual_seed(9), (0, backend.schedule.T), backend.latent_shape)
    d = _tokens(base)
    (grad,) = torch.autograd.grad(ctx.loss(d, draws)[0], d.embeddings)
    h = 1e-4
    worst = 0.0
    for idx in np.ndindex(5, 8):
        plus, minus = base.clone(), base.clone()
        plus[idx] += h
        minus[idx] -= h
        fd = (float(ctx.loss(_tokens(plus), draws)[0].detach()) - float(ctx.loss(_tokens(minus), draws)[0].detach())) / (2 * h)
        a = float(grad[idx])
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-12))
    assert worst < 1e-3, worst
    assert time.perf_counter() - start < 30.0


@criterion(5, "trace rows satisfy L_total = 0.01 L_tc + 6 L_clip exactly (default config)")
def test_loss_composition(tmp_path):
    rng = np.random.default_rng(0)
    res = optimize(rng.random((8, 8, 3)), rng.random((8, 8, 3)), InversionConfig(), MockBackend(seed=0))
    assert len(res.trace) == 500
    for row in res.trace:
        assert row.l_total == 0.01 * row.l_tc + 6 * row.l_clip
    # and the values survive the CSV round trip unchanged
    runner_mod.write_trace(res.trace, tmp_path / "trace.csv")
    for row in runner_mod.read_trace(tmp_path / "trace.csv"):
        assert row.l_total == 0.01 * row.l_tc + 6 * row.l_clip


@criterion(6, "token consistency loss invariant under (A<->A', D -> -D) with mirrored draws, <= 1e-6")
def test_role_symmetry():
    backend = MockBackend(seed=0)
    for seed in range(20):
        ctx, _, _ = _context(backend, seed, InversionConfig())
        d = _tokens(0.5 * torch.randn(5, 8, generator=torch.Generator().manual_seed(seed), dtype=torch.float64))
        draws = sample_draws(torch.Generator().manual_seed(100 + seed), (0, backend.schedule.T), backend.latent_shape)
        pA, pAp = ctx.anchor_A.embeddings, ctx.anchor_Aprime.embeddings
        fwd = token_consistency_loss(ctx.z_A, ctx.z_Aprime, pA, pAp, d, backend, draws)
        rev = token_consistency_loss(ctx.z_Aprime, ctx.z_A, pAp, pA, negate(d), backend, draws.mirrored())
        assert abs(float(fwd.detach()) - float(rev.detach())) <= 1e-6


@criterion(7, "optimizer within 1e-3 of a 200x200 grid minimum over [-3,3]^2 (n=1, d_tok=2, lambda_tc=0, < 60 s)")
def test_optimizer_oracle():
    start = time.perf_counter()
    backend = MockBackend(seed=0, d_tok=2)
    W, b = backend.W_txt.numpy(), backend.b_txt.numpy()
    axis = np.linspace(-3.0, 3.0, 200)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([X.ravel(), Y.ravel()], axis=1)
    reps = b[None] + grid @ W.T

    # the grid is only an oracle when its minimizer is interior; take the first seeded pair where it is
    for seed in range(200):
        rng = np.random.default_rng(seed)
        A, Ap = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        target = optimize(A, Ap, InversionConfig(n_tokens=1, iterations=0), backend).deltas["interpolated"]
        t = target.direction.numpy()
        losses = 6.0 * (1.0 - reps @ t / (np.linalg.norm(reps, axis=1) * np.linalg.norm(t)))
        best = int(np.argmin(losses))
        if np.abs(grid[best]).max() < 3.0 - 2 * (axis[1] - axis[0]):
            break
    else:
        pytest.fail("no seeded pair with an interior grid minimum")

    cfg = InversionConfig(n_tokens=1, lambda_tc=0.0, iterations=1000, learning_rate=0.1, seed=seed)
    res = optimize(A, Ap, cfg, backend)
    final = 6.0 * float(cosine_alignment_loss(clip_representation(res.tokens, backend).detach(), res.deltas["interpolated"]))
    assert abs(final - losses[best]) <= 1e-3, (final, losses[best])
    assert time.perf_counter() - start < 60.0


@criterion(8, "single-token hard-prompt inversion matches exhaustive argmax over V=32 on 20 images")
def test_pez_oracle():
    backend = MockBackend(seed=0)
    rng = np.random.default_rng(99)
    hits = 0
    for _ in range(20):
        img = rng.random((8, 8, 3))
        target = backend.encode_image(img)
        sims = [float(cosine(backend.encode_text([k]), target)) for k in range(backend.vocab.size)]
        anchor = hard_prompt_invert(img, length=1, iters=200, backend=backend)
        hits += anchor.token_ids == [int(np.argmax(sims))]
    assert hits == 20


@criterion(9, "directional score: +1 / -1 / pair-role symmetry / hand-computed mock case to 1e-6")
def test_directional_score_sanity():
    backend = MockBackend(seed=0)
    enc = backend.encode_image
    rng = np.random.default_rng(4)
    for _ in range(10):
        A, Ap, B, Bp = (rng.random((8, 8, 3)) for _ in range(4))
        assert abs(directional_score(A, Ap, A, Ap, enc).value - 1.0) <= 1e-6
        assert abs(directional_score(A, Ap, Ap, A, enc).value + 1.0) <= 1e-6
        assert abs(directional_score(A, Ap, B, Bp, enc).value - directional_score(B, Bp, A, Ap, enc).value) <= 1e-6
    A, Ap, B, Bp = (rng.random((8, 8, 3)) for _ in range(4))
    W = backend.W_img.numpy()
    u = W @ (Ap - A).ravel()
    v = W @ (Bp - B).ravel()
    expected = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    assert abs(directional_score(A, Ap, B, Bp, enc).value - expected) <= 1e-6


@criterion(10, "cmd_run on 3 synthetic triplets twice under one seed gives byte-identical trees (< 60 s)")
def test_end_to_end_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("DIFFINV_CACHE", raising=False)
    make_dataset(tmp_path / "data", ["warm", "warm", "cold", "cold", "blur", "blur"], seed=3)
    triplets = tmp_path / "triplets.jsonl"
    assert main(["sample", str(tmp_path / "data"), "--count", "3", "--out", str(triplets)]) == EXIT_OK
    assert len(read_triplets(triplets)) == 3
    start = time.perf_counter()
    for out in ("first", "second"):
        assert main(["run", str(triplets), "--seed", "11", "--output-dir", str(tmp_path / out)]) == EXIT_OK
    elapsed = time.perf_counter() - start
    first, second = _tree(tmp_path / "first"), _tree(tmp_path / "second")
    assert first and first == second
    assert sum(name.endswith("bprime.png") for name in first) == 3
    assert elapsed < 60.0


@criterion(11, "sampler: B shares A's exact instruction, B != A, singleton pairs skipped and counted")
def test_dataset_sampler(tmp_path):
    instructions = ["add snow", "add snow", "add snow", "Add snow", "add snow ", "make it night", "make it night", "solo"]
    root = make_dataset(tmp_path / "d", instructions)
    pairs = {p.id: p for p in read_manifest(root)}
    for seed in range(10):
        triplets, summary = sample_triplets(root, 100, seed=seed)
        assert summary.skipped_singletons == 3
        assert summary.returned == len(triplets) == 5
        for t in triplets:
            a_id, b_id = t.id.split("__")
            assert a_id != b_id and t.path_B != t.path_A
            assert pairs[a_id].instruction == pairs[b_id].instruction


@criterion(12, "no backend call ever receives instruction_text")
def test_instruction_redaction(tmp_path, monkeypatch):
    monkeypatch.delenv("DIFFINV_CACHE", raising=False)
    sentinels = ["ZQX-SENTINEL-ALPHA turn it purple", "ZQX-SENTINEL-BETA add a hat"]
    make_dataset(tmp_path / "d", [sentinels[0], sentinels[0], sentinels[1], sentinels[1]])
    triplets, _ = sample_triplets(tmp_path / "d", 4, seed=0)
    assert all(t.instruction_text in sentinels for t in triplets)
    assert not any("instr" in name for name in TripletImages.__dataclass_fields__)

    traced = TracingBackend(MockBackend(seed=0))
    cfg = with_overrides(RunConfig(), output_dir=str(tmp_path / "out"), iterations=10)
    runner = Runner(cfg, backend=traced)
    runner.run(triplets)
    runner.evaluate()
    pez = Runner(with_overrides(cfg, anchor_mode="pez", run_id="pez"), backend=traced)
    pez.run(triplets[:1])
    assert traced.count() > 0

    def strings(obj):
        if isinstance(obj, str):
            yield obj
        elif isinstance(obj, (list, tuple)):
            for x in obj:
                yield from strings(x)
        elif isinstance(obj, dict):
            for x in obj.values():
                yield from strings(x)
        elif hasattr(obj, "__dict__") and not isinstance(obj, (torch.Tensor, np.ndarray)):
            yield from strings(vars(obj))

    seen = [s for call in traced.calls for s in strings((call.args, call.kwargs))]
    assert seen, "expected caption strings to reach the text encoder"
    assert not any("ZQX-SENTINEL" in s for s in seen)


@criterion(13, "ablation sweeps over alpha and n run on the mock, one tree per setting, anchors reused")
def test_ablation_plumbing(tmp_path, monkeypatch):
    monkeypatch.delenv("DIFFINV_CACHE", raising=False)
    make_dataset(tmp_path / "d", ["x", "x", "y", "y"], seed=5)
    triplets, _ = sample_triplets(tmp_path / "d", 2, seed=0)
    base = with_overrides(RunConfig(), output_dir=str(tmp_path / "out"), iterations=50, anchor_mode="pez")
    base.anchor.iters = 50

    anchor_calls = []
    real_resolve = runner_mod.resolve_anchor
    monkeypatch.setattr(runner_mod, "resolve_anchor", lambda *a, **k: anchor_calls.append(1) or real_resolve(*a, **k))
    traced = TracingBackend(MockBackend(seed=0))

    # a first setting fills the caption and anchor caches
    ablation_sweep(base, triplets, alphas=(0.0,), n_tokens=(), backend=traced)
    first_calls = (len(anchor_calls), traced.count("caption"))
    assert first_calls[0] > 0 and first_calls[1] > 0
    cache = tmp_path / "out" / "cache"
    cached = _tree(cache)

    dirs = ablation_sweep(base, triplets, backend=traced)
    assert set(dirs) == {("alpha", a) for a in (0.0, 0.25, 0.5, 0.8, 1.0)} | {("tokens", n) for n in (1, 3, 5, 7, 10)}
    assert (len(anchor_calls), traced.count("caption")) == first_calls
    assert _tree(cache) == cached
    for (key, value), run_dir in dirs.items():
        for t in triplets:
            tdir = run_dir / t.id
            for name in ("diff.tensor", "trace.csv", "bprime.png", "scores.csv", "config.snapshot"):
                assert (tdir / name).exists()
            n = np.load(tdir / "diff.tensor").shape[0]
            assert n == (value if key == "tokens" else 5)
    # distinct settings never share a tree; alpha=0.8 and n=5 are the same setting
    assert len({p for p in dirs.values()}) == 9
