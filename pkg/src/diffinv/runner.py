"""Job orchestration behind the CLI: artifacts, caches and resumability.

Layout::

    <output_dir>/<run_id>/<triplet_id>/
        diff.tensor  diff_tokens.txt  trace.csv  bprime.png  scores.csv  config.snapshot  triplet.json
    <output_dir>/<run_id>/<triplet_id>_bprime_seed<k>.png
    <cache>/captions/*.txt  <cache>/anchors/*.{txt,npy,json}

``<cache>`` is ``$DIFFINV_CACHE`` when set, else ``<output_dir>/cache``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import plotting
from .anchoring import AnchorPrompt, read_sidecar, write_sidecar
from .backends import BackendBundle, MockDinoEncoder, load_backend
from .config import ConfigError, RunConfig, from_dict
from .dataset import TripletRecord
from .evalharness import ScoreRow, batch_report, directional_score, write_report, write_scores_csv
from .images import content_hash, load_image, save_png
from .inversion import DiffTokens, DivergenceError, InversionResult, TokenMode, optimize, resolve_anchor
from .pipeline import generate_bprime

log = logging.getLogger(__name__)

DIFF_FILE = "diff.tensor"
TOKENS_FILE = "diff_tokens.txt"
TRACE_FILE = "trace.csv"
BPRIME_FILE = "bprime.png"
SCORES_FILE = "scores.csv"
SNAPSHOT_FILE = "config.snapshot"
TRIPLET_FILE = "triplet.json"
TRACE_FIELDS = ("iteration", "L_tc", "L_clip", "L_total")


class MissingArtifact(FileNotFoundError):
    pass


class ConfigMismatch(ConfigError):
    pass


def _sha(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()


def write_trace(trace, path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in trace:
            w.writerow([r.iteration, repr(r.l_tc), repr(r.l_clip), repr(r.l_total)])
    return Path(path)


def read_trace(path):
    from .inversion import TraceRow

    with open(path, newline="", encoding="utf-8") as fh:
        return [
            TraceRow(int(r["iteration"]), float(r["L_tc"]), float(r["L_clip"]), float(r["L_total"]))
            for r in csv.DictReader(fh)
        ]


def save_diff(tokens: DiffTokens, path) -> Path:
    with open(path, "wb") as fh:
        np.save(fh, tokens.embeddings.detach().cpu().numpy())
    return Path(path)


def load_diff(path, mode: str = "soft", dtype=torch.float64) -> DiffTokens:
    path = Path(path)
    if path.is_dir():
        path = path / DIFF_FILE
    if not path.exists():
        raise MissingArtifact(f"difference tokens not found: {path}")
    emb = torch.as_tensor(np.load(path), dtype=dtype)
    return DiffTokens(emb, TokenMode(mode))


@dataclass
class Runner:
    """Runs invert / generate / score for triplets under one :class:`RunConfig`.

    The backend is built lazily, so a fully cached run never constructs one.
    """

    config: RunConfig
    backend: Optional[BackendBundle] = None
    backend_factory: Optional[Callable[[RunConfig], BackendBundle]] = None
    force: bool = False
    _dino: object = field(default=None, repr=False)

    # -- plumbing -----------------------------------------------------------------
    def get_backend(self) -> BackendBundle:
        if self.backend is None:
            if self.backend_factory is not None:
                self.backend = self.backend_factory(self.config)
            else:
                b = self.config.backend
                self.backend = load_backend(b.name, b.mock_seed, b.checkpoints, b.device)
        return self.backend

    @property
    def run_dir(self) -> Path:
        return self.config.run_dir()

    @property
    def cache_dir(self) -> Path:
        env = os.environ.get("DIFFINV_CACHE")
        return Path(env) if env else Path(self.config.output_dir) / "cache"

    def triplet_dir(self, rec: TripletRecord) -> Path:
        return self.run_dir / rec.id

    def _backend_key(self) -> str:
        b = self.config.backend
        return _sha(b.name, b.mock_seed, b.checkpoints)

    def _prepare_dir(self, tdir: Path) -> None:
        """Create the triplet dir, or verify its config snapshot matches."""
        snap = tdir / SNAPSHOT_FILE
        if snap.exists():
            recorded = json.loads(snap.read_text(encoding="utf-8")).get("config_hash")
            if recorded == self.config.hash():
                return
            if not self.force:
                raise ConfigMismatch(
                    f"{tdir} was produced with config {recorded[:10]}, current is {self.config.hash()[:10]}; use --force to overwrite"
                )
            shutil.rmtree(tdir)
        tdir.mkdir(parents=True, exist_ok=True)
        snap.write_text(self.config.snapshot(), encoding="utf-8")

    def _write_record(self, rec: TripletRecord, tdir: Path) -> None:
        d = rec.to_json()
        d.pop("instruction_text", None)
        (tdir / TRIPLET_FILE).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # -- cached captions and anchors ----------------------------------------------------
    def caption_for(self, image, supplied: Optional[str]) -> str:
        if supplied:
            return supplied
        path = self.cache_dir / "captions" / f"{_sha(self._backend_key(), content_hash(image))[:24]}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8").rstrip("\n")
        text = self.get_backend().caption(image)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
        return text

    def _caption(self, rec: TripletRecord, image, supplied: Optional[str]) -> str:
        if not supplied and self.config.anchor.mode == "user":
            raise ConfigError(f"anchor.mode = 'user' but triplet {rec.id} lacks a caption")
        return self.caption_for(image, supplied)

    def anchor_for(self, image, caption: Optional[str]) -> AnchorPrompt:
        a = self.config.anchor
        key = _sha(self._backend_key(), a.mode, a.options() if a.mode == "pez" else None,
                   content_hash(image), caption if a.mode != "pez" else None)
        stem = self.cache_dir / "anchors" / key[:24]
        if stem.with_suffix(".npy").exists():
            return read_sidecar(stem)
        anchor = resolve_anchor(image, a.mode, self.get_backend(), caption, **a.options())
        write_sidecar(anchor, stem)
        return anchor

    # -- stages --------------------------------------------------------------------------
    def invert(self, rec: TripletRecord) -> Path:
        tdir = self.triplet_dir(rec)
        self._prepare_dir(tdir)
        if all((tdir / f).exists() for f in (DIFF_FILE, TOKENS_FILE, TRACE_FILE)):
            return tdir
        self._write_record(rec, tdir)
        view = rec.model_view()
        cap_A = self._caption(rec, view.A, view.captions[0])
        cap_Ap = self._caption(rec, view.Aprime, view.captions[1])
        anchors = (self.anchor_for(view.A, cap_A), self.anchor_for(view.Aprime, cap_Ap))
        backend = self.get_backend()
        try:
            result = optimize(view.A, view.Aprime, self.config.optim, backend, captions=(cap_A, cap_Ap), anchors=anchors)
        except DivergenceError as exc:
            self._write_inversion(tdir, exc.result)
            (tdir / "diagnostic.txt").write_text(str(exc) + "\n", encoding="utf-8")
            raise
        self._write_inversion(tdir, result)
        return tdir

    def _write_inversion(self, tdir: Path, result: InversionResult) -> None:
        save_diff(result.tokens, tdir / DIFF_FILE)
        write_trace(result.trace, tdir / TRACE_FILE)
        lines = [
            f"ids: {' '.join(str(i) for i in result.projected_ids)}",
            f"tokens: {result.projected_tokens}",
            f"caption_A: {result.captions[0]}",
            f"caption_Aprime: {result.captions[1]}",
            f"anchor_A: {result.anchors[0].text}",
            f"anchor_Aprime: {result.anchors[1].text}",
        ] + [f"note: {n}" for n in result.notes]
        (tdir / TOKENS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def generate(self, rec: TripletRecord, diff_path=None) -> Path:
        tdir = self.triplet_dir(rec)
        self._prepare_dir(tdir)
        out = tdir / BPRIME_FILE
        seed = self.config.pipeline.seed
        flat = self.run_dir / f"{rec.id}_bprime_seed{seed}.png"
        if out.exists() and flat.exists():
            return out
        self._write_record(rec, tdir)
        d = load_diff(diff_path or tdir, self.config.optim.mode)
        view = rec.model_view()
        caption_B = self._caption(rec, view.B, view.captions[2])
        prompt_B = self.anchor_for(view.B, caption_B)
        gen = generate_bprime(view.B, d, self.get_backend(), self.config.pipeline, prompt_B=prompt_B)
        save_png(gen.image, out)
        shutil.copyfile(out, flat)
        if gen.fallback:
            (tdir / "generation_note.txt").write_text("backend lacks inversion; used noise-injection img2img\n", encoding="utf-8")
        return out

    def encoders(self):
        backend = self.get_backend()
        clip = backend.encode_image
        ids = {"clip": f"{backend.name}:image_encoder"}
        dino = None
        if self.config.eval.dino:
            if self._dino is None:
                if backend.name == "mock":
                    self._dino = MockDinoEncoder(self.config.backend.mock_seed)
                else:
                    from .backends.stable_diffusion import DinoEncoder

                    self._dino = DinoEncoder(self.config.backend.checkpoints.get("dino", "facebook/dinov2-base"), self.config.backend.device)
            dino = self._dino
            ids["dino"] = dino.name
        return clip, dino, ids

    def score(self, rec: TripletRecord) -> Path:
        tdir = self.triplet_dir(rec)
        out = tdir / SCORES_FILE
        if out.exists():
            return out
        bprime = tdir / BPRIME_FILE
        if not bprime.exists():
            raise MissingArtifact(f"no {BPRIME_FILE} in {tdir}; run generate first")
        view = rec.model_view()
        Bp = load_image(bprime)
        clip, dino, _ = self.encoders()
        c = directional_score(view.A, view.Aprime, view.B, Bp, clip)
        dv = directional_score(view.A, view.Aprime, view.B, Bp, dino).value if dino is not None else None
        return write_scores_csv([ScoreRow(rec.id, c.value, dv)], out)

    def run_one(self, rec: TripletRecord) -> Path:
        self.invert(rec)
        self.generate(rec)
        self.score(rec)
        return self.triplet_dir(rec)

    def run(self, triplets: list[TripletRecord]) -> list[Path]:
        workers = max(1, int(self.config.workers))
        if workers == 1 or len(triplets) <= 1:
            return [self.run_one(t) for t in triplets]
        # one private backend per worker process
        payload = self.config.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_job, payload, t.to_json(), self.force) for t in triplets]
            return [Path(f.result()) for f in futures]

    # -- whole-run reports ------------------------------------------------------------------
    def completed_records(self, run_dir=None) -> list[tuple[TripletRecord, Path]]:
        run_dir = Path(run_dir) if run_dir is not None else self.run_dir
        if not run_dir.is_dir():
            raise MissingArtifact(f"run directory not found: {run_dir}")
        out = []
        for tdir in sorted(p for p in run_dir.iterdir() if p.is_dir()):
            rec_path = tdir / TRIPLET_FILE
            if rec_path.exists() and (tdir / BPRIME_FILE).exists():
                out.append((TripletRecord.from_json(json.loads(rec_path.read_text(encoding="utf-8"))), tdir))
        if not out:
            raise MissingArtifact(f"no completed triplets under {run_dir}")
        return out

    def evaluate(self, run_dir=None) -> dict[str, Path]:
        run_dir = Path(run_dir) if run_dir is not None else self.run_dir
        done = self.completed_records(run_dir)
        clip, dino, ids = self.encoders()
        items = (
            (rec.id, load_image(rec.path_A), load_image(rec.path_Aprime), load_image(rec.path_B), load_image(tdir / BPRIME_FILE))
            for rec, tdir in done
        )
        report = batch_report(items, clip, dino, ids)
        paths = write_report(report, run_dir)
        log.info("\n%s", report.table())
        return paths


def render_grids(run_dir, rows_per_page: int = 8) -> list[Path]:
    """A | A' | B | B' pages for a run plus one loss-trace figure per triplet."""
    run_dir = Path(run_dir)
    done = Runner(RunConfig()).completed_records(run_dir)
    rows, titles, paths = [], [], []
    for rec, tdir in done:
        rows.append([load_image(p) for p in (rec.path_A, rec.path_Aprime, rec.path_B, tdir / BPRIME_FILE)])
        titles.append(rec.id)
        if (tdir / TRACE_FILE).exists():
            trace = read_trace(tdir / TRACE_FILE)
            if trace:
                paths.append(plotting.loss_trace_figure(trace, tdir / "trace.png"))
    pages = [rows[i : i + rows_per_page] for i in range(0, len(rows), rows_per_page)]
    for k, page in enumerate(pages):
        name = "grid.png" if len(pages) == 1 else f"grid_{k:03d}.png"
        paths.append(plotting.analogy_grid(page, run_dir / name, titles[k * rows_per_page : (k + 1) * rows_per_page]))
    return paths


def _run_job(config_dict: dict, triplet_json: dict, force: bool) -> str:
    runner = Runner(from_dict(config_dict), force=force)
    return str(runner.run_one(TripletRecord.from_json(triplet_json)))


def ablation_sweep(
    base: RunConfig,
    triplets: list[TripletRecord],
    alphas=(0.0, 0.25, 0.5, 0.8, 1.0),
    n_tokens=(1, 3, 5, 7, 10),
    backend: Optional[BackendBundle] = None,
) -> dict[tuple[str, float], Path]:
    """One run per alpha (at the base token count) and per token count (at the base alpha).

    Each setting gets its own run id (derived from its config hash); captions and
    anchors are shared through the cache.
    """
    from .config import with_overrides

    out = {}
    for key, values in (("alpha", alphas), ("tokens", n_tokens)):
        for v in values:
            run_id = f"{base.run_id}-{key}{v}" if base.run_id else ""
            cfg = with_overrides(base, run_id=run_id, **{key: v})
            runner = Runner(cfg, backend=backend)
            runner.run(triplets)
            out[(key, v)] = runner.run_dir
    return out
