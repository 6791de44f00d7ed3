"""Directional scores, report files, and judge/survey export bundles."""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import torch

from . import plotting
from .core import DEGENERATE_EPS
from .images import as_image, save_png

CSV_FIELDS = ("triplet_id", "clip_score", "dino_score")


class Score(NamedTuple):
    value: float
    degenerate: bool = False


def directional_score_from_embeddings(e_A, e_Aprime, e_B, e_Bprime) -> Score:
    """Cosine between the A->A' and B->B' embedding differences; 0 (flagged) if either is ~zero."""
    u = torch.as_tensor(e_Aprime, dtype=torch.float64) - torch.as_tensor(e_A, dtype=torch.float64)
    v = torch.as_tensor(e_Bprime, dtype=torch.float64) - torch.as_tensor(e_B, dtype=torch.float64)
    nu, nv = float(torch.linalg.vector_norm(u)), float(torch.linalg.vector_norm(v))
    if nu < DEGENERATE_EPS or nv < DEGENERATE_EPS:
        return Score(0.0, True)
    value = float(torch.dot(u, v)) / (nu * nv)
    return Score(min(1.0, max(-1.0, value)), False)


def directional_score(A, Aprime, B, Bprime, encoder: Callable) -> Score:
    with torch.no_grad():
        embs = [encoder(as_image(x)).detach().cpu() for x in (A, Aprime, B, Bprime)]
    return directional_score_from_embeddings(*embs)


@dataclass
class ScoreRow:
    triplet_id: str
    clip_score: float
    dino_score: Optional[float] = None


@dataclass
class DirectionalScoreReport:
    per_triplet: list[ScoreRow]
    mean_clip: float
    mean_dino: Optional[float]
    encoder_ids: dict[str, str] = field(default_factory=dict)
    degenerate: list[str] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: Sequence[ScoreRow], encoder_ids: Mapping[str, str], degenerate=()) -> "DirectionalScoreReport":
        rows = list(rows)
        mean_clip = float(np.mean([r.clip_score for r in rows])) if rows else float("nan")
        dino = [r.dino_score for r in rows if r.dino_score is not None]
        mean_dino = float(np.mean(dino)) if rows and len(dino) == len(rows) else None
        return cls(rows, mean_clip, mean_dino, dict(encoder_ids), list(degenerate))

    def table(self) -> str:
        lines = [f"{'triplet':<32} {'CLIP':>8} {'DINO':>8}"]
        for r in self.per_triplet:
            dino = f"{r.dino_score:8.4f}" if r.dino_score is not None else f"{'-':>8}"
            lines.append(f"{r.triplet_id:<32} {r.clip_score:8.4f} {dino}")
        dino = f"{self.mean_dino:8.4f}" if self.mean_dino is not None else f"{'-':>8}"
        lines.append(f"{'mean':<32} {self.mean_clip:8.4f} {dino}")
        return "\n".join(lines)


def batch_report(items, clip_encoder: Callable, dino_encoder: Optional[Callable] = None, encoder_ids: Optional[Mapping[str, str]] = None) -> DirectionalScoreReport:
    """``items`` yields ``(triplet_id, A, A', B, B')``."""
    rows, degenerate = [], []
    for tid, A, Ap, B, Bp in items:
        clip = directional_score(A, Ap, B, Bp, clip_encoder)
        dino = directional_score(A, Ap, B, Bp, dino_encoder) if dino_encoder is not None else None
        if clip.degenerate or (dino is not None and dino.degenerate):
            degenerate.append(tid)
        rows.append(ScoreRow(tid, clip.value, dino.value if dino is not None else None))
    return DirectionalScoreReport.from_rows(rows, encoder_ids or {}, degenerate)


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def write_scores_csv(rows: Sequence[ScoreRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r.triplet_id, _fmt(r.clip_score), _fmt(r.dino_score)])
    return path


def read_scores_csv(path) -> list[ScoreRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ScoreRow(r["triplet_id"], float(r["clip_score"]), float(r["dino_score"]) if r["dino_score"] else None)
            for r in csv.DictReader(fh)
        ]


def write_report(report: DirectionalScoreReport, out_dir, figure: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {"csv": write_scores_csv(report.per_triplet, out_dir / "scores.csv")}
    summary = {
        "count": len(report.per_triplet),
        "mean_clip": report.mean_clip,
        "mean_dino": report.mean_dino,
        "encoder_ids": report.encoder_ids,
        "degenerate": report.degenerate,
    }
    paths["summary"] = out_dir / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["table"] = out_dir / "scores.txt"
    paths["table"].write_text(report.table() + "\n", encoding="utf-8")
    if figure and report.per_triplet:
        paths["figure"] = plotting.score_figure(report, out_dir / "scores.png")
    return paths


# -- judge / survey exports ------------------------------------------------------------

PAIRWISE_TASK = """\
Image analogy task.

The top row shows an example edit: image A (left) was turned into image A' (middle).
The bottom row starts with a new image B (left), followed by two candidate results,
Option 1 (middle) and Option 2 (right).

Which option applies the same change to B that turned A into A', while keeping
everything else about B unchanged? Answer with exactly one of: "Option 1" or "Option 2".
"""

SURVEY_TASK = """\
Image analogy survey.

The top row shows A and A' (the edited version of A) followed by the query image B.
The bottom row shows four candidates, numbered 1 to 4. Pick the candidate that
changes B in the same way A was changed into A'.
"""


def export_vlm_pairwise_prompt(
    triplet_id: str,
    A,
    Aprime,
    B,
    candidate_X,
    candidate_Y,
    out_dir,
    seed: int = 0,
    labels: tuple[str, str] = ("X", "Y"),
) -> Path:
    """Write ``prompt.txt``, a 2x3 ``grid.png`` and ``manifest.json`` for a two-option judgement.

    The candidates are shuffled with ``random.Random(f"{seed}:{triplet_id}")``; the manifest
    records which label sits in which slot.
    """
    bundle = Path(out_dir) / triplet_id
    bundle.mkdir(parents=True, exist_ok=True)
    rng = random.Random(f"{seed}:{triplet_id}")
    order = [0, 1]
    rng.shuffle(order)
    cands = [candidate_X, candidate_Y]
    shown = [as_image(cands[i]) for i in order]
    plotting.image_grid(
        [[as_image(A), as_image(Aprime), None], [as_image(B), shown[0], shown[1]]],
        bundle / "grid.png",
        cell_titles=(("A", "A'", ""), ("B", "Option 1", "Option 2")),
    )
    for slot, img in enumerate(shown, start=1):
        save_png(np.clip(img, 0, 1), bundle / f"option{slot}.png")
    (bundle / "prompt.txt").write_text(PAIRWISE_TASK, encoding="utf-8")
    manifest = {
        "triplet_id": triplet_id,
        "seed": seed,
        "options": {f"Option {slot}": labels[i] for slot, i in enumerate(order, start=1)},
        "permutation": order,
        "files": {"grid": "grid.png", "prompt": "prompt.txt", "option1": "option1.png", "option2": "option2.png"},
    }
    (bundle / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return bundle


def judge_pairwise(bundle, judge: Callable[[str, Path], str]) -> str:
    """Ask ``judge(prompt_text, grid_path)`` for "Option 1"/"Option 2" and map it back to a label."""
    bundle = Path(bundle)
    manifest = json.loads((bundle / "manifest.json").read_text(encoding="utf-8"))
    answer = judge((bundle / "prompt.txt").read_text(encoding="utf-8"), bundle / "grid.png").strip()
    for option, label in manifest["options"].items():
        if answer.lower().startswith(option.lower()):
            return label
    raise ValueError(f"judge answer {answer!r} is not one of {sorted(manifest['options'])}")


def export_human_survey(triplets, out_dir, seed: int = 0) -> Path:
    """``triplets`` yields ``(triplet_id, A, A', B, {method: image})`` with four candidates each.

    Writes one grid per question plus ``answer_key.json`` mapping option numbers to methods.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    key = {}
    questions = []
    for q, (tid, A, Ap, B, candidates) in enumerate(triplets, start=1):
        methods = sorted(candidates)
        if len(methods) != 4:
            raise ValueError(f"triplet {tid} has {len(methods)} candidates; the survey needs four")
        order = list(range(4))
        rng.shuffle(order)
        shown = [methods[i] for i in order]
        name = f"q{q:03d}_{tid}.png"
        plotting.image_grid(
            [[as_image(A), as_image(Ap), as_image(B), None], [as_image(candidates[m]) for m in shown]],
            out_dir / name,
            cell_titles=(("A", "A'", "B", ""), ("1", "2", "3", "4")),
        )
        key[name] = {str(i + 1): m for i, m in enumerate(shown)}
        questions.append({"question": q, "triplet_id": tid, "image": name, "permutation": order, "methods": methods})
    (out_dir / "instructions.txt").write_text(SURVEY_TASK, encoding="utf-8")
    (out_dir / "answer_key.json").write_text(json.dumps(key, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "manifest.json").write_text(json.dumps({"seed": seed, "questions": questions}, indent=2) + "\n", encoding="utf-8")
    return out_dir
