"""Edit-pair manifests and triplet sampling.

A dataset root holds ``manifest.jsonl``: one ``{"id", "before", "after", "instruction"}``
record per edit pair, image paths relative to the root. Optional ``caption_before`` /
``caption_after`` fields feed ``anchor.mode = "user"``.
"""

from __future__ import annotations

import json
import logging
import os
import random
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .images import load_image

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class EditPair:
    id: str
    before: Path
    after: Path
    instruction: str
    caption_before: Optional[str] = None
    caption_after: Optional[str] = None


@dataclass(frozen=True)
class TripletImages:
    """What the models are allowed to see: no instruction field exists here."""

    id: str
    A: np.ndarray
    Aprime: np.ndarray
    B: np.ndarray
    captions: tuple[Optional[str], Optional[str], Optional[str]] = (None, None, None)


@dataclass(frozen=True)
class TripletRecord:
    id: str
    path_A: Path
    path_Aprime: Path
    path_B: Path
    path_B_gt: Optional[Path] = None
    # bookkeeping only, never handed to a model
    instruction_text: Optional[str] = None
    caption_A: Optional[str] = None
    caption_Aprime: Optional[str] = None
    caption_B: Optional[str] = None

    def model_view(self) -> TripletImages:
        return TripletImages(
            id=self.id,
            A=load_image(self.path_A),
            Aprime=load_image(self.path_Aprime),
            B=load_image(self.path_B),
            captions=(self.caption_A, self.caption_Aprime, self.caption_B),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict, root: Path | None = None) -> "TripletRecord":
        def path(v):
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() or root is None else root / p

        try:
            return cls(
                id=str(d["id"]),
                path_A=path(d["path_A"]),
                path_Aprime=path(d["path_Aprime"]),
                path_B=path(d["path_B"]),
                path_B_gt=path(d.get("path_B_gt")),
                instruction_text=d.get("instruction_text"),
                caption_A=d.get("caption_A"),
                caption_Aprime=d.get("caption_Aprime"),
                caption_B=d.get("caption_B"),
            )
        except KeyError as exc:
            raise DatasetError(f"triplet record missing field {exc}") from exc


@dataclass
class SampleSummary:
    requested: int
    returned: int
    eligible_pairs: int
    skipped_singletons: int


def read_manifest(dataset_root) -> list[EditPair]:
    root = Path(dataset_root)
    path = root / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} under {root}")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(
                    EditPair(
                        id=str(rec["id"]),
                        before=root / rec["before"],
                        after=root / rec["after"],
                        instruction=str(rec["instruction"]),
                        caption_before=rec.get("caption_before"),
                        caption_after=rec.get("caption_after"),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad record ({exc})") from exc
    if not pairs:
        raise DatasetError(f"{path} is empty")
    return pairs


def sample_triplets(dataset_root, count: int, seed: int = 0, check_images: bool = True) -> tuple[list[TripletRecord], SampleSummary]:
    """Turn edit pairs into (A, A', B) triplets where B shares A's exact instruction.

    Pairs whose instruction appears only once cannot get a B and are skipped.
    Eligible pairs are shuffled with ``random.Random(seed)``; the first ``count``
    each draw B uniformly from the other pairs of their instruction group.
    """
    pairs = read_manifest(dataset_root)
    groups: dict[str, list[EditPair]] = defaultdict(list)
    for p in pairs:
        groups[p.instruction].append(p)
    eligible = [p for p in pairs if len(groups[p.instruction]) > 1]
    skipped = len(pairs) - len(eligible)

    rng = random.Random(seed)
    order = list(eligible)
    rng.shuffle(order)
    if count > len(order):
        log.warning("requested %d triplets but only %d pairs have a partner; returning all", count, len(order))
    chosen = order[:count]

    triplets = []
    for pair in chosen:
        others = [q for q in groups[pair.instruction] if q.id != pair.id]
        other = rng.choice(others)
        triplets.append(
            TripletRecord(
                id=f"{pair.id}__{other.id}",
                path_A=pair.before,
                path_Aprime=pair.after,
                path_B=other.before,
                path_B_gt=other.after,
                instruction_text=pair.instruction,
                caption_A=pair.caption_before,
                caption_Aprime=pair.caption_after,
                caption_B=other.caption_before,
            )
        )
    if check_images:
        for t in triplets:
            for p in (t.path_A, t.path_Aprime, t.path_B):
                load_image(p)
    return triplets, SampleSummary(count, len(triplets), len(eligible), skipped)


def write_triplets(triplets, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            rec = t.to_json()
            # image paths are stored relative to the triplet file so the pair can move together
            for key in ("path_A", "path_Aprime", "path_B", "path_B_gt"):
                if rec[key] is not None:
                    rec[key] = Path(os.path.relpath(Path(rec[key]).resolve(), base)).as_posix()
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_triplets(path) -> list[TripletRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"triplet file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(TripletRecord.from_json(json.loads(line), root=path.parent))
    return out
