"""Dual-encoder filter for contrastive image pairs.

A pair is kept when it is semantically close (semantic-space cosine above
``tau_clip``) yet visibly different in detail (detail-space cosine below
``tau_dino``). Both comparisons are strict, so ties reject. Categories in
``bypass_categories`` skip the thresholds and are instead subsampled with a
seeded draw.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .store import CATEGORIES, EmbeddingRecord, read_store

KEEP = "kept"
BYPASS = "bypass"
TOO_DIFFERENT = "too-different-semantically"
TOO_SIMILAR = "too-similar-in-detail"
NOT_SAMPLED = "bypass-not-sampled"

KEPT_FORMAT = "vcontrast.kept"


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero-norm vector")
    return float(min(1.0, max(-1.0, np.dot(a, b) / (na * nb))))


@dataclass(frozen=True)
class FilterConfig:
    tau_clip: float = 0.7
    tau_dino: float = 0.5
    bypass_categories: frozenset[str] = frozenset({"position"})
    # None: sample bypass categories at the survival rate of filtered ones
    bypass_rate: float | None = None
    holdout_fraction: float = 0.0

    def __post_init__(self):
        for name in ("tau_clip", "tau_dino"):
            if not -1 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (-1, 1)")
        object.__setattr__(self, "bypass_categories", frozenset(self.bypass_categories))
        unknown = self.bypass_categories - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown bypass categories: {sorted(unknown)}")
        if self.bypass_rate is not None and not 0 <= self.bypass_rate <= 1:
            raise ValueError("bypass_rate must be in [0, 1]")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")


@dataclass(frozen=True)
class Decision:
    keep: bool
    reason: str
    clip_sim: float
    dino_sim: float


def filter_pair(rec: EmbeddingRecord, cfg: FilterConfig = FilterConfig()) -> Decision:
    clip_sim = cosine(rec.clip_a, rec.clip_b)
    dino_sim = cosine(rec.dino_a, rec.dino_b)
    if rec.category in cfg.bypass_categories:
        return Decision(True, BYPASS, clip_sim, dino_sim)
    if not clip_sim > cfg.tau_clip:
        return Decision(False, TOO_DIFFERENT, clip_sim, dino_sim)
    if not dino_sim < cfg.tau_dino:
        return Decision(False, TOO_SIMILAR, clip_sim, dino_sim)
    return Decision(True, KEEP, clip_sim, dino_sim)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class FilterReport:
    total: int = 0
    kept: int = 0
    per_category: dict[str, dict[str, int]] = field(default_factory=dict)
    reasons: dict[str, int] = field(default_factory=dict)
    bypass_rate: float | None = None
    kept_ids: list[str] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("kept_ids")
        return d

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def filter_records(records: Sequence[EmbeddingRecord], cfg: FilterConfig = FilterConfig(),
                   seed: int = 0) -> tuple[FilterReport, list[dict]]:
    """Apply the filter to in-memory records; returns the report and kept rows."""
    ids = [r.pair_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate pair_id in store")
    records = sorted(records, key=lambda r: r.pair_id)
    report = FilterReport(total=len(records))
    report.per_category = {c: {"total": 0, "kept": 0} for c in CATEGORIES}
    decisions = [filter_pair(r, cfg) for r in records]

    filtered = [d for r, d in zip(records, decisions) if r.category not in cfg.bypass_categories]
    if cfg.bypass_rate is not None:
        rate = cfg.bypass_rate
    elif filtered:
        rate = sum(d.keep for d in filtered) / len(filtered)
    else:
        rate = 1.0
    report.bypass_rate = rate

    sampled: set[str] = set()
    for c_idx, cat in enumerate(CATEGORIES):
        if cat not in cfg.bypass_categories:
            continue
        pool = [r.pair_id for r in records if r.category == cat]
        k = _round_half_up(rate * len(pool))
        order = np.random.default_rng([seed, c_idx]).permutation(len(pool))
        sampled.update(pool[i] for i in order[:k])

    kept_rows = []
    for rec, dec in zip(records, decisions):
        reason = dec.reason
        if reason == BYPASS and rec.pair_id not in sampled:
            reason = NOT_SAMPLED
        report.per_category[rec.category]["total"] += 1
        report.reasons[reason] = report.reasons.get(reason, 0) + 1
        if reason in (KEEP, BYPASS):
            report.per_category[rec.category]["kept"] += 1
            kept_rows.append({"pair_id": rec.pair_id, "category": rec.category, "reason": reason,
                              "clip_sim": dec.clip_sim, "dino_sim": dec.dino_sim})
    report.kept = len(kept_rows)
    report.kept_ids = [row["pair_id"] for row in kept_rows]

    if cfg.holdout_fraction > 0 and kept_rows:
        n_hold = _round_half_up(cfg.holdout_fraction * len(kept_rows))
        hold = set(np.random.default_rng([seed, len(CATEGORIES)]).permutation(len(kept_rows))[:n_hold])
        for i, row in enumerate(kept_rows):
            row["split"] = "holdout" if i in hold else "train"
    return report, kept_rows


def write_kept(rows: Sequence[dict], path: str | Path, cfg: FilterConfig, seed: int) -> None:
    header = {"format": KEPT_FORMAT, "version": 1, "seed": seed, "tau_clip": cfg.tau_clip,
              "tau_dino": cfg.tau_dino, "bypass_categories": sorted(cfg.bypass_categories)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_kept_ids(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or json.loads(lines[0]).get("format") != KEPT_FORMAT:
        raise ValueError(f"{path}: not a kept-set file")
    return [json.loads(line)["pair_id"] for line in lines[1:] if line.strip()]


def run_filter(store_path: str | Path, cfg: FilterConfig = FilterConfig(), seed: int = 0,
               out_path: str | Path | None = None) -> FilterReport:
    """Filter a store file; writes the kept set to ``out_path`` when given."""
    report, rows = filter_records(read_store(store_path), cfg, seed)
    if out_path is not None:
        write_kept(rows, out_path, cfg, seed)
    return report
