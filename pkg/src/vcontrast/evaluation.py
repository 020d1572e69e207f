"""Perplexity probe, pair discrimination and cross-metric aggregation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Collection, Iterable, Mapping, Sequence

import numpy as np

from .model import NO_IMAGE, Image, ImageCondition, ModelParams, pair_logprobs, sequence_logprobs
from .synthetic import ContrastPair

CONDITIONS = ("match", "mismatch", "noimage")
ORDERINGS = tuple("<".join(p) for p in permutations(CONDITIONS)) + ("tie",)


def perplexity(model: ModelParams, cond: ImageCondition, query: Sequence[int], response: Sequence[int]) -> float:
    """exp of the negative mean per-token log-probability of ``response``."""
    total, _, _ = sequence_logprobs(model, [cond], [query], [response])
    return float(np.exp(-total.data[0] / len(response)))


def _probe_ppl(model: ModelParams, corpus: Sequence[ContrastPair], chunk: int = 256) -> np.ndarray:
    rows = []
    for start in range(0, len(corpus), chunk):
        part = corpus[start:start + chunk]
        conds, queries, responses = [], [], []
        for p in part:
            conds += [Image(p.img_w), Image(p.img_l), NO_IMAGE]
            queries += [p.query] * 3
            responses += [p.y_w] * 3
        totals, _, _ = sequence_logprobs(model, conds, queries, responses)
        lengths = np.array([len(y) for y in responses], dtype=np.float64)
        rows.append(np.exp(-totals.data / lengths).reshape(len(part), 3))
    return np.concatenate(rows) if rows else np.zeros((0, 3))


def ordering_of(triple: Sequence[float]) -> str:
    """Name of the strict ordering of (match, mismatch, noimage) PPLs, or 'tie'."""
    if len(set(triple)) < 3:
        return "tie"
    return "<".join(CONDITIONS[k] for k in np.argsort(triple, kind="stable"))


@dataclass
class ProbeReport:
    ppl: np.ndarray  # (n, 3): match, mismatch, noimage
    histogram: dict[str, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.ppl)

    @property
    def means(self) -> dict[str, float]:
        if not self.n:
            return {c: float("nan") for c in CONDITIONS}
        return {c: float(np.mean(self.ppl[:, k])) for k, c in enumerate(CONDITIONS)}

    @property
    def match_below_mismatch(self) -> float:
        if not self.n:
            return float("nan")
        return float(np.mean(self.ppl[:, 0] < self.ppl[:, 1]))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "means": self.means,
            "match_below_mismatch": self.match_below_mismatch,
            "histogram": self.histogram,
            "samples": self.ppl.tolist(),
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def table_rows(self) -> list[dict]:
        rows = [{"kind": "mean_ppl", "name": c, "value": v} for c, v in self.means.items()]
        rows += [{"kind": "ordering", "name": o, "value": self.histogram.get(o, 0)} for o in ORDERINGS]
        rows.append({"kind": "fraction", "name": "match_below_mismatch", "value": self.match_below_mismatch})
        return rows


def neglect_probe(model: ModelParams, corpus: Sequence[ContrastPair]) -> ProbeReport:
    """PPL of y_w under its matching image, the contrasting image, and no image."""
    ppl = _probe_ppl(model, corpus)
    hist = {o: 0 for o in ORDERINGS}
    for triple in ppl:
        hist[ordering_of(tuple(triple))] += 1
    return ProbeReport(ppl=ppl, histogram=hist)


@dataclass(frozen=True)
class DependencyPoint:
    metric: str
    score_with_images: float
    score_without_images: float

    @property
    def dependency(self) -> float:
        return visual_dependency(self.score_with_images, self.score_without_images)


def visual_dependency(with_images: float, without_images: float) -> float:
    """Relative score drop when images are removed; negative if removal helps."""
    if not with_images > 0:
        raise ValueError(f"score with images must be positive, got {with_images}")
    return (with_images - without_images) / with_images


def metric_improvements(base: Mapping[str, float], tuned: Mapping[str, float],
                        lower_better: Collection[str] = ()) -> dict[str, float]:
    """Signed relative change per metric, always over the base value."""
    if set(base) != set(tuned):
        raise ValueError(f"metric keys differ: {sorted(set(base) ^ set(tuned))}")
    out = {}
    for key in sorted(base):
        b, t = float(base[key]), float(tuned[key])
        if b == 0:
            raise ValueError(f"base value of {key!r} is zero")
        change = (t - b) / b
        out[key] = -change if key in lower_better else change
    return out


def avg_improvement(base: Mapping[str, float], tuned: Mapping[str, float],
                    lower_better: Collection[str] = ()) -> float:
    """Mean sign-corrected relative improvement (a fraction, not a percentage)."""
    changes = metric_improvements(base, tuned, lower_better)
    return float(np.mean(list(changes.values()))) if changes else 0.0


def improvement_trend(points: Iterable[tuple[float, float]]) -> float:
    """Least-squares slope of improvement against visual dependency."""
    pts = np.asarray(list(points), dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    if len(x) < 2 or np.all(x == x[0]):
        raise ValueError("need at least two distinct dependency values")
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def accuracy_from_logps(match: np.ndarray, mismatch: np.ndarray) -> float:
    """Fraction with match > mismatch; exact ties count one half."""
    match, mismatch = np.asarray(match), np.asarray(mismatch)
    if match.size == 0:
        raise ValueError("empty corpus")
    wins = (match > mismatch).astype(np.float64) + 0.5 * (match == mismatch)
    return float(wins.mean())


def pair_accuracy(model: ModelParams, corpus: Sequence[ContrastPair], chunk: int = 256) -> float:
    """How often y_w is likelier under i_w than under i_l."""
    if not corpus:
        raise ValueError("empty corpus")
    tables = [pair_logprobs(model, corpus[i:i + chunk]).data for i in range(0, len(corpus), chunk)]
    table = np.concatenate(tables)
    return accuracy_from_logps(table[:, 0], table[:, 1])


def eval_battery(model: ModelParams, corpus: Sequence[ContrastPair]) -> dict[str, float]:
    """Small held-out metric set used for checkpoint selection."""
    report = neglect_probe(model, corpus)
    return {
        "pair_accuracy": pair_accuracy(model, corpus),
        "match_below_mismatch": report.match_below_mismatch,
        "ppl_match": report.means["match"],
    }


def write_table(rows: Sequence[Mapping], path: str | Path) -> None:
    """Flat CSV with one row per metric or point."""
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
