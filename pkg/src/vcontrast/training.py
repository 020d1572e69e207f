"""Deterministic SGD training of the toy model under any objective."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import avg_improvement, eval_battery
from .model import ModelParams, bundles_from_table, load_checkpoint, pair_logprobs, save_checkpoint
from .objectives import OBJECTIVES, Betas, objective_loss
from .synthetic import ContrastPair

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    objective: str = "svco"
    beta: float = 0.1
    beta1: float = 0.1
    beta2: float = 0.1
    # 1e-6 / 1e-5 suit 7B models; the toy model needs a far larger step
    learning_rate: float = 1e-2
    epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    checkpoint_interval_steps: int = 31
    holdout_fraction: float = 0.05
    width: int = 32

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; valid: {', '.join(OBJECTIVES)}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("epochs", "batch_size", "checkpoint_interval_steps", "width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")
        Betas(self.beta, self.beta1, self.beta2)

    @property
    def betas(self) -> Betas:
        return Betas(self.beta, self.beta1, self.beta2)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = {"str": str, "float": float, "int": int}[types[name]]
            kwargs[name] = kind(raw)
        return cls(**kwargs)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


@dataclass
class Checkpoint:
    step: int
    path: str | None
    metrics: dict[str, float]
    params: ModelParams | None = field(default=None, repr=False)

    def load(self) -> ModelParams:
        if self.params is not None:
            return self.params
        return load_checkpoint(self.path)


@dataclass
class StepRecord:
    step: int
    epoch: int
    train_loss: float
    holdout_loss: float | None = None
    pair_accuracy: float | None = None
    checkpoint: str | None = None  # file name inside the run directory


@dataclass
class RunRecord:
    config: TrainConfig
    steps: list[StepRecord] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    base_metrics: dict[str, float] = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        """One JSON object per line: a config header, then one line per step."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"config": asdict(self.config), "base_metrics": self.base_metrics},
                                sort_keys=True) + "\n")
            for rec in self.steps:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def _derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


def split_holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, holdout) index split; holdout gets round(fraction * n) items."""
    perm = np.random.default_rng([seed, 2]).permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


def batch_loss(objective: str, betas: Betas, policy: ModelParams, pairs: Sequence[ContrastPair],
               reference_table: np.ndarray):
    bw, bl = bundles_from_table(pair_logprobs(policy, pairs), reference_table)
    return objective_loss(objective, bw, bl, betas)


def _reference_table(reference: ModelParams, pairs: Sequence[ContrastPair], chunk: int = 256) -> np.ndarray:
    if not pairs:
        return np.zeros((0, 6))
    return np.concatenate([pair_logprobs(reference, pairs[i:i + chunk]).data
                           for i in range(0, len(pairs), chunk)])


def _dump_batch(out_dir: Path | None, step: int, pairs: Sequence[ContrastPair]) -> str:
    if out_dir is None:
        return "no output directory; batch not written"
    path = out_dir / f"nan_batch_step{step}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")
    return f"offending batch written to {path}"


def train(config: TrainConfig, corpus: Sequence[ContrastPair], out_dir: str | Path | None = None,
          init_params: ModelParams | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> tuple[RunRecord, ModelParams]:
    """Train a policy from a frozen snapshot of its initial parameters.

    With ``out_dir`` set, checkpoints go to ``out_dir/step_<n>.ckpt``, the final
    parameters to ``out_dir/final.ckpt`` and the per-step log to
    ``out_dir/run.jsonl``; otherwise checkpoints are held in memory.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_idx, hold_idx = split_holdout(len(corpus), config.holdout_fraction, config.seed)
    train_pairs = [corpus[i] for i in train_idx]
    hold_pairs = [corpus[i] for i in hold_idx]
    if not train_pairs:
        raise ValueError("holdout_fraction leaves no training pairs")

    if init_params is None:
        init_params = ModelParams.init(_derive_seed(config.seed, 0), width=config.width)
    reference = init_params.copy(requires_grad=False)
    policy = init_params.copy(requires_grad=True)
    ref_train = _reference_table(reference, train_pairs)
    ref_hold = _reference_table(reference, hold_pairs)
    betas = config.betas

    run = RunRecord(config=config)
    if hold_pairs:
        run.base_metrics = eval_battery(reference, hold_pairs)

    def checkpoint(step: int, params: ModelParams, name: str) -> Checkpoint:
        metrics = eval_battery(params, hold_pairs) if hold_pairs else {}
        if hold_pairs:
            metrics["holdout_loss"] = batch_loss(config.objective, betas, params, hold_pairs, ref_hold).item()
        if out is not None:
            path = out / name
            save_checkpoint(params, path)
            ckpt = Checkpoint(step, str(path), metrics)
        else:
            ckpt = Checkpoint(step, None, metrics, params.copy())
        run.checkpoints.append(ckpt)
        return ckpt

    def name_of(ckpt: Checkpoint) -> str | None:
        return Path(ckpt.path).name if ckpt.path else None

    step = 0
    n = len(train_pairs)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [train_pairs[i] for i in idx]
            with ad.Tape() as tape:
                loss = batch_loss(config.objective, betas, policy, batch, ref_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                where = _dump_batch(out, step, batch)
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch}); {where}")
            grads = ad.backward(tape, loss, wrt=policy.values())
            policy = policy.sgd_step(grads, config.learning_rate)
            rec = StepRecord(step=step, epoch=epoch, train_loss=value)
            step += 1
            if step % config.checkpoint_interval_steps == 0:
                ckpt = checkpoint(step, policy, f"step_{step}.ckpt")
                rec.holdout_loss = ckpt.metrics.get("holdout_loss")
                rec.pair_accuracy = ckpt.metrics.get("pair_accuracy")
                rec.checkpoint = name_of(ckpt)
            run.steps.append(rec)
            if on_step is not None:
                on_step(rec)
        log.info("epoch %d done: last loss %.6f", epoch, run.steps[-1].train_loss)

    if not run.checkpoints or run.checkpoints[-1].step != step:
        ckpt = checkpoint(step, policy, f"step_{step}.ckpt")
        last = run.steps[-1]
        last.holdout_loss = ckpt.metrics.get("holdout_loss")
        last.pair_accuracy = ckpt.metrics.get("pair_accuracy")
        last.checkpoint = name_of(ckpt)
    if out is not None:
        save_checkpoint(policy, out / "final.ckpt")
        run.write(out / "run.jsonl")
    return run, policy


# battery metrics where a smaller value is better
LOWER_BETTER = frozenset({"ppl_match", "holdout_loss"})


def select_checkpoint(run: RunRecord, criterion: Callable[[Checkpoint], float] | None = None) -> Checkpoint:
    """Checkpoint maximizing ``criterion``; ties go to the earliest step.

    The default criterion is the average improvement of the evaluation
    battery over the untrained model's battery.
    """
    if not run.checkpoints:
        raise ValueError("run has no checkpoints")
    if criterion is None:
        base = run.base_metrics

        def criterion(ckpt: Checkpoint) -> float:
            keys = sorted(k for k in base if k in ckpt.metrics)
            if not keys:
                return 0.0
            return avg_improvement({k: base[k] for k in keys}, {k: ckpt.metrics[k] for k in keys},
                                   LOWER_BETTER)

    best, best_score = None, -math.inf
    for ckpt in sorted(run.checkpoints, key=lambda c: c.step):
        score = criterion(ckpt)
        if score > best_score:
            best, best_score = ckpt, score
    return best
