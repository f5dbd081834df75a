"""Relative-l2 training loop, ensemble evaluation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from collections import OrderedDict, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .datasets import Dataset, Normalizer
from .nn import ModelConfig, OperatorTransformer
from .optim import Optimizer, OptimizerState, Schedule
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "opformer-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class ArchitectureError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _rms(x, axis):
    return (x * x).mean(axis=axis).sqrt() if isinstance(x, Tensor) else np.sqrt((x * x).mean(axis=axis))


def relative_l2_loss(pred, truth) -> Tensor:
    """Mean over samples and fields of ||pred - truth|| / ||truth||.

    Norms are root-mean-square over the point axis, ``(1/n sum |f|^2)^(1/2)``.
    Shapes are ``(m, c)`` or ``(B, m, c)``.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {truth.shape}")
    axis = pred.ndim - 2
    denom = _rms(truth, axis)
    if np.any(denom == 0):
        raise ZeroNormError("a target sample has zero norm; relative error undefined")
    return (_rms(pred - truth, axis) / denom).mean()


def relative_l2_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample, per-field relative errors, shape (B, c)."""
    denom = np.sqrt((truth * truth).mean(axis=-2))
    if np.any(denom == 0):
        raise ZeroNormError("a target sample has zero norm; relative error undefined")
    return np.sqrt(((pred - truth) ** 2).mean(axis=-2)) / denom


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "onecycle"
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    power: float = 1.0
    batch_size: int = 32
    query_points: int = 0
    steps: int = 10000
    seed: int = 0
    ensemble: int = 1
    eval_every: int = 500
    eval_batch: int = 64
    divergence_factor: float = 1e3
    divergence_window: int = 200
    embed_dim: int = 32
    encoder_layers: int = 2
    decoder_depth: int = 2
    ffn_expansion: int = 2
    pre_norm: bool = True
    per_field: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "lion"):
            raise ConfigError(f"optimizer must be 'adam' or 'lion', got {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or self.ensemble < 1 or self.eval_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, ensemble >= 1, eval_every >= 1 required")
        if self.query_points < 0:
            raise ConfigError("query_points must be >= 0 (0 uses every query point)")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, dataset: Dataset, seed: int | None = None) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, encoder_layers=self.encoder_layers,
                           decoder_depth=self.decoder_depth, ffn_expansion=self.ffn_expansion,
                           input_channels=dataset.input_channels,
                           output_channels=dataset.output_channels,
                           seed=self.seed if seed is None else seed, pre_norm=self.pre_norm)

    def optimizer_state(self) -> OptimizerState:
        if self.optimizer == "adam":
            return OptimizerState.adam(self.lr, (self.beta1, self.beta2), self.eps, self.weight_decay)
        return OptimizerState.lion(self.lr, (self.beta1, self.beta2), self.weight_decay)

    def lr_schedule(self) -> Schedule:
        return Schedule(self.schedule, self.lr, max(self.steps, 1), self.pct_start,
                        self.div_factor, self.final_div, self.power)


@dataclass
class RunReport:
    seed: int
    loss_history: list[float] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)
    field_names: list[str] = field(default_factory=list)
    test_errors: list[float] = field(default_factory=list)
    test_loss: float = float("nan")
    best_step: int = 0
    converged: bool = True
    diverged_at: int | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnsembleReport:
    field_names: list[str]
    members: list[list[float]]
    converged: list[bool]
    mean: list[float]
    std: list[float]
    excluded: list[int]
    percent: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        scale = 100.0 if self.percent else 1.0
        return [{"field": name, "mean": m * scale, "std": s * scale,
                 "unit": "percent" if self.percent else "fraction",
                 "members": sum(self.converged), "excluded": len(self.excluded)}
                for name, m, s in zip(self.field_names, self.mean, self.std)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["field", "mean", "std", "unit", "members", "excluded"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    state: OrderedDict
    normalizer: Normalizer
    meta: dict = field(default_factory=dict)

    def model(self) -> OperatorTransformer:
        model = OperatorTransformer(self.config)
        model.load_state_dict(self.state)
        return model

    @classmethod
    def from_model(cls, model: OperatorTransformer, normalizer: Normalizer, **meta) -> Checkpoint:
        return cls(model.config, model.state_dict(), normalizer, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    meta = {"model_config": ckpt.config.to_dict(), "normalization": ckpt.normalizer.to_dict(),
            "meta": ckpt.meta}
    return write_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, ckpt.state, meta,
                           manifest_name="checkpoint.json")


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    manifest, arrays = read_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
                                      manifest_name="checkpoint.json")
    config = ModelConfig.from_dict(manifest["model_config"])
    if expect is not None:
        diffs = {k: (v, getattr(expect, k)) for k, v in config.to_dict().items()
                 if k != "seed" and getattr(expect, k) != v}
        if diffs:
            raise ArchitectureError(f"checkpoint architecture differs: {diffs}")
    reference = OperatorTransformer(config)
    for name, p in reference.params.items():
        if name not in arrays or arrays[name].shape != p.shape:
            raise ArchitectureError(f"checkpoint parameter {name!r} missing or mis-shaped")
    if set(arrays) != set(reference.params):
        raise ArchitectureError("checkpoint has unexpected parameters")
    return Checkpoint(config, OrderedDict(arrays), Normalizer.from_dict(manifest["normalization"]),
                      manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _physical(model_out: Tensor, normalizer: Normalizer) -> Tensor:
    scale, offset = normalizer.target_affine()
    return model_out * Tensor(scale) + Tensor(offset)


def predict(model: OperatorTransformer, normalizer: Normalizer, dataset: Dataset, split: str = "test",
            batch: int = 64, idx=None) -> np.ndarray:
    """Raw-unit predictions for ``split`` (or the selected indices)."""
    n = dataset.count(split)
    sel = np.arange(n) if idx is None else np.asarray(idx)
    outs = []
    scale, offset = normalizer.target_affine()
    raw_tok = dataset.get(split, "tokens")
    raw_q = dataset.get(split, "queries")
    for start in range(0, len(sel), batch):
        part = sel[start:start + batch]
        tok = normalizer.tokens(raw_tok[part])
        qry = normalizer.queries(raw_q[part])[..., None]
        outs.append(model.predict(tok, qry) * scale + offset)
    if not outs:
        return np.zeros((0,) + dataset.get(split, "targets").shape[1:])
    return np.concatenate(outs, axis=0)


def evaluate(model: OperatorTransformer, normalizer: Normalizer, dataset: Dataset,
             split: str = "test", batch: int = 64) -> np.ndarray:
    """Per-sample, per-field relative errors on ``split``."""
    pred = predict(model, normalizer, dataset, split, batch)
    return relative_l2_errors(pred, dataset.get(split, "targets"))


def _check_compat(model: OperatorTransformer, dataset: Dataset) -> None:
    c = model.config
    if c.input_channels != dataset.input_channels or c.output_channels != dataset.output_channels:
        raise ArchitectureError(
            f"model expects {c.input_channels}->{c.output_channels} channels, dataset provides "
            f"{dataset.input_channels}->{dataset.output_channels}")


def train(model: OperatorTransformer, dataset: Dataset, config: TrainConfig,
          progress=None) -> tuple[Checkpoint, RunReport]:
    """Mini-batch relative-l2 training with periodic test evaluation.

    The returned checkpoint holds the parameters with the lowest test loss
    seen at an evaluation point (the initial parameters when ``steps == 0``).
    """
    _check_compat(model, dataset)
    norm = dataset.normalizer
    if norm is None:
        raise ConfigError("dataset has no training samples")
    t_start = time.perf_counter()
    report = RunReport(seed=config.seed, field_names=list(dataset.field_names))
    rng = np.random.default_rng(config.seed + 7919)
    tok_all, qry_all, tgt_all = dataset.normalized("train")
    n_train = tok_all.shape[0]
    batch = min(config.batch_size, n_train)
    m_all = qry_all.shape[1]
    sub = 0 < config.query_points < m_all
    opt = Optimizer(model.parameters(), config.optimizer_state(), config.lr_schedule())
    has_test = dataset.count("test") > 0
    eval_split = "test" if has_test else "train"

    def test_loss() -> float:
        return float(evaluate(model, norm, dataset, eval_split, config.eval_batch).mean())

    best_state = model.state_dict()
    best = test_loss() if config.steps > 0 else float("nan")
    report.eval_history.append((0, best))
    recent: deque[float] = deque(maxlen=config.divergence_window)
    order = rng.permutation(n_train)
    cursor = 0
    for step in range(config.steps):
        if cursor + batch > n_train:
            order = rng.permutation(n_train)
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        model.zero_grad()
        qry, tgt = qry_all[idx], tgt_all[idx]
        if sub:
            # a fresh random subset of query points each step; the decoder
            # treats queries independently so this is an unbiased estimate
            cols = np.sort(rng.choice(m_all, config.query_points, replace=False))
            qry, tgt = qry[:, cols], tgt[:, cols]
        out = model.forward(tok_all[idx], qry)
        loss = relative_l2_loss(_physical(out, norm), tgt)
        value = float(loss.data)
        if not math.isfinite(value):
            if step == 0:
                raise ConfigError("non-finite loss at the first step; check data and configuration")
            report.converged, report.diverged_at = False, step
            break
        if len(recent) >= 10 and value > config.divergence_factor * float(np.median(recent)):
            report.converged, report.diverged_at = False, step
            report.loss_history.append(value)
            break
        recent.append(value)
        report.loss_history.append(value)
        backward(loss)
        try:
            opt.step()
        except FloatingPointError:
            report.converged, report.diverged_at = False, step
            break
        done = step + 1
        if done % config.eval_every == 0 or done == config.steps:
            current = test_loss()
            report.eval_history.append((done, current))
            if not math.isfinite(current):
                report.converged, report.diverged_at = False, done
                break
            if current < best or not math.isfinite(best):
                best, best_state = current, model.state_dict()
                report.best_step = done
            if progress is not None:
                progress(done, value, current)
    model.load_state_dict(best_state)
    if dataset.count(eval_split) > 0:
        errs = evaluate(model, norm, dataset, eval_split, config.eval_batch)
        report.test_errors = errs.mean(axis=0).tolist()
        report.test_loss = float(errs.mean())
    report.wall_time = time.perf_counter() - t_start
    ckpt = Checkpoint.from_model(model, norm, problem=dataset.problem,
                                 field_names=list(dataset.field_names),
                                 token_names=list(dataset.token_names),
                                 train_config=config.to_dict(), converged=report.converged)
    return ckpt, report


def _train_member(args) -> tuple[Checkpoint, RunReport]:
    dataset, config = args
    model = OperatorTransformer(config.model_config(dataset))
    return train(model, dataset, config)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("OPFORMER_THREADS", "1")))
    except ValueError:
        return 1


def train_ensemble(dataset: Dataset, config: TrainConfig, workers: int | None = None):
    """Train ``config.ensemble`` members with seeds ``seed, seed+1, ...``."""
    configs = [TrainConfig(**{**config.to_dict(), "seed": config.seed + k}) for k in range(config.ensemble)]
    workers = worker_count() if workers is None else workers
    jobs = [(dataset, c) for c in configs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_member, jobs))
    return [_train_member(j) for j in jobs]


def train_per_field(dataset: Dataset, config: TrainConfig, workers: int | None = None):
    """One single-output ensemble per field; returns ``{field: [(checkpoint, report), ...]}``."""
    return {name: train_ensemble(dataset.select_fields([name]), config, workers)
            for name in dataset.field_names}


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def summarize(field_names: list[str], member_errors: list[list[float]], converged: list[bool],
              percent: bool = False) -> EnsembleReport:
    """Mean and population std over converged members only."""
    if not member_errors:
        raise ValueError("need at least one ensemble member")
    keep = [i for i, ok in enumerate(converged) if ok]
    excluded = [i for i, ok in enumerate(converged) if not ok]
    if keep:
        arr = np.asarray([member_errors[i] for i in keep], dtype=np.float64)
        mean, std = arr.mean(axis=0).tolist(), arr.std(axis=0).tolist()
    else:
        mean = std = [float("nan")] * len(field_names)
    return EnsembleReport(list(field_names), [list(map(float, m)) for m in member_errors],
                          list(converged), mean, std, excluded, percent)


def evaluate_ensemble(checkpoints: list[Checkpoint], dataset: Dataset) -> EnsembleReport:
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    errors, converged = [], []
    for ck in checkpoints:
        if ck.config.output_channels != dataset.output_channels or ck.config.input_channels != dataset.input_channels:
            raise ArchitectureError("checkpoint channels do not match the dataset")
        errs = evaluate(ck.model(), ck.normalizer, dataset, "test")
        errors.append(errs.mean(axis=0).tolist())
        converged.append(bool(ck.meta.get("converged", True)) and bool(np.all(np.isfinite(errs))))
    return summarize(dataset.field_names, errors, converged,
                     percent=dataset.problem.startswith("riemann"))


def evaluate_per_field(checkpoints: dict[str, list[Checkpoint]], dataset: Dataset) -> EnsembleReport:
    """Merge per-field ensembles into one report; a member converges only if all its fields did."""
    names = [n for n in dataset.field_names if n in checkpoints]
    if not names:
        raise ValueError("no per-field checkpoints match the dataset fields")
    parts = [evaluate_ensemble(checkpoints[n], dataset.select_fields([n])) for n in names]
    size = min(len(p.members) for p in parts)
    members = [[p.members[k][0] for p in parts] for k in range(size)]
    converged = [all(p.converged[k] for p in parts) for k in range(size)]
    return summarize(names, members, converged, percent=parts[0].percent)


def write_report(path, report: RunReport | EnsembleReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
