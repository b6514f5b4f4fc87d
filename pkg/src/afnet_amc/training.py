"""Losses, confidence weights and the two-stage training pipeline.

Stage 1 trains with plain cross entropy. The stage-1 model then scores every
training instance with a confidence weight ``w = 1 - H_topk(p) / log k`` and
stage 2 retrains with the weighted cross entropy ``w * CE``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import core
from .model import (
    PROB_FLOOR,
    ModelConfig,
    afnet_forward,
    checkpoint_hash,
    init_params,
    loss_and_grad,
    save_checkpoint,
)
from .signals import FrameSet, split_indices

log = logging.getLogger(__name__)

WEIGHT_DECIMALS = 9


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# losses and confidence
# --------------------------------------------------------------------------


def ce_loss(p, y) -> float:
    """Categorical cross entropy against a one-hot label, natural log."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise ValueError("label must be a one-hot vector matching the prediction length")
    return float(-np.sum(y * np.log(np.maximum(p, PROB_FLOOR))))


def entropy_full(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _check_k(k: int, m: int) -> None:
    if not 2 <= k <= m:
        raise ValueError(f"k must satisfy 2 <= k <= {m}, got {k}")


def _topk_normalised(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p: among equal probabilities the lower class index wins
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    top = np.take_along_axis(probs, order, axis=-1)
    return top / top.sum(axis=-1, keepdims=True)


def topk_entropy(p, k: int) -> float:
    """Entropy of the k largest probabilities after renormalising them."""
    p = np.asarray(p, dtype=np.float64)
    _check_k(k, p.shape[-1])
    return entropy_full(_topk_normalised(p, k))


def confidence_weight(p, k: int) -> float:
    return float(confidence_weights(np.asarray(p, dtype=np.float64)[None], k)[0])


def confidence_weights(probs, k: int) -> np.ndarray:
    """Vectorised ``1 - H_topk / log k`` over the rows of an (n, M) array."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_k(k, probs.shape[-1])
    q = _topk_normalised(probs, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    return np.clip(1.0 - h / np.log(k), 0.0, 1.0)


def cw_loss(p, y, w: float) -> float:
    if not 0 <= w <= 1:
        raise ValueError(f"confidence weight must lie in [0, 1], got {w}")
    return w * ce_loss(p, y)


def per_instance_ce(probs, labels) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR))


# --------------------------------------------------------------------------
# configuration and bookkeeping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 15
    val_fraction: float = 0.1
    k: int = 3
    init_seed: int = 0
    shuffle_seed: int = 0
    val_seed: int = 0
    stage2_init: str = "fresh"  # or "finetune"
    stage2_seed_offset: int = 1
    chunk_size: int = 128
    threads: int = 1
    target_val_acc: float | None = None

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.stage2_init not in ("fresh", "finetune"):
            raise ValueError(f"stage2_init must be 'fresh' or 'finetune', got {self.stage2_init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    @property
    def best_epoch(self) -> int:
        return int(np.argmin(self.val_loss)) if self.val_loss else -1

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_acc"]
        for e, (tl, vl, va) in enumerate(zip(self.train_loss, self.val_loss, self.val_acc)):
            lines.append(f"{e},{tl:.9g},{vl:.9g},{va:.9g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        h = cls()
        for row in csv.DictReader(io.StringIO(text)):
            h.train_loss.append(float(row["train_loss"]))
            h.val_loss.append(float(row["val_loss"]))
            h.val_acc.append(float(row["val_acc"]))
        return h


@dataclass
class WeightTable:
    weights: np.ndarray
    checkpoint: str = ""
    k: int = 3

    def __post_init__(self):
        w = np.round(np.asarray(self.weights, dtype=np.float64), WEIGHT_DECIMALS)
        if w.ndim != 1 or np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be a 1-D array with values in [0, 1]")
        self.weights = w

    def __len__(self) -> int:
        return len(self.weights)

    def to_text(self) -> str:
        lines = [f"# checkpoint={self.checkpoint} k={self.k}", "index,weight"]
        lines += [f"{i},{w:.{WEIGHT_DECIMALS}f}" for i, w in enumerate(self.weights)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "WeightTable":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("weight table is missing its '# checkpoint=... k=...' header")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        rows = [ln.split(",") for ln in lines[2:] if ln.strip()]
        idx = [int(r[0]) for r in rows]
        if idx != list(range(len(idx))):
            raise ValueError("weight table indices must run 0..n-1 in order")
        return cls(np.array([float(r[1]) for r in rows]), meta.get("checkpoint", ""), int(meta["k"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "WeightTable":
        return cls.from_text(Path(path).read_text())


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _weighted_ce(probs, labels, weights):
    losses = per_instance_ce(probs, labels)
    if weights is not None:
        losses = weights * losses
    return float(losses.mean())


def validation_split(train: FrameSet, tcfg: TrainConfig):
    """Indices of the fit and monitor subsets. With val_fraction 0 both are the full set."""
    if tcfg.val_fraction == 0:
        all_idx = np.arange(len(train))
        return all_idx, all_idx
    return split_indices(train, 1.0 - tcfg.val_fraction, tcfg.val_seed)


def train_stage(
    params,
    model_cfg: ModelConfig,
    train: FrameSet,
    tcfg: TrainConfig,
    weights=None,
    val: FrameSet | None = None,
    val_weights=None,
):
    """Mini-batch Adam with early stopping on validation loss.

    ``weights`` (one per ``train`` frame) switch the loss to weighted CE.
    Without ``val`` the monitor set is carved from ``train`` per
    ``tcfg.val_fraction``. Returns the best-validation-loss parameters and
    the history.
    """
    if weights is not None and len(weights) != len(train):
        raise ValueError(f"{len(weights)} weights for {len(train)} training frames")
    if val is None:
        fit_idx, val_idx = validation_split(train, tcfg)
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            val_weights = weights[val_idx]
            weights = weights[fit_idx]
        train, val = train.subset(fit_idx), train.subset(val_idx)
    if weights is not None and len(weights) != len(train):
        raise ValueError(f"{len(weights)} weights for {len(train)} training frames")

    dtype = params["conv1.w"].dtype
    x_train = train.iq.astype(dtype, copy=False)
    y_train = train.labels
    w_train = None if weights is None else np.asarray(weights, dtype=dtype)
    vw = None if val_weights is None else np.asarray(val_weights, dtype=np.float64)

    state = core.adam_init(params)
    history = TrainHistory()
    best = {k: v.copy() for k, v in params.items()}
    best_loss = np.inf
    n = len(train)
    for epoch in range(tcfg.max_epochs):
        order = np.random.default_rng([tcfg.shuffle_seed, epoch]).permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start : start + tcfg.batch_size]
            loss, grads, _ = loss_and_grad(
                params,
                model_cfg,
                x_train[idx],
                y_train[idx],
                None if w_train is None else w_train[idx],
                chunk_size=tcfg.chunk_size,
                threads=tcfg.threads,
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            params, state = core.adam_step(params, grads, state, tcfg.lr)
            total += loss * len(idx)
        probs = afnet_forward(val.iq, params, model_cfg)
        val_loss = _weighted_ce(probs, val.labels, vw)
        val_acc = float(np.mean(np.argmax(probs, axis=1) == val.labels))
        history.train_loss.append(total / n)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        log.info("epoch %d train %.4f val %.4f acc %.4f", epoch, total / n, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best = {k: v.copy() for k, v in params.items()}
        elif epoch - history.best_epoch >= tcfg.patience:
            break
        if tcfg.target_val_acc is not None and val_acc >= tcfg.target_val_acc:
            break
    return best, history


def compute_instance_weights(params, model_cfg: ModelConfig, frames: FrameSet, k: int) -> WeightTable:
    probs = afnet_forward(frames.iq, params, model_cfg)
    return WeightTable(confidence_weights(probs, k), checkpoint_hash(params, model_cfg), k)


@dataclass
class TwoStageResult:
    stage1: dict
    weights: WeightTable
    stage2: dict
    history1: TrainHistory
    history2: TrainHistory


ARTIFACTS = ("stage1.afn", "history_stage1.csv", "weights.csv", "stage2.afn", "history_stage2.csv")


def run_stage2(train: FrameSet, model_cfg: ModelConfig, tcfg: TrainConfig, table: WeightTable, stage1=None):
    """Confidence-weighted retraining driven by a (possibly reloaded) weight table."""
    if len(table) != len(train):
        raise ValueError(f"weight table has {len(table)} entries for {len(train)} training frames")
    if tcfg.stage2_init == "finetune":
        if stage1 is None:
            raise ValueError("finetune mode needs the stage-1 parameters")
        start = {k: v.copy() for k, v in stage1.items()}
    else:
        start = init_params(model_cfg, tcfg.init_seed + tcfg.stage2_seed_offset)
    return train_stage(start, model_cfg, train, tcfg, weights=table.weights)


def two_stage_train(train: FrameSet, model_cfg: ModelConfig, tcfg: TrainConfig, out_dir=None) -> TwoStageResult:
    """Stage 1 (CE) -> confidence weights -> stage 2 (weighted CE).

    With ``out_dir`` every artifact is written there; on failure the files
    written by this call are removed.
    """
    out = Path(out_dir) if out_dir is not None else None
    written: list[Path] = []

    def emit(name, writer):
        if out is not None:
            path = out / name
            writer(path)
            written.append(path)

    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        log.info("stage 1: cross entropy on %d frames", len(train))
        p1, h1 = train_stage(init_params(model_cfg, tcfg.init_seed), model_cfg, train, tcfg)
        emit("stage1.afn", lambda p: save_checkpoint(p, p1, model_cfg))
        emit("history_stage1.csv", lambda p: p.write_text(h1.to_csv()))
        table = compute_instance_weights(p1, model_cfg, train, tcfg.k)
        emit("weights.csv", table.save)
        log.info("stage 2: weighted cross entropy, mean weight %.4f", table.weights.mean())
        p2, h2 = run_stage2(train, model_cfg, tcfg, table, p1)
        emit("stage2.afn", lambda p: save_checkpoint(p, p2, model_cfg))
        emit("history_stage2.csv", lambda p: p.write_text(h2.to_csv()))
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return TwoStageResult(p1, table, p2, h1, h2)


def with_overrides(tcfg: TrainConfig, **changes) -> TrainConfig:
    return replace(tcfg, **changes)
