"""Training: MSE objective, AdamW, plateau LR schedule, gradient clipping,
the epoch loop with a JSONL metrics log, and evaluation metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import CDTModel, forward_batch, predict, save_checkpoint
from .stats import UndefinedStatisticError, pearson, spearman
from .tensor import ConfigError, ContractError, ShapeError, Tape, Tensor, backward, mse
from .world import assert_no_leakage

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; training cannot continue."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    max_epochs: int = 50
    early_stop_patience: int | None = 25   # epochs without a better val r
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        for name in ("lr", "weight_decay", "eps", "clip_norm", "plateau_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in (0, 1), got {self.betas}")
        if self.plateau_factor >= 1.0:
            raise ConfigError("plateau_factor must be < 1")
        if int(self.plateau_patience) != self.plateau_patience or self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be an integer >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 or None")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------------------
# loss and optimizer pieces
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over batch and genes of the squared error."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    return mse(pred, target)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
               cfg: TrainConfig, lr: float | None = None) -> None:
    """One AdamW update in place. Weight decay is decoupled from the moments."""
    lr = cfg.lr if lr is None else lr
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient at step {state.t + 1} in: {', '.join(bad[:5])}")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 10
    best: float = math.inf
    bad_epochs: int = 0


def plateau_scheduler_step(state: PlateauState, val_loss: float) -> float:
    """Halve (by ``factor``) the LR after ``patience`` calls without a strict
    improvement. Returns the LR to use next."""
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float = 1.0):
    """Scale all gradients together when their global L2 norm exceeds
    ``max_norm``. Returns ``(grads, pre_clip_norm)``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        grads = {n: g * s for n, g in grads.items()}
    return dict(grads), norm


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    cell_level_pearson: float | None
    cell_level_spearman: float | None
    per_gene_pseudobulk_pearson: dict      # perturbed gene -> r (None if undefined)
    mean_pseudobulk_r: float | None
    train_val_gap: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _safe(fn, x, y):
    try:
        return fn(x, y)
    except UndefinedStatisticError:
        return None


def evaluate_predictions(pred, cells: Sequence, train_r: float | None = None) -> EvalReport:
    """Metrics from precomputed predictions ``[n, G]`` aligned with ``cells``."""
    pred = np.asarray(pred, dtype=np.float64)
    if len(cells) < 2:
        raise ContractError("evaluation needs at least two cells")
    target = np.stack([np.asarray(c.target, dtype=np.float64) for c in cells])
    if pred.shape != target.shape:
        raise ShapeError(f"predictions {pred.shape} vs targets {target.shape}")
    groups: dict = {}
    for i, c in enumerate(cells):
        groups.setdefault(c.perturbed_gene, []).append(i)
    per_gene = {}
    for gene in sorted(groups):
        idx = groups[gene]
        if len(idx) < 2:
            raise ContractError(f"perturbed gene {gene} has fewer than two cells")
        per_gene[gene] = _safe(pearson, pred[idx].mean(axis=0), target[idx].mean(axis=0))
    defined = [r for r in per_gene.values() if r is not None]
    cell_r = _safe(pearson, pred, target)
    return EvalReport(
        cell_level_pearson=cell_r,
        cell_level_spearman=_safe(spearman, pred, target),
        per_gene_pseudobulk_pearson=per_gene,
        mean_pseudobulk_r=float(np.mean(defined)) if defined else None,
        train_val_gap=(train_r - cell_r) if train_r is not None and cell_r is not None else None,
    )


def evaluate_metrics(model: CDTModel, val_cells: Sequence, dna_lookup,
                     train_cells: Sequence | None = None, batch_size: int = 64) -> EvalReport:
    train_r = None
    if train_cells:
        tp = predict(model, dna_lookup, train_cells, batch_size)
        train_r = _safe(pearson, tp, np.stack([c.target for c in train_cells]))
    return evaluate_predictions(predict(model, dna_lookup, val_cells, batch_size), val_cells, train_r)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CDTModel             # best-val parameters
    history: list
    best_epoch: int
    final_model: CDTModel


def _grads(model: CDTModel, dna, expr, target, rng, loss_scale: float = 1.0):
    with Tape() as tape:
        pred, _ = forward_batch(model, dna, expr, training=True, rng=rng)
        loss = mse_loss(pred, target)
        backward(loss, tape)
    grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
    return float(loss.data), pred.data, grads


def _r(pred, target) -> float | None:
    return _safe(pearson, pred, target)


def train_loop(model: CDTModel, train_cells: Sequence, val_cells: Sequence, dna_lookup,
               cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Mini-batch AdamW training with a best-val-r checkpoint.

    The metrics log has one JSON object per epoch. ``train_r`` is computed
    from the training-mode predictions made during the epoch.
    """
    assert_no_leakage(train_cells, val_cells)
    model = model.copy()
    for p in model.params.values():
        p.requires_grad = True
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    val_target = np.stack([c.target for c in val_cells]) if val_cells else None
    adam = AdamState()
    sched = PlateauState(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    best_r, best_epoch, best = -math.inf, 0, model.copy()
    history = []
    n = len(train_cells)
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = rng.permutation(n)
        preds = np.empty((n, model.config.n_genes))
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [train_cells[i] for i in idx]
            dna = np.stack([dna_lookup[c.locus_id] for c in batch])
            expr = np.stack([c.expr for c in batch])
            target = np.stack([c.target for c in batch])
            loss, pred, grads = _grads(model, dna, expr, target, rng)
            grads, _ = clip_grad_norm(grads, cfg.clip_norm)
            adamw_step(model.params, grads, adam, cfg, lr=sched.lr)
            preds[idx] = pred
            losses.append(loss * len(idx))
        train_loss = float(sum(losses) / max(n, 1))
        train_target = np.stack([c.target for c in train_cells])
        row = {"epoch": epoch, "lr": sched.lr, "train_loss": train_loss,
               "train_r": _r(preds, train_target)}
        if val_cells:
            vp = predict(model, dna_lookup, val_cells)
            row["val_loss"] = float(np.mean((vp - val_target) ** 2))
            row["val_r"] = _r(vp, val_target)
        else:
            row["val_loss"], row["val_r"] = train_loss, row["train_r"]
        history.append(row)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        log.info("epoch %d loss %.4f val %.4f val_r %s", epoch, train_loss, row["val_loss"], row["val_r"])

        score = row["val_r"] if row["val_r"] is not None else -math.inf
        if score > best_r:
            best_r, best_epoch, best = score, epoch, model.copy()
            if out is not None:
                save_checkpoint(out / "best.ckpt", best, {"epoch": epoch, "val_r": score,
                                                          "train_config": asdict(cfg)})
        plateau_scheduler_step(sched, row["val_loss"])
        if cfg.early_stop_patience is not None and epoch - best_epoch >= cfg.early_stop_patience:
            break
    if out is not None and best_epoch == 0:
        save_checkpoint(out / "best.ckpt", best, {"epoch": 0, "train_config": asdict(cfg)})
    return TrainResult(best, history, best_epoch, model)
