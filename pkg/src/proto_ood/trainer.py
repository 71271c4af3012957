"""Three-phase training schedule, optimiser and training report.

Epoch ``e`` (0-based) runs:

* ``e < lambda_start``                        classification + contrastive
* ``lambda_start <= e < lambda_start + omega`` same, plus prototype EMA updates
* ``e >= lambda_start + omega``                adds the focal similarity loss
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetSplit, Kind
from .losses import Batch, ContrastiveConfig, FocalConfig, LossOptions, stage1_loss, stage2_loss
from .numerics import Parameter, zero_grads
from .proto_head import ModelState, OODDecisionConfig, save_checkpoint, update_prototypes

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_neg_generator", "no_contrastive_no_neg")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    lambda_start: int = 20
    omega_gap: int = 5
    alpha: float = 0.9
    tau: float = 0.2
    T: float = 2.0
    focal_exponent: float = 2.0
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    ablation: str = "full"
    d: int = 16
    proj_hidden: int = 64
    sim_hidden: int = 64
    eq4_literal: bool = False

    @classmethod
    def voc_schedule(cls, **overrides) -> "TrainConfig":
        """Schedule used for Pascal VOC scale training (lambda=40, omega=5)."""
        base = dict(epochs=60, lambda_start=40, omega_gap=5)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lambda_start < 0 or self.omega_gap < 0:
            raise ConfigError("lambda_start and omega_gap must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not (self.tau > 0 and self.T > 0 and self.learning_rate > 0):
            raise ConfigError("tau, T and learning_rate must be > 0")
        if self.focal_exponent < 0:
            raise ConfigError("focal_exponent must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")

    def loss_options(self) -> LossOptions:
        return LossOptions(
            contrastive=ContrastiveConfig(self.tau),
            focal=FocalConfig(self.focal_exponent),
            T=self.T,
            use_contrastive=self.ablation != "no_contrastive_no_neg",
            use_negatives=self.ablation == "full",
            use_background=True,
        )

    def phase(self, epoch: int) -> str:
        if epoch < self.lambda_start:
            return "warmup"
        if epoch < self.lambda_start + self.omega_gap:
            return "collect"
        return "similarity"


class Adam:
    """Bias-corrected Adam; ``plain=True`` gives vanilla gradient descent."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, plain: bool = False):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.plain = lr, beta1, beta2, eps, plain
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.steps = [0] * len(params)

    def step(self, params: list[Parameter] | None = None) -> None:
        """Update ``params`` (default: all) from their accumulated gradients."""
        selected = set(id(p) for p in (params if params is not None else self.params))
        for p in self.params:
            if id(p) in selected and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in parameter {p.name}")
        for k, p in enumerate(self.params):
            if id(p) not in selected:
                continue
            self.steps[k] += 1
            t = self.steps[k]
            if self.plain:
                p.value -= self.lr * p.grad
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad * p.grad
            m_hat = self.m[k] / (1 - self.beta1 ** t)
            v_hat = self.v[k] / (1 - self.beta2 ** t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def step_optimizer(optimizer: Adam, params: list[Parameter] | None = None) -> None:
    optimizer.step(params)


@dataclass
class EpochLog:
    epoch: int
    phase: str
    cls: float
    con: float
    rn: float
    total: float
    batches: int
    prototype_norms: list[float]
    similarity_updated: bool

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainReport:
    epochs: list[EpochLog] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_path: str | None = None

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("".join(e.to_json() + "\n" for e in self.epochs), encoding="utf-8")
        final = self.epochs[-1] if self.epochs else None
        summary = {
            "epochs": len(self.epochs),
            "final_total_loss": final.total if final else None,
            "final_prototype_norms": final.prototype_norms if final else None,
            "checkpoint": self.checkpoint_path,
        }
        summary_path = out_dir / "train_summary.json"
        summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return log_path, summary_path


def _split_arrays(split: DatasetSplit):
    ids = [r for r in split.records if r.kind is Kind.ID]
    bgs = [r for r in split.records if r.kind is Kind.BACKGROUND]
    Q = np.stack([r.feature for r in ids]) if ids else np.zeros((0, split.h))
    y = np.array([r.category for r in ids], dtype=np.int64)
    Q_bg = np.stack([r.feature for r in bgs]) if bgs else np.zeros((0, split.h))
    return Q, y, Q_bg


def train_arrays(Q: np.ndarray, y: np.ndarray, Q_bg: np.ndarray, t: int, cfg: TrainConfig,
                 decision: OODDecisionConfig | None = None) -> tuple[ModelState, TrainReport]:
    """Train on raw arrays: ID features ``Q`` with categories ``y``, background ``Q_bg``."""
    cfg.validate()
    h = Q.shape[1]
    if not cfg.d < h:
        raise ConfigError(f"d={cfg.d} must be smaller than feature width h={h}")
    if Q.shape[0] < cfg.batch_size:
        raise ConfigError(f"need at least batch_size={cfg.batch_size} ID records, got {Q.shape[0]}")
    if cfg.epochs <= cfg.lambda_start + cfg.omega_gap:
        logger.warning("schedule never reaches the similarity phase (epochs=%d, lambda+omega=%d)",
                       cfg.epochs, cfg.lambda_start + cfg.omega_gap)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    state = ModelState.create(t, h, cfg.d, cfg.proj_hidden, cfg.sim_hidden, cfg.alpha, rng=rng,
                              eq4_literal=cfg.eq4_literal, decision=decision)
    opts = cfg.loss_options()
    opt = Adam(state.parameters(), lr=cfg.learning_rate, plain=cfg.optimizer == "sgd")
    stage1_params = state.classifier.parameters() + state.projection.parameters()

    # ID and background records are shuffled together, so each batch carries
    # the background proposals that co-occur with its objects.
    n_id, n_bg = Q.shape[0], Q_bg.shape[0]
    is_bg = np.concatenate([np.zeros(n_id, dtype=bool), np.ones(n_bg, dtype=bool)])
    local = np.concatenate([np.arange(n_id), np.arange(n_bg)])
    per_batch = cfg.batch_size * (n_id + n_bg) // max(n_id, 1)

    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        phase = cfg.phase(epoch)
        order = rng.permutation(n_id + n_bg)
        sums = {"cls": 0.0, "con": 0.0, "rn": 0.0, "total": 0.0}
        n_batches = 0
        for b0 in range(0, order.size, per_batch):
            sel = order[b0:b0 + per_batch]
            id_sel = local[sel[~is_bg[sel]]]
            if id_sel.size < 2:
                continue
            batch = Batch(Q[id_sel], y[id_sel], Q_bg[local[sel[is_bg[sel]]]])
            zero_grads(state.parameters())
            if phase == "similarity":
                res = stage2_loss(batch, state, opts)
                opt.step()
            else:
                res = stage1_loss(batch, state, opts)
                opt.step(stage1_params)
            if not np.isfinite(res.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            if phase != "warmup":
                update_prototypes(state.bank, res.embeddings, batch.labels)
            for k in ("cls", "con", "rn"):
                sums[k] += res.parts.get(k, 0.0)
            sums["total"] += res.total
            n_batches += 1
        denom = max(n_batches, 1)
        log = EpochLog(epoch, phase, sums["cls"] / denom, sums["con"] / denom, sums["rn"] / denom,
                       sums["total"] / denom, n_batches,
                       [float(np.linalg.norm(row)) for row in state.bank.p], phase == "similarity")
        report.epochs.append(log)
        logger.info("epoch %d [%s] total=%.4f cls=%.4f con=%.4f rn=%.4f", epoch, phase,
                    log.total, log.cls, log.con, log.rn)
    report.wall_clock = time.perf_counter() - start
    return state, report


def train(train_split: DatasetSplit, cfg: TrainConfig, decision: OODDecisionConfig | None = None,
          checkpoint_path=None) -> tuple[ModelState, TrainReport]:
    Q, y, Q_bg = _split_arrays(train_split)
    state, report = train_arrays(Q, y, Q_bg, train_split.t, cfg, decision)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path, extra={"train_config": asdict(cfg)})
        report.checkpoint_path = str(checkpoint_path)
    return state, report
