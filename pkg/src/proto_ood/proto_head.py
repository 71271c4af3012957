"""Prototype head: projection, prototype bank, similarity module and OOD energy.

Objects are embedded by a two-layer projection head ``r = MLP(Q)``.  Each ID
category keeps a prototype updated by an exponential moving average of its
per-batch mean embedding.  A similarity module scores every (embedding,
prototype) pair, and the OOD energy of pair (i, c) is
``exp(cos(r_i, p_c)) * s_ic``; high energy means in-distribution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    MLP2,
    DimensionError,
    Linear,
    Parameter,
    as_matrix,
    cosine_rows,
    cosine_rows_backward,
    softmax_rows,
    softmax_rows_backward,
)

CHECKPOINT_MAGIC = "proto-ood-checkpoint"
CHECKPOINT_VERSION = 1
REDUCTIONS = ("max_over_categories", "at_predicted_category")


class StateError(RuntimeError):
    """The prototype bank is not ready for the requested operation."""


class CheckpointError(ValueError):
    pass


class ProjectionHead(MLP2):
    def __init__(self, h: int, d: int, hidden: int = 64, rng=None):
        if not d < h:
            raise ValueError(f"embedding width d={d} must be smaller than feature width h={h}")
        super().__init__(h, hidden, d, "none", rng=rng, name="projection")
        self.h, self.d = h, d


class SimilarityModule(MLP2):
    """Scores concatenated ``[r_i, p_j]`` pairs.

    By default ``Linear -> ReLU -> Linear -> Sigmoid``.  ``eq4_literal=True``
    inserts a second ReLU before the sigmoid, which confines scores to
    ``[0.5, 1)``; kept for comparison only.
    """

    def __init__(self, d: int, hidden: int = 64, rng=None, eq4_literal: bool = False):
        super().__init__(2 * d, hidden, 1, "relu_sigmoid" if eq4_literal else "sigmoid", rng=rng, name="similarity")
        self.d = d
        self.eq4_literal = eq4_literal


@dataclass
class PrototypeBank:
    t: int
    d: int
    alpha: float = 0.9
    p: np.ndarray = field(default=None)
    seen: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.p is None:
            self.p = np.zeros((self.t, self.d))
        if self.seen is None:
            self.seen = np.zeros(self.t, dtype=bool)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(self.t, self.d)
        self.seen = np.asarray(self.seen, dtype=bool).reshape(self.t)

    @property
    def seen_index(self) -> np.ndarray:
        return np.flatnonzero(self.seen)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.t, self.d, self.alpha, self.p.copy(), self.seen.copy())


@dataclass
class OODDecisionConfig:
    gamma: float = 1.0
    reduction: str = "max_over_categories"

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


@dataclass
class ModelState:
    projection: ProjectionHead
    similarity: SimilarityModule
    classifier: Linear
    bank: PrototypeBank
    decision: OODDecisionConfig = field(default_factory=OODDecisionConfig)

    @classmethod
    def create(cls, t: int, h: int, d: int = 16, proj_hidden: int = 64, sim_hidden: int = 64,
               alpha: float = 0.9, rng: np.random.Generator | None = None, eq4_literal: bool = False,
               decision: OODDecisionConfig | None = None) -> "ModelState":
        return cls(ProjectionHead(h, d, proj_hidden, rng=rng),
                   SimilarityModule(d, sim_hidden, rng=rng, eq4_literal=eq4_literal),
                   Linear(h, t, rng=rng, name="classifier"),
                   PrototypeBank(t, d, alpha),
                   decision or OODDecisionConfig())

    @property
    def t(self) -> int:
        return self.bank.t

    @property
    def h(self) -> int:
        return self.projection.h

    @property
    def d(self) -> int:
        return self.projection.d

    def parameters(self) -> list[Parameter]:
        return self.classifier.parameters() + self.projection.parameters() + self.similarity.parameters()


def project(Q, head: ProjectionHead, return_cache: bool = False):
    Q = as_matrix(Q, "Q")
    if Q.shape[0] == 0:
        Q = Q.reshape(0, head.h)
    return head.forward(Q, return_cache=return_cache)


def update_prototypes(bank: PrototypeBank, r, labels) -> PrototypeBank:
    """One EMA step per category present in the batch, applied in place."""
    r = as_matrix(r, "r")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        return bank
    if r.shape != (labels.size, bank.d):
        raise DimensionError(f"r has shape {r.shape}, expected ({labels.size}, {bank.d})")
    if labels.min() < 0 or labels.max() >= bank.t:
        raise ValueError(f"labels must lie in [0, {bank.t})")
    for c in np.unique(labels):
        mean = r[labels == c].mean(axis=0)
        bank.p[c] = bank.alpha * bank.p[c] + (1.0 - bank.alpha) * mean
        bank.seen[c] = True
    return bank


def negative_weights(W, T: float) -> np.ndarray:
    """Category weights ``softmax((1 - W) / T)``: dissimilar prototypes weigh more."""
    if not T > 0:
        raise ValueError("temperature T must be > 0")
    return softmax_rows((1.0 - as_matrix(W, "W")) / T)


def _seen_prototypes(bank: PrototypeBank) -> np.ndarray:
    idx = bank.seen_index
    if idx.size == 0:
        raise StateError("no prototype has been collected yet")
    return bank.p[idx]


def generate_negatives(r, bank: PrototypeBank, T: float, return_cache: bool = False):
    """Shift each embedding by a similarity-weighted mix of (mostly dissimilar) prototypes."""
    r = as_matrix(r, "r")
    P = _seen_prototypes(bank)
    W = cosine_rows(r, P)
    C = negative_weights(W, T)
    out = r + C @ P
    if return_cache:
        return out, (r, P, C, T)
    return out


def generate_negatives_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    r, P, C, T = cache
    g_C = grad_out @ P.T
    g_W = -softmax_rows_backward(g_C, C) / T
    return grad_out + cosine_rows_backward(g_W, r, P)


def _fuse(r: np.ndarray, P: np.ndarray) -> np.ndarray:
    n, m = r.shape[0], P.shape[0]
    return np.concatenate([np.repeat(r, m, axis=0), np.tile(P, (n, 1))], axis=1)


def similarity_scores(r, bank_or_prototypes, module: SimilarityModule, return_cache: bool = False):
    """``s[i, j]`` for every embedding ``r_i`` and prototype row ``p_j`` (n x t)."""
    r = as_matrix(r, "r")
    P = bank_or_prototypes.p if isinstance(bank_or_prototypes, PrototypeBank) else as_matrix(bank_or_prototypes, "p")
    if r.shape[0] == 0:
        r = r.reshape(0, module.d)
    if r.shape[1] != module.d or P.shape[1] != module.d:
        raise DimensionError(f"similarity module expects width {module.d}, got r {r.shape}, p {P.shape}")
    n, m = r.shape[0], P.shape[0]
    out, cache = module.forward(_fuse(r, P), return_cache=True)
    s = out.reshape(n, m)
    if return_cache:
        return s, (cache, n, m)
    return s


def similarity_scores_backward(grad_s: np.ndarray, module: SimilarityModule, cache) -> np.ndarray:
    """Accumulate module gradients; return the gradient w.r.t. ``r`` (prototypes are not trained)."""
    mcache, n, m = cache
    g_in = module.backward(grad_s.reshape(n * m, 1), mcache)
    return g_in[:, :module.d].reshape(n, m, module.d).sum(axis=1)


@dataclass
class EnergyResult:
    E: np.ndarray  # per-object scalar energy
    per_category: np.ndarray  # n x t, only columns of seen categories are meaningful
    W: np.ndarray
    s: np.ndarray


def ood_energy(r, bank: PrototypeBank, module: SimilarityModule, reduction: str = "max_over_categories",
               predicted=None) -> EnergyResult:
    """``E_ic = exp(cos(r_i, p_c)) * s_ic`` reduced over seen categories.

    With ``at_predicted_category`` the energy of ``predicted[i]`` is used; when
    ``predicted`` is omitted the nearest seen prototype (by cosine) stands in.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    r = as_matrix(r, "r")
    if r.shape[0] == 0:
        r = r.reshape(0, bank.d)
    idx = bank.seen_index
    if idx.size == 0:
        raise StateError("no prototype has been collected yet")
    W = cosine_rows(r, bank.p)
    s = similarity_scores(r, bank, module)
    Ec = np.exp(W) * s
    seen_E = Ec[:, idx]
    if reduction == "max_over_categories":
        E = seen_E.max(axis=1) if r.shape[0] else np.zeros(0)
    else:
        if predicted is None:
            cols = np.argmax(W[:, idx], axis=1)
        else:
            predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
            if predicted.size != r.shape[0]:
                raise DimensionError("predicted categories must align with rows of r")
            lookup = {c: k for k, c in enumerate(idx)}
            try:
                cols = np.array([lookup[c] for c in predicted], dtype=np.int64)
            except KeyError as exc:
                raise StateError(f"predicted category {exc.args[0]} has no prototype") from None
        E = seen_E[np.arange(r.shape[0]), cols] if r.shape[0] else np.zeros(0)
    return EnergyResult(E, Ec, W, s)


def classify_ood(E, cfg: OODDecisionConfig) -> np.ndarray:
    """1 = in-distribution (``E >= gamma``), 0 = OOD."""
    return (np.asarray(E, dtype=np.float64) >= cfg.gamma).astype(np.int64)


def score_features(state: ModelState, Q, reduction: str | None = None) -> EnergyResult:
    r = project(Q, state.projection)
    reduction = reduction or state.decision.reduction
    predicted = None
    if reduction == "at_predicted_category":
        predicted = np.argmax(state.classifier.forward(Q), axis=1) if len(r) else np.zeros(0, dtype=np.int64)
    return ood_energy(r, state.bank, state.similarity, reduction, predicted)


# -- checkpoint --------------------------------------------------------------

def _enc(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x).hex() for x in a.reshape(-1)]}


def _dec(obj: dict) -> np.ndarray:
    return np.array([float.fromhex(x) for x in obj["data"]], dtype=np.float64).reshape(obj["shape"])


def dumps_checkpoint(state: ModelState, extra: dict | None = None) -> str:
    """Serialise to JSON text; floats are stored as hex so the round-trip is bit exact."""
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "t": state.t, "h": state.h, "d": state.d,
        "proj_hidden": state.projection.n_hidden,
        "sim_hidden": state.similarity.n_hidden,
        "eq4_literal": state.similarity.eq4_literal,
        "alpha": float(state.bank.alpha).hex(),
        "seen": [bool(x) for x in state.bank.seen],
        "prototypes": _enc(state.bank.p),
        "decision": {"gamma": float(state.decision.gamma).hex(), "reduction": state.decision.reduction},
        "params": {p.name: _enc(p.value) for p in state.parameters()},
        "extra": extra or {},
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads_checkpoint(text: str) -> ModelState:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if not isinstance(doc, dict) or doc.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a proto-ood checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        state = ModelState.create(doc["t"], doc["h"], doc["d"], doc["proj_hidden"], doc["sim_hidden"],
                                  float.fromhex(doc["alpha"]), eq4_literal=doc["eq4_literal"],
                                  decision=OODDecisionConfig(float.fromhex(doc["decision"]["gamma"]),
                                                             doc["decision"]["reduction"]))
        state.bank.p = _dec(doc["prototypes"]).reshape(state.t, state.d)
        state.bank.seen = np.array(doc["seen"], dtype=bool).reshape(state.t)
        params = doc["params"]
        for p in state.parameters():
            value = _dec(params[p.name])
            if value.shape != p.value.shape:
                raise CheckpointError(f"parameter {p.name} has shape {value.shape}, expected {p.value.shape}")
            p.value = value
            p.zero_grad()
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc!r}") from None
    return state


def save_checkpoint(state: ModelState, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(state, extra).encode("utf-8"))


def load_checkpoint(path) -> ModelState:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return loads_checkpoint(text)
