"""Training objectives with hand-written gradients.

``contrastive_loss``, ``focal_loss`` and ``classification_loss`` are pure
functions returning ``(loss, grad)``.  ``stage1_loss`` / ``stage2_loss`` run a
full forward/backward pass over a :class:`Batch` and accumulate gradients into
the model's parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, l2_normalize_rows, l2_normalize_rows_backward, softmax_rows
from .proto_head import (
    ModelState,
    generate_negatives,
    generate_negatives_backward,
    project,
    similarity_scores,
    similarity_scores_backward,
)


@dataclass
class ContrastiveConfig:
    tau: float = 0.2

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass
class FocalConfig:
    focal_exponent: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.focal_exponent) or self.focal_exponent < 0:
            raise ValueError("focal_exponent must be finite and >= 0")


@dataclass
class ContrastiveResult:
    loss: float
    grad: np.ndarray
    n_anchors: int

    @property
    def flagged(self) -> bool:
        """True when no anchor had a same-category partner."""
        return self.n_anchors == 0


def contrastive_loss(r, labels, cfg: ContrastiveConfig = ContrastiveConfig()) -> ContrastiveResult:
    """Supervised contrastive loss over L2-normalised embeddings.

    Anchors without another member of their category in the batch are left out
    of both the sum and the averaging count.
    """
    r = as_matrix(r, "r")
    labels = np.asarray(labels).reshape(-1)
    M = r.shape[0]
    if labels.size != M:
        raise ValueError("labels must align with rows of r")
    grad = np.zeros_like(r)
    if M < 2:
        return ContrastiveResult(0.0, grad, 0)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    valid = same.any(axis=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return ContrastiveResult(0.0, grad, 0)

    z, _ = l2_normalize_rows(r)
    S = (z @ z.T) / cfg.tau
    off = ~np.eye(M, dtype=bool)
    S_masked = np.where(off, S, -np.inf)
    row_max = S_masked.max(axis=1, keepdims=True)
    e = np.where(off, np.exp(S_masked - row_max), 0.0)
    e_pos = np.where(same, e, 0.0)
    denom = e.sum(axis=1)
    num = e_pos.sum(axis=1)
    v = np.flatnonzero(valid)
    loss = float(np.sum(np.log(denom[v]) - np.log(num[v])) / n_valid)

    G = np.zeros((M, M))
    G[v] = (e[v] / denom[v, None] - e_pos[v] / num[v, None]) / n_valid
    gz = (G + G.T) @ z / cfg.tau
    return ContrastiveResult(loss, l2_normalize_rows_backward(gz, r), n_valid)


def focal_loss(p, y, cfg: FocalConfig = FocalConfig()) -> tuple[float, np.ndarray]:
    """Mean focal loss; ``y`` holds 0/1 targets of the same shape as ``p``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"p {p.shape} and y {y.shape} differ in shape")
    if p.size == 0:
        return 0.0, np.zeros_like(p)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    g = cfg.focal_exponent
    pos = y == 1
    q = 1.0 - p
    lp, lq = np.log(p), np.log(q)
    per = np.where(pos, -(q ** g) * lp, -(p ** g) * lq)
    if g == 0:
        d_pos = -1.0 / p
        d_neg = 1.0 / q
    else:
        d_pos = g * q ** (g - 1) * lp - q ** g / p
        d_neg = -g * p ** (g - 1) * lq + p ** g / q
    grad = np.where(pos, d_pos, d_neg) / p.size
    return float(per.mean()), grad


def classification_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy averaged over rows."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, t = logits.shape
    if labels.size != n:
        raise ValueError("labels must align with rows of logits")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= t:
        raise ValueError(f"labels must lie in [0, {t})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    grad = softmax_rows(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# -- stage compositions -------------------------------------------------------

@dataclass
class Batch:
    """ID objects (features + categories) and background proposals of one step."""
    Q: np.ndarray
    labels: np.ndarray
    Q_bg: np.ndarray = None

    def __post_init__(self):
        self.Q = as_matrix(self.Q, "Q")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.Q_bg is None:
            self.Q_bg = np.zeros((0, self.Q.shape[1]))
        self.Q_bg = as_matrix(self.Q_bg, "Q_bg")
        if self.Q_bg.shape[0] == 0:
            self.Q_bg = self.Q_bg.reshape(0, self.Q.shape[1])


@dataclass
class LossOptions:
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    T: float = 2.0
    use_contrastive: bool = True
    use_negatives: bool = True
    use_background: bool = True


@dataclass
class StageLoss:
    total: float
    parts: dict
    embeddings: np.ndarray
    contrastive_flagged: bool = False


def _stage1_forward(batch: Batch, state: ModelState, opts: LossOptions):
    logits = state.classifier.forward(batch.Q)
    l_cls, g_logits = classification_loss(logits, batch.labels)
    r, pcache = project(batch.Q, state.projection, return_cache=True)
    if opts.use_contrastive:
        con = contrastive_loss(r, batch.labels, opts.contrastive)
    else:
        con = ContrastiveResult(0.0, np.zeros_like(r), 0)
    return l_cls, g_logits, r, pcache, con


def stage1_loss(batch: Batch, state: ModelState, opts: LossOptions = LossOptions()) -> StageLoss:
    """Classification surrogate plus contrastive loss; gradients accumulated into ``state``."""
    l_cls, g_logits, r, pcache, con = _stage1_forward(batch, state, opts)
    state.classifier.backward(g_logits, batch.Q)
    state.projection.backward(con.grad, pcache)
    parts = {"cls": l_cls, "con": con.loss}
    return StageLoss(l_cls + con.loss, parts, r, con.flagged)


def stage2_loss(batch: Batch, state: ModelState, opts: LossOptions = LossOptions()) -> StageLoss:
    """Stage-1 terms plus the focal similarity loss.

    Focal targets: ``(r_i, p_{l_i})`` -> 1, ``(r_i, p_j)`` for ``j != l_i`` -> 0,
    every negative embedding against every prototype -> 0, every background
    embedding against every prototype -> 0.  Only collected prototypes take part.
    """
    l_cls, g_logits, r, pcache, con = _stage1_forward(batch, state, opts)
    bank, sim = state.bank, state.similarity
    idx = bank.seen_index
    P = bank.p[idx]
    grad_r = con.grad.copy()

    blocks = []  # (scores, targets, backward-callback)
    s_id, c_id = similarity_scores(r, P, sim, return_cache=True)
    blocks.append((s_id, (batch.labels[:, None] == idx[None, :]).astype(np.int64), ("id", c_id)))
    if opts.use_negatives and idx.size and r.shape[0]:
        r_neg, ncache = generate_negatives(r, bank, opts.T, return_cache=True)
        s_neg, c_neg = similarity_scores(r_neg, P, sim, return_cache=True)
        blocks.append((s_neg, np.zeros_like(s_neg, dtype=np.int64), ("neg", c_neg, ncache)))
    bg_cache = None
    if opts.use_background and batch.Q_bg.shape[0]:
        r_bg, bg_cache = project(batch.Q_bg, state.projection, return_cache=True)
        s_bg, c_bg = similarity_scores(r_bg, P, sim, return_cache=True)
        blocks.append((s_bg, np.zeros_like(s_bg, dtype=np.int64), ("bg", c_bg)))

    flat_p = np.concatenate([b[0].reshape(-1) for b in blocks])
    flat_y = np.concatenate([b[1].reshape(-1) for b in blocks])
    l_rn, g_flat = focal_loss(flat_p, flat_y, opts.focal)

    offset = 0
    for s, _, info in blocks:
        g = g_flat[offset:offset + s.size].reshape(s.shape)
        offset += s.size
        g_in = similarity_scores_backward(g, sim, info[1])
        if info[0] == "id":
            grad_r += g_in
        elif info[0] == "neg":
            grad_r += generate_negatives_backward(g_in, info[2])
        else:
            state.projection.backward(g_in, bg_cache)

    state.classifier.backward(g_logits, batch.Q)
    state.projection.backward(grad_r, pcache)
    parts = {"cls": l_cls, "con": con.loss, "rn": l_rn}
    return StageLoss(l_cls + con.loss + l_rn, parts, r, con.flagged)
