"""Visual fusion, global-local attention, the classifier and the losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_EPS, DimensionError, DomainError, Tensor

CLASSES = ("non-rumour", "rumour")
RUMOUR = 1


@dataclass
class GlobalLocalAttentionReport:
    """Softmax scores over replies, aligned with node indices 1..n-1."""

    reply_indices: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def ranked(self) -> list[tuple[int, float]]:
        """(node index, score) sorted by descending score, then ascending index."""
        return sorted(zip(self.reply_indices, self.scores), key=lambda p: (-p[1], p[0]))


@dataclass
class Prediction:
    probs: Tensor
    conversation_id: Optional[str] = None

    @property
    def y_hat(self) -> np.ndarray:
        return self.probs.data

    @property
    def predicted_class(self) -> int:
        # np.argmax returns the first maximum, so exact ties go to non-rumour
        return int(np.argmax(self.probs.data))


def project_visual(raw: Tensor, W_v: Tensor) -> Tensor:
    if raw.ndim != 1 or W_v.shape[1] != raw.shape[0]:
        raise DimensionError(f"visual projection {W_v.shape} cannot take feature {raw.shape}")
    return W_v @ raw


def fuse_global(v: Tensor, f_g: Tensor) -> Tensor:
    return v + f_g


def global_local_attention(F_local: Tensor, F: Tensor, f_g_fused: Tensor,
                           aggregate_local: bool = False) -> tuple[Tensor, GlobalLocalAttentionReport]:
    """Score replies' local features against the fused global vector.

    Returns f_c = (1/N) sum_i alpha'_i f_i over replies i = 1..n-1 with
    N = n - 1; the summand uses the original node features unless
    ``aggregate_local`` is set. A source-only conversation gives f_c = 0.
    """
    if F_local.shape != F.shape:
        raise DimensionError(f"local features {F_local.shape} vs node features {F.shape}")
    d, n = F.shape
    if n == 1:
        return Tensor(np.zeros(d)), GlobalLocalAttentionReport()
    replies_local = F_local[:, 1:]
    scores = ad.softmax(replies_local.T @ f_g_fused)
    summand = replies_local if aggregate_local else F[:, 1:]
    f_c = ad.scale(summand @ scores, 1.0 / (n - 1))
    report = GlobalLocalAttentionReport(list(range(1, n)), [float(s) for s in scores.data])
    return f_c, report


def conversation_representation(f_c: Tensor, f_g_fused: Tensor) -> Tensor:
    return f_c + f_g_fused


def classify(f: Tensor, W_c: Tensor, b_c: Tensor, dropout: float = 0.0,
             rng: Optional[np.random.Generator] = None, training: bool = False,
             conversation_id: Optional[str] = None) -> Prediction:
    h = ad.dropout(f, dropout, rng, training)
    return Prediction(ad.softmax(W_c @ h + b_c), conversation_id)


def cross_entropy(y_hat: Tensor, y: int) -> Tensor:
    """-(y log p + (1-y) log(1-p)) on the rumour probability p, clamped at 1e-12."""
    if y not in (0, 1):
        raise DomainError(f"label must be 0 or 1, got {y!r}")
    p = y_hat[RUMOUR]
    if y == 1:
        return ad.neg(ad.log(p, LOG_EPS))
    return ad.neg(ad.log(1.0 - p, LOG_EPS))


def _check_simplex(p: np.ndarray, what: str, atol: float = 1e-6) -> None:
    if p.ndim != 1 or (p < -atol).any() or abs(p.sum() - 1.0) > atol:
        raise DomainError(f"{what} is not a probability vector: {p}")


def soften(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Re-temper a probability vector: softmax(log(p) / T)."""
    if temperature == 1.0:
        return probs
    z = np.log(np.maximum(probs, LOG_EPS)) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def kd_loss(y_s: Tensor, y_t, direction: str = "teacher_student") -> Tensor:
    """KL divergence between student and (constant) teacher distributions.

    ``direction="teacher_student"`` gives KL(teacher || student);
    ``"student_teacher"`` gives KL(student || teacher). Both clamp at 1e-12.
    """
    t = np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t, dtype=np.float64)
    _check_simplex(y_s.data, "student distribution")
    _check_simplex(t, "teacher distribution")
    if t.shape != y_s.shape:
        raise DimensionError(f"teacher {t.shape} vs student {y_s.shape}")
    log_t = np.log(np.maximum(t, LOG_EPS))
    if direction == "teacher_student":
        const = float(np.dot(t, log_t))
        return ad.add(ad.neg(ad.sum_all(ad.mul(ad.log(y_s), Tensor(t)))), const)
    if direction == "student_teacher":
        return ad.sum_all(ad.mul(y_s, ad.sub(ad.log(y_s), Tensor(log_t))))
    raise ValueError(f"unknown KD direction {direction!r}")


def total_loss(loss_ce: Tensor, loss_kd) -> Tensor:
    if not isinstance(loss_kd, Tensor):
        return ad.add(loss_ce, float(loss_kd))
    return loss_ce + loss_kd
