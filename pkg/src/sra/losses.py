"""Training objectives: next-token cross-entropy plus the router auxiliaries
(load balance, anchor dispersion, z-loss) and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .router import AnchorSet

BALANCE_EPS = 1e-8


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy in nats, log-sum-exp stable.

    logits: (tokens, vocab); targets: (tokens,) int64 in [0, vocab).
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be (tokens, vocab), got {tuple(logits.shape)}")
    if targets.shape != logits.shape[:1]:
        raise ValueError(f"targets shape {tuple(targets.shape)} does not match logits")
    n_tokens, vocab = logits.shape
    if n_tokens < 1:
        raise ValueError("need at least one token")
    if int(targets.min()) < 0 or int(targets.max()) >= vocab:
        raise ValueError(f"target ids must lie in [0, {vocab})")
    return F.cross_entropy(logits, targets)


def balance_loss(all_scores: torch.Tensor) -> torch.Tensor:
    """Load-balance penalty: N * Var(p_mean) / (Mean(p_mean)^2 + eps).

    p_mean is the softmax routing distribution averaged over tokens; the
    variance is the population variance. Zero exactly when every expert gets
    the same average probability mass. Consumes pre-noise scores.
    """
    if all_scores.ndim != 2:
        raise ValueError(f"scores must be (tokens, n_experts), got {tuple(all_scores.shape)}")
    if all_scores.shape[0] < 1:
        raise ValueError("need at least one token")
    n_experts = all_scores.shape[1]
    p_mean = torch.softmax(all_scores, dim=-1).mean(dim=0)
    mean = p_mean.mean()
    var = ((p_mean - mean) ** 2).mean()
    return n_experts * var / (mean * mean + BALANCE_EPS)


def dispersion_loss(anchors: AnchorSet) -> torch.Tensor:
    """Mean pairwise cosine similarity over ordered anchor pairs (i != j).

    Minimizing pushes anchors apart; the value lives in [-1/(N-1), 1].
    """
    a = anchors.anchors
    n = anchors.n_experts
    norms = a.norm(dim=1)
    cos = (a @ a.t()) / (norms[:, None] * norms[None, :] + anchors.eps)
    off_diag = cos.sum() - cos.diagonal().sum()
    return off_diag / (n * (n - 1))


def z_loss(all_scores: torch.Tensor) -> torch.Tensor:
    """Mean squared log-sum-exp of the per-token score rows (keeps logits small)."""
    if all_scores.ndim != 2:
        raise ValueError(f"scores must be (tokens, n_experts), got {tuple(all_scores.shape)}")
    if all_scores.shape[0] < 1:
        raise ValueError("need at least one token")
    return torch.logsumexp(all_scores, dim=-1).square().mean()


@dataclass
class LossBreakdown:
    """Unweighted loss terms plus their weighted total and the coefficients used."""

    lm: torch.Tensor | float
    balance: torch.Tensor | float
    dispersion: torch.Tensor | float
    z: torch.Tensor | float
    total: torch.Tensor | float
    alpha: float
    beta: float
    gamma: float

    def to_floats(self) -> "LossBreakdown":
        def as_float(v: torch.Tensor | float) -> float:
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(
            lm=as_float(self.lm), balance=as_float(self.balance),
            dispersion=as_float(self.dispersion), z=as_float(self.z),
            total=as_float(self.total),
            alpha=self.alpha, beta=self.beta, gamma=self.gamma,
        )


def total_loss(lm: torch.Tensor | float, balance: torch.Tensor | float,
               dispersion: torch.Tensor | float, z: torch.Tensor | float,
               alpha: float = 0.4, beta: float = 0.6,
               gamma: float = 0.0) -> LossBreakdown:
    """total = lm + alpha*balance + beta*dispersion + gamma*z (fields stay unweighted)."""
    if alpha < 0 or beta < 0 or gamma < 0:
        raise ValueError(f"loss coefficients must be >= 0, got {(alpha, beta, gamma)}")
    total = lm + alpha * balance + beta * dispersion + gamma * z
    return LossBreakdown(lm=lm, balance=balance, dispersion=dispersion, z=z,
                         total=total, alpha=alpha, beta=beta, gamma=gamma)


def aggregate_aux_losses(scores_per_layer: Sequence[torch.Tensor],
                         anchor_sets: Sequence[AnchorSet],
                         ) -> tuple[torch.Tensor | float, torch.Tensor | float, torch.Tensor | float]:
    """Layer-averaged (balance, dispersion, z) so coefficients don't scale with depth.

    Models without routed layers (dense) get 0.0 for balance/z; models without
    anchors (learned-gate) get 0.0 dispersion.
    """
    if scores_per_layer:
        balance = sum(balance_loss(s) for s in scores_per_layer) / len(scores_per_layer)
        z = sum(z_loss(s) for s in scores_per_layer) / len(scores_per_layer)
    else:
        balance, z = 0.0, 0.0
    if anchor_sets:
        dispersion = sum(dispersion_loss(a) for a in anchor_sets) / len(anchor_sets)
    else:
        dispersion = 0.0
    return balance, dispersion, z
