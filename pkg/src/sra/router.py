"""Cosine-anchor expert routing.

Each expert owns a learnable anchor direction. Tokens are scored against the
anchor bank by cosine similarity, the top-k scores pick which experts run, and
a softmax over exactly those k scores mixes the expert outputs back together.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

ANCHOR_EPS = 1e-8


@dataclass
class AnchorSet:
    """A bank of anchor directions, one per expert (rows of ``anchors``)."""

    anchors: torch.Tensor  # (n_experts, dim)
    eps: float = ANCHOR_EPS
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.anchors.ndim != 2:
            raise ValueError(f"anchors must be 2-d, got shape {tuple(self.anchors.shape)}")
        n, d = self.anchors.shape
        if n < 2:
            raise ValueError(f"need at least 2 anchors, got {n}")
        if d < 1:
            raise ValueError(f"anchor dim must be >= 1, got {d}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.validate:
            with torch.no_grad():
                if not torch.isfinite(self.anchors).all():
                    raise ValueError("anchors contain non-finite entries")
                norms = self.anchors.norm(dim=1)
                if (norms <= self.eps).any():
                    bad = int((norms <= self.eps).nonzero()[0, 0])
                    raise ValueError(f"anchor row {bad} has near-zero norm")

    @property
    def n_experts(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]


def _check_bank_shape(n_experts: int, dim: int) -> None:
    if n_experts < 2:
        raise ValueError(f"n_experts must be >= 2, got {n_experts}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")


def orthogonal_rows(n_rows: int, dim: int, generator: torch.Generator,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Random rows that are orthonormal within each block of up to ``dim`` rows.

    Gaussian blocks are QR-orthonormalized in float64 (with the sign of R's
    diagonal folded in, so the distribution stays uniform and the result is
    deterministic), then cast to ``dtype``. When n_rows <= dim the whole matrix
    has orthonormal rows.
    """
    blocks = []
    remaining = n_rows
    while remaining > 0:
        rows = min(dim, remaining)
        gauss = torch.empty(dim, rows, dtype=torch.float64)
        gauss.normal_(0.0, 1.0, generator=generator)
        q, r = torch.linalg.qr(gauss)
        q = q * torch.where(torch.diagonal(r) < 0, -1.0, 1.0)
        blocks.append(q.t())
        remaining -= rows
    return torch.cat(blocks, dim=0).to(dtype)


def kaiming_rows(n_rows: int, dim: int, generator: torch.Generator,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Uniform(-b, b) rows with b = sqrt(6 / dim), fan-in taken as the row dim."""
    bound = math.sqrt(6.0 / dim)
    out = torch.empty(n_rows, dim, dtype=dtype)
    out.uniform_(-bound, bound, generator=generator)
    return out


def init_anchors_orthogonal(n_experts: int, dim: int, seed: int,
                            dtype: torch.dtype = torch.float32) -> AnchorSet:
    """Anchor bank with (block-)orthonormal rows; deterministic for a given seed."""
    _check_bank_shape(n_experts, dim)
    gen = torch.Generator().manual_seed(seed)
    return AnchorSet(orthogonal_rows(n_experts, dim, gen, dtype))


def init_anchors_kaiming(n_experts: int, dim: int, seed: int,
                         dtype: torch.dtype = torch.float32) -> AnchorSet:
    """Anchor bank drawn Uniform(-sqrt(6/dim), sqrt(6/dim)); deterministic per seed."""
    _check_bank_shape(n_experts, dim)
    gen = torch.Generator().manual_seed(seed)
    return AnchorSet(kaiming_rows(n_experts, dim, gen, dtype))


def resonance(token_repr: torch.Tensor, anchors: AnchorSet) -> torch.Tensor:
    """Cosine similarity of each token vector against every anchor.

    Accepts a single (dim,) vector or a (tokens, dim) batch and returns
    (n_experts,) or (tokens, n_experts). The similarity is
    dot(h, a_i) / (|h| * |a_i| + eps), computed in at least float32 regardless
    of the input dtype; a zero token vector scores 0 against every anchor.
    """
    if token_repr.shape[-1] != anchors.dim:
        raise ValueError(
            f"token dim {token_repr.shape[-1]} does not match anchor dim {anchors.dim}"
        )
    compute_dtype = token_repr.dtype
    if compute_dtype not in (torch.float32, torch.float64):
        compute_dtype = torch.float32
    h = token_repr.to(compute_dtype)
    a = anchors.anchors.to(compute_dtype)
    dots = h @ a.t()
    denom = h.norm(dim=-1, keepdim=True) * a.norm(dim=1) + anchors.eps
    return dots / denom


@dataclass
class RoutingDecision:
    """Top-k choice for each token: expert ids in descending (possibly noised)
    score order, and the softmax mixture weights over exactly those k scores."""

    indices: torch.Tensor  # (..., k) int64
    weights: torch.Tensor  # (..., k), rows sum to 1
    noise_sigma: float = 0.0

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def select_topk(scores: torch.Tensor, k: int, noise_sigma: float = 0.0,
                generator: torch.Generator | None = None) -> RoutingDecision:
    """Pick the k highest-scoring experts per token and softmax their scores.

    With noise_sigma > 0, i.i.d. Gaussian noise perturbs the scores before both
    the selection and the softmax (the caller is responsible for only enabling
    this during training). Exact ties break toward the lowest expert id.
    Gradients flow through the selected scores only.
    """
    n = scores.shape[-1]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if noise_sigma < 0.0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    perturbed = scores
    if noise_sigma > 0.0:
        noise = torch.empty_like(scores).normal_(0.0, noise_sigma, generator=generator)
        perturbed = scores + noise
    # Stable sort keeps the lowest expert id first among exact ties.
    order = torch.argsort(perturbed, dim=-1, descending=True, stable=True)
    indices = order[..., :k]
    weights = torch.softmax(perturbed.gather(-1, indices), dim=-1)
    return RoutingDecision(indices=indices, weights=weights, noise_sigma=float(noise_sigma))


def topk_dispatch(token_reprs: torch.Tensor, experts: Sequence[Callable[[torch.Tensor], torch.Tensor]],
                  decision: RoutingDecision) -> torch.Tensor:
    """Weighted sum of each token's selected experts' outputs.

    Expert-major: each expert runs once on the subset of tokens that chose it,
    so unselected experts contribute nothing (and receive no gradient).
    """
    out = torch.zeros_like(token_reprs)
    if token_reprs.shape[0] == 0:
        return out
    for expert_id, expert in enumerate(experts):
        slot_mask = decision.indices == expert_id  # (tokens, k)
        hit = slot_mask.any(dim=-1)
        if not bool(hit.any()):
            continue
        token_idx = hit.nonzero(as_tuple=True)[0]
        w = (decision.weights * slot_mask).sum(dim=-1)[token_idx]
        out = out.index_add(0, token_idx, w.unsqueeze(-1) * expert(token_reprs[token_idx]))
    return out


@dataclass
class LayerRecord:
    """Routing log for one layer: which experts each token used, with what weight."""

    indices: np.ndarray    # (tokens, k) int64
    weights: np.ndarray    # (tokens, k) float64
    positions: np.ndarray  # (tokens,) int64
    token_ids: np.ndarray  # (tokens,) int64, -1 where unknown

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def k(self) -> int:
        return int(self.indices.shape[1])

    @staticmethod
    def concat(records: Sequence["LayerRecord"]) -> "LayerRecord":
        if not records:
            raise ValueError("cannot concatenate zero records")
        return LayerRecord(
            indices=np.concatenate([r.indices for r in records], axis=0),
            weights=np.concatenate([r.weights for r in records], axis=0),
            positions=np.concatenate([r.positions for r in records], axis=0),
            token_ids=np.concatenate([r.token_ids for r in records], axis=0),
        )


def record_from_decision(decision: RoutingDecision, positions: np.ndarray,
                         token_ids: np.ndarray) -> LayerRecord:
    return LayerRecord(
        indices=decision.indices.detach().cpu().numpy().astype(np.int64),
        weights=decision.weights.detach().to(torch.float64).cpu().numpy(),
        positions=np.asarray(positions, dtype=np.int64),
        token_ids=np.asarray(token_ids, dtype=np.int64),
    )


@dataclass
class RoutingRecord:
    """Per-layer routing logs for a whole evaluation pass, plus run metadata."""

    layers: list[LayerRecord]
    meta: dict = field(default_factory=dict)

    def save_json(self, path: str | Path) -> None:
        payload = {
            "meta": self.meta,
            "layers": [
                {
                    "indices": layer.indices.tolist(),
                    "weights": layer.weights.tolist(),
                    "positions": layer.positions.tolist(),
                    "token_ids": layer.token_ids.tolist(),
                }
                for layer in self.layers
            ],
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load_json(cls, path: str | Path) -> "RoutingRecord":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        layers = []
        for entry in payload["layers"]:
            indices = np.asarray(entry["indices"], dtype=np.int64)
            if indices.ndim != 2:
                indices = indices.reshape(len(entry["positions"]), -1)
            weights = np.asarray(entry["weights"], dtype=np.float64).reshape(indices.shape)
            layers.append(LayerRecord(
                indices=indices,
                weights=weights,
                positions=np.asarray(entry["positions"], dtype=np.int64),
                token_ids=np.asarray(entry["token_ids"], dtype=np.int64),
            ))
        return cls(layers=layers, meta=payload.get("meta", {}))


def csr_forward(token_reprs: torch.Tensor, anchors: AnchorSet,
                experts: Sequence[Callable[[torch.Tensor], torch.Tensor]], k: int,
                noise_sigma: float = 0.0, generator: torch.Generator | None = None,
                ) -> tuple[torch.Tensor, LayerRecord, torch.Tensor]:
    """One full routed pass: cosine scores, (optionally noisy) top-k, weighted dispatch.

    token_reprs is (tokens, dim). Returns (outputs, record, scores) where scores
    is the pre-noise (tokens, n_experts) matrix that the auxiliary losses consume.
    """
    if len(experts) != anchors.n_experts:
        raise ValueError(f"got {len(experts)} experts for {anchors.n_experts} anchors")
    if token_reprs.ndim != 2:
        raise ValueError(f"token_reprs must be (tokens, dim), got {tuple(token_reprs.shape)}")
    scores = resonance(token_reprs, anchors)
    decision = select_topk(scores, k, noise_sigma=noise_sigma, generator=generator)
    outputs = topk_dispatch(token_reprs, experts, decision)
    n_tokens = token_reprs.shape[0]
    record = record_from_decision(
        decision,
        positions=np.arange(n_tokens, dtype=np.int64),
        token_ids=np.full(n_tokens, -1, dtype=np.int64),
    )
    return outputs, record, scores
