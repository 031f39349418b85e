"""Decoder-only language models: routed-experts variants and a dense baseline.

Blocks are pre-LayerNorm residual: x -> x + attn(ln(x)) -> h -> h + ffn(ln(h)),
with rotary positions applied to q/k and the output projection tied to the
input embedding. The feed-forward is either a bank of expert FFNs behind a
top-k router (scored by cosine-vs-anchors or by a learned linear gate) or a
single wide FFN for the dense baseline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .router import (
    ANCHOR_EPS,
    AnchorSet,
    LayerRecord,
    RoutingDecision,
    kaiming_rows,
    orthogonal_rows,
    record_from_decision,
    resonance,
    select_topk,
    topk_dispatch,
)

VARIANTS = ("sra", "standard_moe", "dense")
ANCHOR_INITS = ("orthogonal", "kaiming")
LN_EPS = 1e-5
ROPE_BASE = 10000.0


@dataclass
class ModelConfig:
    dim: int = 512
    n_layers: int = 4
    n_heads: int = 8
    n_experts: int = 128
    top_k: int = 2
    d_ff: int = 1024
    vocab_size: int = 32000
    max_seq_len: int = 256
    dropout: float = 0.1
    variant: str = "sra"
    anchor_init: str = "orthogonal"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.anchor_init not in ANCHOR_INITS:
            raise ValueError(f"anchor_init must be one of {ANCHOR_INITS}, got {self.anchor_init!r}")
        for name in ("dim", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} must be divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary embeddings")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.variant != "dense":
            if self.n_experts < 2:
                raise ValueError(f"n_experts must be >= 2 for routed variants, got {self.n_experts}")
            if not 1 <= self.top_k <= self.n_experts:
                raise ValueError(f"top_k must be in [1, {self.n_experts}], got {self.top_k}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**payload)


def rope_apply(x: torch.Tensor, positions: torch.Tensor, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate consecutive (even, odd) feature pairs by position-dependent angles.

    x: (..., seq, head_dim) with even head_dim; positions: (seq,) integers.
    Pair j turns by pos * base**(-2j/head_dim), so dot products between rotated
    queries and keys depend only on their relative offset. Position 0 is identity
    and the rotation preserves vector norms.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"head_dim must be even, got {d}")
    if positions.ndim != 1 or positions.shape[0] != x.shape[-2]:
        raise ValueError("positions must be a 1-d tensor matching the sequence length")
    half = d // 2
    freqs = base ** (-2.0 * torch.arange(half, dtype=x.dtype, device=x.device) / d)
    angles = positions.to(x.dtype)[:, None] * freqs[None, :]  # (seq, half)
    cos, sin = torch.cos(angles), torch.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out_even = even * cos - odd * sin
    out_odd = even * sin + odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


class CausalSelfAttention(nn.Module):
    """Multi-head causal self-attention with rotary q/k and no projection biases."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        bsz, seq, dim = x.shape
        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(bsz, seq, self.n_heads, self.head_dim).transpose(1, 2)
        q = rope_apply(split(self.wq(x)), positions)
        k = rope_apply(split(self.wk(x)), positions)
        v = split(self.wv(x))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(bsz, seq, dim)
        return self.wo(out)


class ExpertFFN(nn.Module):
    """Two-layer feed-forward expert: dim -> hidden -> dim with exact GELU, biased."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w_in = nn.Linear(dim, hidden, bias=True)
        self.w_out = nn.Linear(hidden, dim, bias=True)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.w_out(F.gelu(self.w_in(h)))


def expert_forward(expert: ExpertFFN, h: torch.Tensor) -> torch.Tensor:
    """Run one expert on a (tokens, dim) batch (or a single (dim,) vector)."""
    return expert(h)


class RoutedExperts(nn.Module):
    """An expert bank behind a top-k router.

    Scoring depends on the variant: cosine similarity against learnable anchors
    ("sra") or a bias-free learned linear gate producing raw scores
    ("standard_moe"). Everything downstream of the scores -- top-k selection,
    softmax weighting, dispatch -- is shared.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant == "sra":
            self.anchors: nn.Parameter | None = nn.Parameter(torch.empty(cfg.n_experts, cfg.dim))
            self.gate: nn.Linear | None = None
        else:
            self.anchors = None
            self.gate = nn.Linear(cfg.dim, cfg.n_experts, bias=False)
        self.experts = nn.ModuleList(ExpertFFN(cfg.dim, cfg.d_ff) for _ in range(cfg.n_experts))

    def anchor_set(self) -> AnchorSet:
        assert self.anchors is not None
        return AnchorSet(self.anchors, validate=False)

    def scores_for(self, flat: torch.Tensor) -> torch.Tensor:
        if self.anchors is not None:
            return resonance(flat, self.anchor_set())
        assert self.gate is not None
        return self.gate(flat)

    def forward(self, flat: torch.Tensor, k: int, noise_sigma: float,
                generator: torch.Generator | None,
                ) -> tuple[torch.Tensor, RoutingDecision, torch.Tensor]:
        scores = self.scores_for(flat)
        decision = select_topk(scores, k, noise_sigma=noise_sigma, generator=generator)
        out = topk_dispatch(flat, self.experts, decision)
        return out, decision, scores


def generator_dropout(x: torch.Tensor, p: float, generator: torch.Generator | None,
                      training: bool) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator (bit-reproducible runs)."""
    if not training or p <= 0.0:
        return x
    keep = torch.rand(x.shape, dtype=x.dtype, device=x.device, generator=generator) >= p
    return x * keep / (1.0 - p)


class Block(nn.Module):
    """Pre-LN residual block; dropout sits on the attention and FFN outputs only."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_attn = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        self.attn = CausalSelfAttention(cfg.dim, cfg.n_heads)
        self.ln_ffn = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        if cfg.variant == "dense":
            self.moe: RoutedExperts | None = None
            self.ffn: ExpertFFN | None = ExpertFFN(cfg.dim, 2 * cfg.d_ff)
        else:
            self.moe = RoutedExperts(cfg)
            self.ffn = None
        self.dropout = cfg.dropout

    def forward(self, x: torch.Tensor, positions: torch.Tensor, k: int, noise_sigma: float,
                generator: torch.Generator | None,
                ) -> tuple[torch.Tensor, RoutingDecision | None, torch.Tensor | None]:
        h = x + generator_dropout(self.attn(self.ln_attn(x), positions),
                                  self.dropout, generator, self.training)
        inner = self.ln_ffn(h)
        if self.moe is None:
            assert self.ffn is not None
            ffn_out = self.ffn(inner)
            decision, scores = None, None
        else:
            bsz, seq, dim = inner.shape
            flat_out, decision, scores = self.moe(inner.reshape(bsz * seq, dim),
                                                  k, noise_sigma, generator)
            ffn_out = flat_out.view(bsz, seq, dim)
        y = h + generator_dropout(ffn_out, self.dropout, generator, self.training)
        return y, decision, scores


@dataclass
class ModelOutput:
    logits: torch.Tensor             # (batch, seq, vocab)
    records: list[LayerRecord]       # one per routed layer; [] for dense
    all_scores: list[torch.Tensor]   # pre-noise (batch*seq, n_experts) per routed layer


class LanguageModel(nn.Module):
    """Tied-embedding decoder over byte-pair token ids."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.dim)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_out = nn.LayerNorm(config.dim, eps=LN_EPS)
        self.lm_head = nn.Linear(config.dim, config.vocab_size, bias=False)
        self.lm_head.weight = self.token_emb.weight  # tied storage

    def anchor_sets(self) -> list[AnchorSet]:
        out = []
        for block in self.blocks:
            if block.moe is not None and block.moe.anchors is not None:
                out.append(block.moe.anchor_set())
        return out

    def forward(self, token_ids: torch.Tensor, k: int | None = None,
                noise_sigma: float = 0.0,
                generator: torch.Generator | None = None) -> ModelOutput:
        """Next-token logits plus per-layer routing records and pre-noise scores.

        k defaults to config.top_k; routing noise is applied only in training
        mode, never in evaluation.
        """
        if token_ids.ndim != 2:
            raise ValueError(f"token_ids must be (batch, seq), got {tuple(token_ids.shape)}")
        bsz, seq = token_ids.shape
        if seq < 1 or seq > self.config.max_seq_len:
            raise ValueError(f"sequence length {seq} outside [1, {self.config.max_seq_len}]")
        if int(token_ids.min()) < 0 or int(token_ids.max()) >= self.config.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.config.vocab_size})")
        if k is None:
            k = self.config.top_k
        sigma = noise_sigma if self.training else 0.0

        x = self.token_emb(token_ids)
        positions = torch.arange(seq, device=token_ids.device)
        decisions: list[RoutingDecision] = []
        all_scores: list[torch.Tensor] = []
        for block in self.blocks:
            x, decision, scores = block(x, positions, k, sigma, generator)
            if decision is not None:
                decisions.append(decision)
                all_scores.append(scores)
        logits = self.lm_head(self.ln_out(x))

        flat_positions = np.arange(bsz * seq, dtype=np.int64)
        flat_ids = token_ids.detach().cpu().numpy().reshape(-1).astype(np.int64)
        records = [record_from_decision(d, flat_positions, flat_ids) for d in decisions]
        return ModelOutput(logits=logits, records=records, all_scores=all_scores)


def _init_weights(model: LanguageModel, seed: int) -> None:
    """Deterministic re-initialization of every parameter from one generator.

    Embeddings (and the tied output head) are N(0, 0.02) so an untrained model
    is a near-uniform predictor; other linear weights are N(0, 1/sqrt(fan_in)),
    biases zero, LayerNorm identity, anchors per config.anchor_init.
    """
    cfg = model.config
    gen = torch.Generator().manual_seed(seed)
    dtype = model.token_emb.weight.dtype

    def init_linear(linear: nn.Linear) -> None:
        fan_in = linear.weight.shape[1]
        linear.weight.normal_(0.0, fan_in ** -0.5, generator=gen)
        if linear.bias is not None:
            linear.bias.zero_()

    with torch.no_grad():
        model.token_emb.weight.normal_(0.0, 0.02, generator=gen)
        for block in model.blocks:
            for ln in (block.ln_attn, block.ln_ffn):
                ln.weight.fill_(1.0)
                ln.bias.zero_()
            for lin in (block.attn.wq, block.attn.wk, block.attn.wv, block.attn.wo):
                init_linear(lin)
            if block.moe is None:
                assert block.ffn is not None
                init_linear(block.ffn.w_in)
                init_linear(block.ffn.w_out)
            else:
                if block.moe.anchors is not None:
                    rows = (orthogonal_rows if cfg.anchor_init == "orthogonal" else kaiming_rows)(
                        cfg.n_experts, cfg.dim, gen, dtype)
                    block.moe.anchors.copy_(rows)
                else:
                    assert block.moe.gate is not None
                    init_linear(block.moe.gate)
                for expert in block.moe.experts:
                    init_linear(expert.w_in)
                    init_linear(expert.w_out)
        model.ln_out.weight.fill_(1.0)
        model.ln_out.bias.zero_()


def build_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32,
                device: str = "cpu") -> LanguageModel:
    """Construct and deterministically initialize a model.

    On device="meta" parameters get shapes but no values (useful for parameter
    counting at scales that would not fit in memory).
    """
    with torch.device(device):
        model = LanguageModel(config)
    model = model.to(dtype)
    if device != "meta":
        _init_weights(model, seed)
    return model


def count_parameters(model: LanguageModel) -> tuple[int, int]:
    """(total, active-per-token) parameter counts; tied tensors counted once.

    Active counts every parameter except the experts a token does not visit:
    with top-k routing, (n_experts - k) expert FFNs per layer sit idle.
    """
    total = sum(p.numel() for p in model.parameters())
    cfg = model.config
    if cfg.variant == "dense":
        return total, total
    first_moe = next(b.moe for b in model.blocks if b.moe is not None)
    per_expert = sum(p.numel() for p in first_moe.experts[0].parameters())
    inactive = (cfg.n_experts - cfg.top_k) * per_expert * cfg.n_layers
    return total, total - inactive
