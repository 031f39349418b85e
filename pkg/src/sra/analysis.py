"""Routing diagnostics: expert utilization, specialization tables, per-token
traces, and anchor-geometry summaries, formatted as aligned text plus JSON/CSV."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Tokenizer
from .model import LanguageModel
from .router import AnchorSet, RoutingRecord


@dataclass
class LayerUtilization:
    layer: int
    counts: np.ndarray  # (n_experts,) tokens routed to each expert (slot counting)
    cv: float           # population std / mean of counts
    dead: int           # experts with zero tokens
    dead_ids: list[int]


@dataclass
class UtilizationStats:
    layers: list[LayerUtilization]
    k: int
    n_tokens: int  # routed tokens per layer

    @property
    def total_dead(self) -> int:
        return sum(layer.dead for layer in self.layers)


def utilization(record: RoutingRecord, n_experts: int) -> UtilizationStats:
    """Per-layer expert token counts with coefficient of variation and dead experts.

    Counts are slot counts: a token routed to an expert in any of its k slots
    adds one, so each layer's counts sum to exactly k * tokens.
    """
    if n_experts < 1:
        raise ValueError("n_experts must be positive")
    if not record.layers:
        raise ValueError("record has no layers")
    layers = []
    for li, layer in enumerate(record.layers):
        if len(layer) == 0:
            raise ValueError(f"layer {li} has no routed tokens")
        if layer.indices.min() < 0 or layer.indices.max() >= n_experts:
            raise ValueError(f"layer {li} has expert ids outside [0, {n_experts})")
        counts = np.bincount(layer.indices.reshape(-1), minlength=n_experts)
        mean = counts.mean()
        cv = float(counts.std() / mean)  # numpy std is the population std
        dead_ids = np.flatnonzero(counts == 0)
        layers.append(LayerUtilization(layer=li, counts=counts, cv=cv,
                                       dead=int(dead_ids.size), dead_ids=dead_ids.tolist()))
    return UtilizationStats(layers=layers, k=record.layers[0].k,
                            n_tokens=len(record.layers[0]))


@dataclass
class ExpertTokens:
    expert: int
    top_tokens: list[tuple[int, str, int]]  # (token id, printable form, count)


def specialization_table(record: RoutingRecord, tokenizer: Tokenizer, top_m: int = 10,
                         layer: int = 0) -> list[ExpertTokens]:
    """For each expert in one layer, the top_m token ids by routed frequency.

    Frequency ties break toward the lower token id; experts that saw fewer than
    top_m distinct tokens get shorter lists (possibly empty).
    """
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    if not 0 <= layer < len(record.layers):
        raise ValueError(f"layer {layer} outside [0, {len(record.layers)})")
    rec = record.layers[layer]
    if (rec.token_ids < 0).any():
        raise ValueError("record has no token ids (layer was traced without them)")
    n_experts = int(record.meta.get("n_experts") or rec.indices.max() + 1)
    vocab = tokenizer.vocab_size
    expert_slots = rec.indices.reshape(-1)
    token_slots = np.repeat(rec.token_ids, rec.k)
    pair_counts = np.bincount(expert_slots * vocab + token_slots,
                              minlength=n_experts * vocab).reshape(n_experts, vocab)
    out = []
    for e in range(n_experts):
        counts = pair_counts[e]
        seen = np.flatnonzero(counts)
        # sort by (-count, token id): lexsort's last key is primary
        order = seen[np.lexsort((seen, -counts[seen]))][:top_m]
        out.append(ExpertTokens(
            expert=e,
            top_tokens=[(int(t), tokenizer.token_str(int(t)), int(counts[t])) for t in order],
        ))
    return out


@dataclass
class TraceStep:
    position: int
    token_id: int
    token: str
    experts: list[tuple[int, float]]  # (expert id, weight), descending weight


def routing_trace(model: LanguageModel, tokenizer: Tokenizer, text: str,
                  layer: int) -> list[TraceStep]:
    """Expert choices and weights for every token of a prompt at one layer."""
    if model.config.variant == "dense":
        raise ValueError("dense models have no router to trace")
    if not 0 <= layer < model.config.n_layers:
        raise ValueError(f"layer {layer} outside [0, {model.config.n_layers})")
    ids = tokenizer.encode(text)
    if ids.size == 0:
        raise ValueError("prompt encodes to zero tokens")
    if ids.size > model.config.max_seq_len:
        raise ValueError(f"prompt is {ids.size} tokens, model max is {model.config.max_seq_len}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.from_numpy(ids)[None, :])
    finally:
        model.train(was_training)
    rec = out.records[layer]
    steps = []
    for pos in range(len(rec)):
        experts = [(int(e), float(w)) for e, w in zip(rec.indices[pos], rec.weights[pos])]
        steps.append(TraceStep(position=pos, token_id=int(rec.token_ids[pos]),
                               token=tokenizer.token_str(int(rec.token_ids[pos])),
                               experts=experts))
    return steps


@dataclass
class DispersionStats:
    mean: float
    std: float                 # population std over unordered pairs
    histogram: list[int]       # counts per bucket over [-1, 1]
    bin_edges: list[float]     # len(histogram) + 1 edges
    n_pairs: int


def anchor_dispersion_stats(anchors: AnchorSet, n_buckets: int = 20) -> DispersionStats:
    """Mean/std and a histogram of pairwise anchor cosines (unordered pairs)."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    a = anchors.anchors.detach().to(torch.float64)
    norms = a.norm(dim=1)
    cos = (a @ a.t()) / (norms[:, None] * norms[None, :] + anchors.eps)
    iu = torch.triu_indices(anchors.n_experts, anchors.n_experts, offset=1)
    vals = cos[iu[0], iu[1]].clamp(-1.0, 1.0).numpy()
    hist, edges = np.histogram(vals, bins=n_buckets, range=(-1.0, 1.0))
    return DispersionStats(mean=float(vals.mean()), std=float(vals.std()),
                           histogram=hist.tolist(), bin_edges=edges.tolist(),
                           n_pairs=int(vals.size))


# ---------------------------------------------------------------------------
# formatting and report files
# ---------------------------------------------------------------------------

def format_utilization(stats: UtilizationStats) -> str:
    lines = [f"{'Layer':<7}{'CV':>8}  {'Dead':>4}  Dead experts"]
    for layer in stats.layers:
        dead = ", ".join(str(i) for i in layer.dead_ids) if layer.dead_ids else "-"
        lines.append(f"{layer.layer:<7}{layer.cv:>8.2f}  {layer.dead:>4}  {dead}")
    lines.append(f"total dead: {stats.total_dead}  "
                 f"(k={stats.k}, {stats.n_tokens} tokens/layer)")
    return "\n".join(lines)


def format_specialization(table: list[ExpertTokens], layer: int) -> str:
    lines = [f"Layer {layer} expert specialization (token: count)"]
    for row in table:
        toks = ", ".join(f"{tok!r}: {count}" for _, tok, count in row.top_tokens) or "(dead)"
        lines.append(f"  expert {row.expert:>3}  {toks}")
    return "\n".join(lines)


def format_trace(steps: list[TraceStep], layer: int) -> str:
    token_width = max(12, max((len(s.token) for s in steps), default=0) + 2)
    header = f"{'Token':<{token_width}}" + "".join(
        f"{'Expert ' + str(i + 1) + ' (weight)':<22}" for i in range(steps[0].experts.__len__()))
    lines = [f"Routing at layer {layer}", header]
    for s in steps:
        cells = "".join(f"{f'E{e} ({w:.2f})':<22}" for e, w in s.experts)
        lines.append(f"{s.token:<{token_width}}{cells}")
    return "\n".join(lines)


def format_dispersion(stats_per_layer: list[DispersionStats]) -> str:
    lines = [f"{'Layer':<7}{'Mean cos':>10}{'Std':>10}{'Pairs':>8}"]
    for li, st in enumerate(stats_per_layer):
        lines.append(f"{li:<7}{st.mean:>10.3f}{st.std:>10.3f}{st.n_pairs:>8}")
    overall = float(np.mean([st.mean for st in stats_per_layer]))
    lines.append(f"mean over layers: {overall:.3f}")
    return "\n".join(lines)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def write_utilization_report(stats: UtilizationStats, out_dir: str | Path) -> None:
    out = Path(out_dir)
    payload = {
        "k": stats.k,
        "n_tokens": stats.n_tokens,
        "total_dead": stats.total_dead,
        "layers": [
            {"layer": l.layer, "cv": l.cv, "dead": l.dead, "dead_ids": l.dead_ids,
             "counts": l.counts.tolist()}
            for l in stats.layers
        ],
    }
    _write(out / "utilization.json", json.dumps(payload, indent=2))
    _write(out / "utilization.txt", format_utilization(stats) + "\n")


def write_specialization_report(tables: dict[int, list[ExpertTokens]],
                                out_dir: str | Path) -> None:
    out = Path(out_dir)
    payload = {
        str(layer): [
            {"expert": row.expert,
             "top_tokens": [{"id": tid, "token": tok, "count": count}
                            for tid, tok, count in row.top_tokens]}
            for row in table
        ]
        for layer, table in tables.items()
    }
    _write(out / "specialization.json", json.dumps(payload, indent=2))
    text = "\n\n".join(format_specialization(table, layer)
                       for layer, table in sorted(tables.items()))
    _write(out / "specialization.txt", text + "\n")


def write_dispersion_report(stats_per_layer: list[DispersionStats],
                            out_dir: str | Path) -> None:
    out = Path(out_dir)
    payload = [
        {"layer": li, "mean": st.mean, "std": st.std, "n_pairs": st.n_pairs,
         "histogram": st.histogram, "bin_edges": st.bin_edges}
        for li, st in enumerate(stats_per_layer)
    ]
    _write(out / "dispersion.json", json.dumps(payload, indent=2))
    _write(out / "dispersion.txt", format_dispersion(stats_per_layer) + "\n")
    lines = ["layer,bin_left,bin_right,count"]
    for li, st in enumerate(stats_per_layer):
        for b, count in enumerate(st.histogram):
            lines.append(f"{li},{st.bin_edges[b]},{st.bin_edges[b + 1]},{count}")
    _write(out / "dispersion_histogram.csv", "\n".join(lines) + "\n")


def write_trace_report(steps: list[TraceStep], layer: int, out_dir: str | Path) -> None:
    out = Path(out_dir)
    payload = {
        "layer": layer,
        "steps": [
            {"position": s.position, "token_id": s.token_id, "token": s.token,
             "experts": [{"id": e, "weight": w} for e, w in s.experts]}
            for s in steps
        ],
    }
    _write(out / "trace.json", json.dumps(payload, indent=2))
    _write(out / "trace.txt", format_trace(steps, layer) + "\n")
