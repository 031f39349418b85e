"""Training loop and evaluation.

AdamW with linear-warmup/cosine-decay, a progressive top-1 -> top-2 routing
schedule, JSONL metrics, per-epoch checkpoints that resume bit-exactly, and a
perplexity evaluator that also collects routing records for analysis.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .data import Tokenizer, make_batches, num_batches, train_bpe, train_val_split
from .losses import aggregate_aux_losses, lm_loss, total_loss, LossBreakdown
from .model import LanguageModel, ModelConfig, build_model
from .router import LayerRecord, RoutingRecord

log = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.pt"
CHECKPOINT_FORMAT = "sra-checkpoint-v1"
METRICS_FILE = "metrics.jsonl"


@dataclass
class TrainConfig:
    lr_peak: float = 3e-4
    warmup_steps: int = 4000
    total_steps: int = 0          # 0 -> epochs * steps-per-epoch, resolved from the data
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float | None = 1.0
    alpha: float = 0.4            # balance loss weight
    beta: float = 0.6             # dispersion loss weight
    gamma: float = 0.0            # z-loss weight
    epochs: int = 10
    switch_epoch: int = 6         # first epoch (1-based) routed with k=2
    top_k_only: int | None = None  # fixed-k ablation; overrides the schedule
    noise_sigma: float = 0.0
    batch_size: int = 128
    seq_len: int = 256
    val_fraction: float = 0.05
    eval_interval: int = 0        # 0 -> max(100, steps_per_epoch // 4)
    log_interval: int = 50
    seed: int = 0
    threads: int = 1              # reference mode: single-threaded, bit-reproducible

    def __post_init__(self) -> None:
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        for name in ("warmup_steps", "total_steps", "eval_interval", "log_interval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("epochs", "batch_size", "seq_len", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive (or None to disable)")
        for name in ("alpha", "beta", "gamma", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if not 1 <= self.switch_epoch <= self.epochs + 1:
            raise ValueError(
                f"switch_epoch must be in [1, epochs + 1] = [1, {self.epochs + 1}]")
        if self.top_k_only is not None and self.top_k_only < 1:
            raise ValueError("top_k_only must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**payload)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate at an optimizer step: linear warmup to lr_peak over
    warmup_steps, then cosine decay to 0 at total_steps."""
    if cfg.total_steps < 1:
        raise ValueError("total_steps must be resolved (positive) before lr_at")
    if cfg.warmup_steps > cfg.total_steps:
        raise ValueError("warmup_steps must not exceed total_steps")
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.lr_peak
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def progressive_k(epoch: int, cfg: TrainConfig) -> int:
    """Routing width for a 1-based epoch: 1 before switch_epoch, 2 from it on."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return 1 if epoch < cfg.switch_epoch else 2


def active_k(epoch: int, cfg: TrainConfig) -> int:
    return cfg.top_k_only if cfg.top_k_only is not None else progressive_k(epoch, cfg)


@dataclass
class MetricsRow:
    step: int
    epoch: int
    k_active: int
    lm_loss: float
    balance: float
    dispersion: float
    z: float
    total: float
    learning_rate: float
    val_perplexity: float | None = None

    def to_json(self) -> str:
        payload = asdict(self)
        if self.val_perplexity is None:
            del payload["val_perplexity"]
        return json.dumps(payload)


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


class NonFiniteLossError(RuntimeError):
    """Raised (and the run aborted) when any loss component goes NaN/Inf."""

    def __init__(self, component: str, value: float, step: int):
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
        self.component = component
        self.step = step


def _ensure_finite(breakdown: LossBreakdown, step: int) -> None:
    for name in ("lm", "balance", "dispersion", "z", "total"):
        value = getattr(breakdown, name)
        if isinstance(value, torch.Tensor):
            value = float(value.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value, step)


def build_optimizer(model: LanguageModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay on matrices only.

    Anchors, biases, and LayerNorm parameters are excluded from decay (decaying
    anchors would fight the dispersion objective for no regularization benefit).
    """
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim < 2 or name.endswith("anchors"):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr_peak, betas=cfg.betas, eps=1e-8)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    payload = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                         sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_checkpoint(out_dir: str | Path, model: LanguageModel,
                    optimizer: torch.optim.Optimizer | None, train_cfg: TrainConfig,
                    step: int, epoch: int, generator: torch.Generator | None,
                    extra_meta: dict | None = None) -> Path:
    """Write a resumable checkpoint directory (weights + optimizer + RNG + configs)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict(),
        "dtype": str(model.token_emb.weight.dtype).removeprefix("torch."),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "epoch": epoch,
        "rng_state": generator.get_state() if generator is not None else None,
    }
    torch.save(payload, out / CHECKPOINT_FILE)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash(model.config, train_cfg),
        "step": step,
        "epoch": epoch,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra_meta or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return out


@dataclass
class Checkpoint:
    model: LanguageModel
    model_config: ModelConfig
    train_config: TrainConfig
    optimizer_state: dict | None
    step: int
    epoch: int
    rng_state: torch.Tensor | None
    manifest: dict


def load_checkpoint(ckpt_dir: str | Path) -> Checkpoint:
    src = Path(ckpt_dir)
    payload_path = src / CHECKPOINT_FILE
    if not payload_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {payload_path}")
    payload = torch.load(payload_path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {payload_path}")
    model_cfg = ModelConfig.from_dict(payload["model_config"])
    train_cfg = TrainConfig.from_dict(payload["train_config"])
    dtype = getattr(torch, payload["dtype"])
    model = build_model(model_cfg, seed=0, dtype=dtype)
    model.load_state_dict(payload["model_state"])
    manifest_path = src / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.is_file() else {}
    return Checkpoint(
        model=model, model_config=model_cfg, train_config=train_cfg,
        optimizer_state=payload["optimizer_state"], step=payload["step"],
        epoch=payload["epoch"], rng_state=payload["rng_state"], manifest=manifest,
    )


@dataclass
class EvalResult:
    perplexity: float
    mean_loss: float
    n_tokens: int
    records: RoutingRecord


def eval_batch_size(n_tokens: int, batch_size: int, seq_len: int) -> int:
    """Largest batch size <= batch_size the token stream can still fill."""
    return max(1, min(batch_size, n_tokens // (seq_len + 1)))


def evaluate(model: LanguageModel, ids: np.ndarray, batch_size: int, seq_len: int,
             collect_records: bool = True, meta: dict | None = None) -> EvalResult:
    """Perplexity over a token stream, plus the routing records of every batch.

    Runs in eval mode (no routing noise, no dropout) and restores the model's
    previous training flag afterwards. Record positions are rewritten to global
    stream positions (lane offset + window offset), so the records cover every
    token the batch plan visits, each exactly once per layer.
    """
    was_training = model.training
    model.eval()
    ids = np.asarray(ids, dtype=np.int64)
    bsz = eval_batch_size(ids.size, batch_size, seq_len)
    lane_len = ids.size // bsz
    nll_sum, n_tokens = 0.0, 0
    layer_parts: list[list[LayerRecord]] = []
    try:
        with torch.no_grad():
            for i, batch in enumerate(make_batches(ids, bsz, seq_len)):
                inputs = torch.from_numpy(batch.inputs)
                targets = torch.from_numpy(batch.targets)
                out = model(inputs)
                logits = out.logits.reshape(-1, model.config.vocab_size)
                nll_sum += float(torch.nn.functional.cross_entropy(
                    logits, targets.reshape(-1), reduction="sum"))
                n_tokens += targets.numel()
                if collect_records:
                    if not layer_parts:
                        layer_parts = [[] for _ in out.records]
                    for li, rec in enumerate(out.records):
                        flat = rec.positions
                        rec.positions = (flat // seq_len) * lane_len + i * seq_len + flat % seq_len
                        layer_parts[li].append(rec)
    finally:
        model.train(was_training)
    if n_tokens == 0:
        raise ValueError("token stream too short to evaluate (no full batch)")
    mean = nll_sum / n_tokens
    layers = [LayerRecord.concat(parts) for parts in layer_parts]
    record_meta = {
        "variant": model.config.variant,
        "n_experts": model.config.n_experts if model.config.variant != "dense" else 0,
        "n_layers": model.config.n_layers,
        "top_k": model.config.top_k,
        "n_tokens": n_tokens,
    }
    record_meta.update(meta or {})
    return EvalResult(perplexity=math.exp(mean), mean_loss=mean, n_tokens=n_tokens,
                      records=RoutingRecord(layers=layers, meta=record_meta))


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    metrics_path: Path
    checkpoints: list[Path]
    final_val_perplexity: float
    tokenizer: Tokenizer
    steps: int


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus_path: str | Path,
          out_dir: str | Path, tokenizer_dir: str | Path | None = None,
          resume_from: str | Path | None = None) -> TrainResult:
    """Full training run: tokenize, split, optimize, checkpoint per epoch.

    Writes into out_dir: tokenizer/, metrics.jsonl (one JSON object per step,
    appended on resume), and checkpoints/epoch_NNN/. Resuming from an epoch
    checkpoint continues bit-exactly as if the run had never stopped, because
    all randomness flows through one serialized generator.
    """
    torch.set_num_threads(train_cfg.threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = Path(corpus_path).read_bytes()

    if tokenizer_dir is not None:
        tokenizer = Tokenizer.load(tokenizer_dir)
        if tokenizer.vocab_size > model_cfg.vocab_size:
            raise ValueError(
                f"tokenizer vocab ({tokenizer.vocab_size}) exceeds model vocab "
                f"({model_cfg.vocab_size})")
    else:
        log.info("training BPE tokenizer (vocab_size=%d)", model_cfg.vocab_size)
        tokenizer = train_bpe(corpus, model_cfg.vocab_size)
    tokenizer.save(out / "tokenizer")

    ids = tokenizer.encode(corpus)
    train_ids, val_ids = train_val_split(ids, train_cfg.val_fraction)
    steps_per_epoch = num_batches(train_ids.size, train_cfg.batch_size, train_cfg.seq_len)
    if steps_per_epoch < 1:
        raise ValueError(
            f"corpus too small: {train_ids.size} train tokens yield no full batch of "
            f"{train_cfg.batch_size}x{train_cfg.seq_len}")
    total_steps = train_cfg.total_steps or steps_per_epoch * train_cfg.epochs
    cfg = replace(train_cfg, total_steps=total_steps)
    if cfg.warmup_steps > cfg.total_steps:
        raise ValueError(
            f"warmup_steps ({cfg.warmup_steps}) exceeds total_steps ({cfg.total_steps})")
    eval_interval = cfg.eval_interval or max(100, steps_per_epoch // 4)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.model_config != model_cfg:
            raise ValueError("checkpoint model config does not match the requested config")
        model = ckpt.model
        optimizer = build_optimizer(model, cfg)
        if ckpt.optimizer_state is None:
            raise ValueError(f"checkpoint {resume_from} has no optimizer state to resume from")
        optimizer.load_state_dict(ckpt.optimizer_state)
        generator = torch.Generator()
        if ckpt.rng_state is None:
            raise ValueError(f"checkpoint {resume_from} has no RNG state to resume from")
        generator.set_state(ckpt.rng_state)
        step, start_epoch = ckpt.step, ckpt.epoch + 1
        if start_epoch > cfg.epochs:
            raise ValueError(f"checkpoint already covers epoch {ckpt.epoch} of {cfg.epochs}")
        metrics_mode = "a"
    else:
        model = build_model(model_cfg, seed=cfg.seed)
        optimizer = build_optimizer(model, cfg)
        # Separate stream from weight init so adding layers doesn't shift the
        # data-order/noise randomness.
        generator = torch.Generator().manual_seed(cfg.seed + 1)
        step, start_epoch = 0, 1
        metrics_mode = "w"

    metrics_path = out / METRICS_FILE
    ckpt_root = out / "checkpoints"
    checkpoints: list[Path] = []
    final_val = math.nan
    log.info("training %s: %d steps/epoch, %d epochs, %d total steps",
             model_cfg.variant, steps_per_epoch, cfg.epochs, cfg.total_steps)

    with metrics_path.open(metrics_mode, encoding="utf-8") as metrics_file:
        for epoch in range(start_epoch, cfg.epochs + 1):
            k = active_k(epoch, cfg)
            model.train()
            epoch_start = time.time()
            for batch_i, batch in enumerate(
                    make_batches(train_ids, cfg.batch_size, cfg.seq_len, seed=cfg.seed)):
                lr = lr_at(min(step, cfg.total_steps), cfg)
                _set_lr(optimizer, lr)
                inputs = torch.from_numpy(batch.inputs)
                targets = torch.from_numpy(batch.targets)
                out_m = model(inputs, k=k, noise_sigma=cfg.noise_sigma, generator=generator)
                lm = lm_loss(out_m.logits.reshape(-1, model_cfg.vocab_size), targets.reshape(-1))
                balance, dispersion, z = aggregate_aux_losses(out_m.all_scores, model.anchor_sets())
                breakdown = total_loss(lm, balance, dispersion, z, cfg.alpha, cfg.beta, cfg.gamma)
                _ensure_finite(breakdown, step)
                optimizer.zero_grad(set_to_none=True)
                breakdown.total.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                step += 1

                vals = breakdown.to_floats()
                row = MetricsRow(step=step, epoch=epoch, k_active=k, lm_loss=vals.lm,
                                 balance=vals.balance, dispersion=vals.dispersion,
                                 z=vals.z, total=vals.total, learning_rate=lr)
                last_of_epoch = batch_i == steps_per_epoch - 1
                if step % eval_interval == 0 or last_of_epoch:
                    val = evaluate(model, val_ids, cfg.batch_size, cfg.seq_len,
                                   collect_records=False)
                    row.val_perplexity = val.perplexity
                    if last_of_epoch:
                        final_val = val.perplexity
                metrics_file.write(row.to_json() + "\n")
                if cfg.log_interval and step % cfg.log_interval == 0:
                    log.info("step %d epoch %d k=%d lm %.4f total %.4f lr %.2e",
                             step, epoch, k, vals.lm, vals.total, lr)
            metrics_file.flush()
            ckpt_dir = save_checkpoint(
                ckpt_root / f"epoch_{epoch:03d}", model, optimizer, cfg, step, epoch,
                generator,
                extra_meta={"tokenizer": str((out / "tokenizer").resolve()),
                            "corpus": str(Path(corpus_path).resolve()),
                            "val_perplexity": final_val,
                            "out_dir": str(out.resolve())},
            )
            checkpoints.append(ckpt_dir)
            log.info("epoch %d done in %.1fs (val ppl %.3f)",
                     epoch, time.time() - epoch_start, final_val)

    return TrainResult(out_dir=out, final_checkpoint=checkpoints[-1],
                       metrics_path=metrics_path, checkpoints=checkpoints,
                       final_val_perplexity=final_val, tokenizer=tokenizer, steps=step)
