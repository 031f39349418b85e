"""Finite-difference verification of backward passes.

Central differences with a relative step (h = rel_step * max(1, |theta|)) are
compared element-wise against autograd, in float64, over fixed small problem
instances. The numeric side never touches autograd, so the two gradient routes
stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .losses import balance_loss, dispersion_loss, lm_loss, total_loss, z_loss
from .model import ModelConfig, build_model
from .router import AnchorSet, csr_forward

DEFAULT_REL_STEP = 1e-5
ERROR_FLOOR = 1e-6

Objective = Callable[[], torch.Tensor]


def finite_difference_grads(objective: Objective, params: dict[str, torch.Tensor],
                            rel_step: float = DEFAULT_REL_STEP) -> dict[str, torch.Tensor]:
    """Central-difference gradient of a scalar objective for every parameter entry."""
    grads: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, p in params.items():
            grad = torch.zeros_like(p)
            flat, gflat = p.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = rel_step * max(1.0, abs(orig))
                flat[i] = orig + h
                f_plus = float(objective())
                flat[i] = orig - h
                f_minus = float(objective())
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * h)
            grads[name] = grad
    return grads


def analytic_grads(objective: Objective, params: dict[str, torch.Tensor],
                   ) -> dict[str, torch.Tensor]:
    for p in params.values():
        p.grad = None
    objective().backward()
    out = {}
    for name, p in params.items():
        out[name] = (p.grad if p.grad is not None else torch.zeros_like(p)).detach().clone()
    return out


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = ERROR_FLOOR) -> float:
    denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=floor)
    return float(((a - b).abs() / denom).max())


@dataclass
class GradCheckReport:
    component: str
    tol: float
    max_rel_err: float
    per_group: dict[str, float]  # parameter name -> max relative error
    passed: bool

    def format(self) -> str:
        lines = [f"gradcheck {self.component}: "
                 f"{'PASS' if self.passed else 'FAIL'} "
                 f"(max rel err {self.max_rel_err:.3e}, tol {self.tol:.1e})"]
        width = max(len(name) for name in self.per_group)
        for name, err in sorted(self.per_group.items()):
            lines.append(f"  {name:<{width}}  {err:.3e}")
        return "\n".join(lines)


def _param(shape: tuple[int, ...], gen: torch.Generator, scale: float = 1.0) -> torch.Tensor:
    t = torch.empty(*shape, dtype=torch.float64)
    t.normal_(0.0, scale, generator=gen)
    return t.requires_grad_(True)


def _build_resonance(seed: int) -> tuple[Objective, dict[str, torch.Tensor]]:
    """Routing scores through top-k softmax weights into a scalar.

    Experts are fixed linear maps (constants), so the objective moves only via
    the mixture weights and the token representations.
    """
    gen = torch.Generator().manual_seed(seed)
    tokens = _param((3, 6), gen)
    anchors = _param((4, 6), gen)
    mats = [torch.empty(6, 6, dtype=torch.float64).normal_(0, 1, generator=gen)
            for _ in range(4)]
    experts = [(lambda x, m=m: x @ m.t()) for m in mats]

    def objective() -> torch.Tensor:
        out, _, _ = csr_forward(tokens, AnchorSet(anchors), experts, k=2)
        return out.sum()

    return objective, {"tokens": tokens, "anchors": anchors}


def _build_balance(seed: int) -> tuple[Objective, dict[str, torch.Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    scores = _param((5, 4), gen)
    return (lambda: balance_loss(scores)), {"scores": scores}


def _build_dispersion(seed: int) -> tuple[Objective, dict[str, torch.Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    anchors = _param((4, 8), gen)
    return (lambda: dispersion_loss(AnchorSet(anchors))), {"anchors": anchors}


def _build_z(seed: int) -> tuple[Objective, dict[str, torch.Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    scores = _param((5, 4), gen)
    return (lambda: z_loss(scores)), {"scores": scores}


def _build_lm(seed: int) -> tuple[Objective, dict[str, torch.Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    logits = _param((5, 7), gen)
    targets = torch.tensor([0, 3, 6, 2, 2])
    return (lambda: lm_loss(logits, targets)), {"logits": logits}


def _build_model_objective(seed: int) -> tuple[Objective, dict[str, torch.Tensor]]:
    """Toy end-to-end model: total loss with all auxiliaries enabled."""
    cfg = ModelConfig(dim=8, n_layers=1, n_heads=2, n_experts=4, top_k=2, d_ff=8,
                      vocab_size=16, max_seq_len=8, dropout=0.0, variant="sra")
    model = build_model(cfg, seed=seed, dtype=torch.float64)
    model.train()
    gen = torch.Generator().manual_seed(seed + 1)
    inputs = torch.randint(0, cfg.vocab_size, (2, 4), generator=gen)
    targets = torch.randint(0, cfg.vocab_size, (2, 4), generator=gen)

    def objective() -> torch.Tensor:
        out = model(inputs)
        lm = lm_loss(out.logits.reshape(-1, cfg.vocab_size), targets.reshape(-1))
        balance = sum(balance_loss(s) for s in out.all_scores) / len(out.all_scores)
        dispersion = sum(dispersion_loss(a) for a in model.anchor_sets()) / cfg.n_layers
        z = sum(z_loss(s) for s in out.all_scores) / len(out.all_scores)
        return total_loss(lm, balance, dispersion, z, 0.4, 0.6, 0.1).total

    return objective, dict(model.named_parameters())


COMPONENTS: dict[str, Callable[[int], tuple[Objective, dict[str, torch.Tensor]]]] = {
    "resonance": _build_resonance,
    "balance_loss": _build_balance,
    "dispersion_loss": _build_dispersion,
    "z_loss": _build_z,
    "lm_loss": _build_lm,
    "model": _build_model_objective,
}

DEFAULT_TOLS = {name: 1e-4 for name in COMPONENTS} | {"model": 1e-3}


def grad_check(component: str, tol: float | None = None, seed: int = 0,
               rel_step: float = DEFAULT_REL_STEP) -> GradCheckReport:
    """Compare autograd against central finite differences for one component."""
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {sorted(COMPONENTS)}")
    if tol is None:
        tol = DEFAULT_TOLS[component]
    objective, params = COMPONENTS[component](seed)
    analytic = analytic_grads(objective, params)
    numeric = finite_difference_grads(objective, params, rel_step)
    per_group = {name: max_relative_error(analytic[name], numeric[name]) for name in params}
    worst = max(per_group.values())
    return GradCheckReport(component=component, tol=tol, max_rel_err=worst,
                           per_group=per_group, passed=worst < tol)
