"""Collaborative-distillation losses.

The distillation loss is an entropically regularized optimal-transport cost
between a student's output vector and the soft target (the student mean),
solved by log-domain Sinkhorn iteration:

    C[i, j] = |O_i - Ohat_j|^2
    M(u, v) = (-C + u 1^T + 1 v^T) / epsilon
    u <- epsilon * (log(phi) - lse_rows(M(u, v))) + u
    v <- epsilon * (log(psi) - lse_cols(M(u, v))) + v
    stop when err = sum_i |u_i - u_i_prev| < thresh, or after niter
    z = exp(M(u, v));  L_OT = sum_ij z_ij * C_ij

with uniform marginals phi = psi = 1/t. The v update uses the freshly
updated u (standard alternating iteration). Losses are differentiable by
unrolling the converged iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DEFAULT_EPSILON = 0.01
DEFAULT_NITER = 100
DEFAULT_THRESH = 1e-6


class SinkhornNumericError(RuntimeError):
    """Non-finite intermediate in the solver; names the failing iteration."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite Sinkhorn intermediate at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = DEFAULT_EPSILON
    t: int = 34  # output dimension
    niter: int = DEFAULT_NITER
    thresh: float = DEFAULT_THRESH

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.niter < 1:
            raise ValueError("niter must be >= 1")
        if self.thresh <= 0:
            raise ValueError("thresh must be positive")


@dataclass(frozen=True)
class LossWeights:
    """beta blends data loss against distillation loss in [0, 1]."""

    beta: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")


@dataclass
class SinkhornResult:
    loss: torch.Tensor  # scalar or (batch,)
    plan: torch.Tensor  # (..., t, t)
    iterations: int
    final_err: float


def cost_matrix(o: torch.Tensor, o_hat: torch.Tensor) -> torch.Tensor:
    """Pairwise squared distances C[i, j] = |O_i - Ohat_j|^2 over trailing dims."""
    if o.shape != o_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(o.shape)} vs {tuple(o_hat.shape)}")
    return (o.unsqueeze(-1) - o_hat.unsqueeze(-2)) ** 2


def _iterate(C: torch.Tensor, u: torch.Tensor, v: torch.Tensor, eps: float,
             log_marginal: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """One alternating update; v uses the freshly updated u."""
    M = (-C + u.unsqueeze(-1) + v.unsqueeze(-2)) / eps
    u = eps * (log_marginal - torch.logsumexp(M, dim=-1)) + u
    M = (-C + u.unsqueeze(-1) + v.unsqueeze(-2)) / eps
    v = eps * (log_marginal - torch.logsumexp(M, dim=-2)) + v
    return u, v


def sinkhorn_loss(
    o: torch.Tensor,
    o_hat: torch.Tensor,
    config: SinkhornConfig | None = None,
    unroll_gradients: bool = False,
) -> SinkhornResult:
    """Entropic OT cost between two equal-length vectors (or batches of them).

    Accepts shape (t,) or (..., t); leading dimensions are solved jointly and
    the loop runs until every instance converges (or niter). Returns the
    transported cost, the transport plan, and solver diagnostics.

    By default the fixed-point iterations run outside the autograd graph and
    one differentiable update is replayed from the converged potentials, so
    gradients flow through the plan and the cost matrix only (the potentials
    are stationary at convergence). unroll_gradients=True differentiates
    through every iteration instead.
    """
    config = config or SinkhornConfig()
    if o.shape != o_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(o.shape)} vs {tuple(o_hat.shape)}")
    t = o.shape[-1]
    if t < 1:
        raise ValueError("empty vectors")
    eps = config.epsilon
    C = cost_matrix(o, o_hat)
    log_marginal = -torch.log(torch.tensor(float(t), dtype=o.dtype))

    needs_grad = C.requires_grad and not unroll_gradients
    iterations = 0
    err_max = float("inf")
    with torch.set_grad_enabled(C.requires_grad and unroll_gradients):
        C_iter = C if (unroll_gradients or not C.requires_grad) else C.detach()
        u = torch.zeros_like(C_iter[..., 0])
        v = torch.zeros_like(u)
        for it in range(config.niter):
            u_prev = u
            u, v = _iterate(C_iter, u, v, eps, log_marginal)
            if not bool(torch.isfinite(u.detach()).all() and torch.isfinite(v.detach()).all()):
                raise SinkhornNumericError(it)
            err = (u.detach() - u_prev.detach()).abs().sum(dim=-1)
            iterations = it + 1
            err_max = float(err.max())
            if err_max < config.thresh:
                break
    if needs_grad:
        # replay one update from the converged (constant) potentials so the
        # plan carries gradients with respect to the cost matrix
        u, v = _iterate(C, u.detach(), v.detach(), eps, log_marginal)
    M = (-C + u.unsqueeze(-1) + v.unsqueeze(-2)) / eps
    plan = torch.exp(M)
    loss = (plan * C).sum(dim=(-2, -1))
    return SinkhornResult(loss=loss, plan=plan, iterations=iterations, final_err=err_max)


def soft_target(student_outputs: list[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Elementwise mean of all student outputs: the consensus regression target."""
    if isinstance(student_outputs, torch.Tensor):
        stacked = student_outputs
    else:
        if len(student_outputs) < 2:
            raise ValueError("soft target needs at least 2 student outputs")
        first = student_outputs[0].shape
        for out in student_outputs[1:]:
            if out.shape != first:
                raise ValueError("student outputs must share one shape")
        stacked = torch.stack(tuple(student_outputs))
    if stacked.shape[0] < 2:
        raise ValueError("soft target needs at least 2 student outputs")
    return stacked.mean(dim=0)


def data_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the trailing dimension(s)."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(label.shape)}")
    return (pred - label).abs().mean()


def total_loss(l_d: torch.Tensor | float, l_ot: torch.Tensor | float, weights: LossWeights) -> torch.Tensor | float:
    """Weighted objective beta * L_d + (1 - beta) * L_OT."""
    return weights.beta * l_d + (1.0 - weights.beta) * l_ot
