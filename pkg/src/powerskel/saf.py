"""Sparse adaptive filtering of CSI frames.

Each flattened frame d builds its own circulant dictionary A whose columns
are cyclic shifts of d. The sparse representation s solves the least-squares
problem min ||As - d||^2; filter coefficients h follow a gradient-descent
update threaded across the batch; the frame is reconstructed as A s.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .datamodel import CSIFrame, SensingTopology, flatten

log = logging.getLogger(__name__)

Solver = Literal["min_norm", "ridge"]


@dataclass(frozen=True)
class SAFConfig:
    """Filtering hyperparameters.

    mu is the gradient-descent step size for the filter coefficients.
    min_norm solves exact least squares, returning the minimum-norm solution
    when the dictionary is rank-deficient; singular values below
    sv_cutoff * sigma_max are truncated. The ridge solver is a non-default
    extension adding lambda * ||s||^2 to the objective.
    """

    mu: float = 500.0
    solver: Solver = "min_norm"
    ridge_lambda: float = 0.0
    sv_cutoff: float = 1e-10
    # Reading under which one dictionary, built from the first frame, is
    # reused for the whole batch instead of rebuilding per frame.
    shared_dictionary_from_first_sample: bool = False

    def __post_init__(self) -> None:
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.solver not in ("min_norm", "ridge"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be non-negative")
        if self.solver == "min_norm" and self.ridge_lambda != 0.0:
            raise ValueError("ridge_lambda must be 0 for the min_norm solver")


@dataclass(frozen=True)
class SAFState:
    """Filter coefficient vector h; starts at zero."""

    h: np.ndarray

    def __post_init__(self) -> None:
        h = np.array(self.h, dtype=np.float64)
        if h.ndim != 1:
            raise ValueError("h must be a vector")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def zeros(cls, k: int) -> "SAFState":
        return cls(h=np.zeros(k))


def build_dictionary(d: np.ndarray) -> np.ndarray:
    """Circulant dictionary: column j is d cyclically shifted j times.

    One shift moves the last element to the front, so column 0 is d itself
    and A[i, j] = d[(i - j) mod k].
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError(f"dictionary seed must be a non-empty vector, got shape {d.shape}")
    k = d.size
    idx = (np.arange(k)[:, None] - np.arange(k)[None, :]) % k
    return d[idx]


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def sparse_representation(A: np.ndarray, d: np.ndarray, config: SAFConfig) -> np.ndarray:
    """Least-squares code s minimizing ||A s - d||^2.

    min_norm returns the minimum-norm minimizer (pseudo-inverse solution);
    ridge minimizes ||A s - d||^2 + lambda ||s||^2.
    """
    A = np.asarray(A, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != d.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape} vs d {d.shape}")
    _check_finite("A", A)
    _check_finite("d", d)
    if config.solver == "ridge" and config.ridge_lambda > 0:
        k = A.shape[1]
        gram = A.T @ A + config.ridge_lambda * np.eye(k)
        return np.linalg.solve(gram, A.T @ d)
    s, _, _, _ = np.linalg.lstsq(A, d, rcond=config.sv_cutoff)
    return s


def saf_gradient(A: np.ndarray, h: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Gradient of ||A h - d||^2 with respect to h: 2 A^T (A h - d)."""
    A = np.asarray(A, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != h.shape[0] or A.shape[0] != d.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, h {h.shape}, d {d.shape}")
    return 2.0 * (A.T @ (A @ h - d))


def update_filter(state: SAFState, grad: np.ndarray, mu: float) -> SAFState:
    """One gradient-descent step: h_new = h_old - mu * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.h.shape:
        raise ValueError(f"shape mismatch: h {state.h.shape} vs grad {grad.shape}")
    return SAFState(h=state.h - mu * grad)


def reconstruct(A: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Reconstructed frame x_r = A s."""
    A = np.asarray(A, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != s.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape} vs s {s.shape}")
    return A @ s


@dataclass(frozen=True)
class SAFRunResult:
    """Reconstructions in input order plus the final filter state."""

    reconstructions: tuple[np.ndarray, ...]
    state: SAFState
    h_diverged: bool = False


def saf_run(
    batch: list[CSIFrame],
    topology: SensingTopology,
    config: SAFConfig | None = None,
    state: SAFState | None = None,
) -> SAFRunResult:
    """Filter a batch of frames, threading the coefficient state in order.

    Per frame: flatten -> build dictionary -> solve the sparse code ->
    gradient-update h -> reconstruct. Reconstruction depends only on the
    dictionary and the code, so a diverging h trajectory (possible at large
    mu on raw amplitudes) is logged but never fatal.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    config = config or SAFConfig()
    k = topology.k
    if state is None:
        state = SAFState.zeros(k)
    elif state.h.shape != (k,):
        raise ValueError(f"state length {state.h.shape[0]} does not match k={k}")

    shared_A = None
    if config.shared_dictionary_from_first_sample:
        shared_A = build_dictionary(flatten(batch[0], topology))

    out: list[np.ndarray] = []
    diverged = False
    for frame in batch:
        d = flatten(frame, topology)
        A = shared_A if shared_A is not None else build_dictionary(d)
        s = sparse_representation(A, d, config)
        if not diverged:
            with np.errstate(over="ignore", invalid="ignore"):
                grad = saf_gradient(A, state.h, d)
                candidate = update_filter(state, grad, config.mu)
            if np.all(np.isfinite(candidate.h)):
                state = candidate
            else:
                # x_r = A s never reads h, so a runaway coefficient
                # trajectory only loses the adaptive state, not the output.
                diverged = True
                log.warning(
                    "filter coefficients diverged at frame t=%d (mu=%g); state frozen",
                    frame.timestamp_ms,
                    config.mu,
                )
        out.append(reconstruct(A, s))
    return SAFRunResult(reconstructions=tuple(out), state=state, h_diverged=diverged)
