"""CKDformer: one shared Conformer backbone feeding S student regression heads.

Each training step gives every student its own augmented view of the input
(noise injection for even-indexed students, cyclic subcarrier panning for
odd ones). The mean of the student outputs is the soft target; each student
is pulled toward it by the Sinkhorn optimal-transport loss and toward the
label by mean absolute error. The backbone accumulates gradients from all
students; heads train separately. A non-shared variant instantiates one
backbone per student for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .conformer import ConformerBackbone, ConformerConfig, DEFAULT_DTYPE, init_linear
from .datamodel import LABEL_DIM
from .distill import LossWeights, SinkhornConfig, data_loss, sinkhorn_loss, soft_target
from .synth import AugmentConfig, add_noise, cyclic_shift


@dataclass(frozen=True)
class CKDformerConfig:
    backbone: ConformerConfig
    students: int = 2
    head_hidden: int = 128
    output_dim: int = LABEL_DIM
    shared_backbone: bool = True

    def __post_init__(self) -> None:
        if self.students < 1:
            raise ValueError("students must be >= 1")
        if self.head_hidden < 1:
            raise ValueError("head_hidden must be >= 1")


class RegressionHead(nn.Module):
    """Two affine layers with ReLU between, then the 34-wide output layer."""

    def __init__(self, d_in: int, hidden: int, d_out: int, gen: torch.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.fc1 = nn.Parameter(torch.empty(hidden, d_in, dtype=dtype))
        self.b1 = nn.Parameter(torch.empty(hidden, dtype=dtype))
        self.fc2 = nn.Parameter(torch.empty(hidden, hidden, dtype=dtype))
        self.b2 = nn.Parameter(torch.empty(hidden, dtype=dtype))
        self.out = nn.Parameter(torch.empty(d_out, hidden, dtype=dtype))
        self.b_out = nn.Parameter(torch.empty(d_out, dtype=dtype))
        init_linear(self.fc1, self.b1, gen)
        init_linear(self.fc2, self.b2, gen)
        init_linear(self.out, self.b_out, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(torch.nn.functional.linear(x, self.fc1, self.b1))
        h = torch.nn.functional.linear(h, self.fc2, self.b2)
        return torch.nn.functional.linear(h, self.out, self.b_out)


class CKDformer(nn.Module):
    def __init__(self, config: CKDformerConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        n_backbones = 1 if config.shared_backbone else config.students
        self.backbones = nn.ModuleList(
            ConformerBackbone(config.backbone, seed=seed + 101 * i, dtype=dtype)
            for i in range(n_backbones)
        )
        gen = torch.Generator().manual_seed(seed + 7919)
        self.heads = nn.ModuleList(
            RegressionHead(config.backbone.k, config.head_hidden, config.output_dim, gen, dtype)
            for _ in range(config.students)
        )

    @property
    def students(self) -> int:
        return self.config.students

    def backbone_for(self, student_index: int) -> ConformerBackbone:
        if self.config.shared_backbone:
            return self.backbones[0]
        return self.backbones[student_index]

    def student_forward(self, x: torch.Tensor, student_index: int) -> torch.Tensor:
        if not 0 <= student_index < self.students:
            raise IndexError(
                f"student index {student_index} out of range for {self.students} students"
            )
        features = self.backbone_for(student_index)(x)
        return self.heads[student_index](features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """All student outputs stacked along a leading dimension."""
        return torch.stack([self.student_forward(x, s) for s in range(self.students)])

    def predict(self, x: torch.Tensor, student: int | None = None) -> torch.Tensor:
        """Inference output: the soft target (student mean), or one student."""
        with torch.no_grad():
            if student is not None:
                return self.student_forward(x, student)
            return self.forward(x).mean(dim=0)


def parameter_count(module: nn.Module) -> int:
    """Total scalar parameters; shared modules are stored (and counted) once."""
    return sum(p.numel() for p in module.parameters())


def backbone_parameter_count(model: CKDformer) -> int:
    return sum(parameter_count(b) for b in model.backbones)


def head_parameter_count(model: CKDformer) -> int:
    return sum(parameter_count(h) for h in model.heads)


@dataclass
class StepResult:
    """Per-student loss values for one optimization step (floats, detached)."""

    data_losses: list[float]
    ot_losses: list[float]
    total_losses: list[float]
    objective: float
    sinkhorn_iterations: int = 0


def student_views(
    inputs: torch.Tensor,
    students: int,
    f: int,
    augment: AugmentConfig,
    rng: np.random.Generator,
) -> list[torch.Tensor]:
    """One augmented copy of the batch per student.

    Even-indexed students get the strong view (noise injection), odd ones
    the weak view (cyclic subcarrier panning), cycling for larger cohorts.
    With a single student the input passes through unchanged.
    """
    if students == 1:
        return [inputs]
    if augment.weak_shift_max >= f:
        raise ValueError(
            f"weak_shift_max={augment.weak_shift_max} must be < f={f}"
        )
    batch = inputs.detach().cpu().numpy()
    views = []
    for s in range(students):
        if s % 2 == 0:
            rows = [add_noise(row, augment.strong_noise_sigma, rng) for row in batch]
        else:
            # pan by 0..max bins, left or right with equal probability: the
            # direction carries no systematic bias and the zero draw keeps
            # the student anchored on unshifted inputs
            magnitudes = rng.integers(0, augment.weak_shift_max + 1, size=len(batch))
            signs = rng.integers(0, 2, size=len(batch))
            rows = [
                cyclic_shift(row, int(m) if sgn else (f - int(m)) % f, f)
                for row, m, sgn in zip(batch, magnitudes, signs)
            ]
        views.append(torch.as_tensor(np.stack(rows), dtype=inputs.dtype))
    return views


def ckd_step(
    model: CKDformer,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    f: int,
    augment: AugmentConfig,
    sinkhorn: SinkhornConfig,
    weights: LossWeights,
    rng: np.random.Generator,
) -> StepResult:
    """Forward all students on their views, combine losses, and backpropagate.

    The backward pass runs on the sum of per-student total losses, so each
    head receives exactly its own gradient and the shared backbone
    accumulates contributions from every student. The soft target is
    detached: students chase the consensus, the consensus does not chase
    the students. A single student degrades to plain MAE training.
    """
    S = model.students
    views = student_views(inputs, S, f, augment, rng)
    outputs = [model.student_forward(views[s], s) for s in range(S)]

    data_losses = [data_loss(outputs[s], labels) for s in range(S)]
    use_ot = S >= 2 and weights.beta < 1.0
    sink_iters = 0
    if use_ot:
        stacked = torch.stack(outputs)  # (S, B, t)
        target = soft_target(stacked).detach()
        # all students' transport problems solve jointly in one batch
        result = sinkhorn_loss(stacked, target.expand_as(stacked), sinkhorn)
        ot_losses = [result.loss[s].mean() for s in range(S)]
        sink_iters = result.iterations
    else:
        ot_losses = [torch.zeros((), dtype=inputs.dtype) for _ in range(S)]

    if S == 1:
        totals = [data_losses[0]]
    else:
        totals = [
            weights.beta * data_losses[s] + (1.0 - weights.beta) * ot_losses[s]
            for s in range(S)
        ]
    objective = sum(totals)
    objective.backward()
    return StepResult(
        data_losses=[float(l.detach()) for l in data_losses],
        ot_losses=[float(l.detach()) for l in ot_losses],
        total_losses=[float(l.detach()) for l in totals],
        objective=float(objective.detach()),
        sinkhorn_iterations=sink_iters,
    )
