"""Training harness: SGD over shuffled mini-batches with ablation switches.

The pipeline per run: optionally filter the CSI (sparse adaptive filtering,
state threaded across the dataset in order), scale labels into the unit
image square for optimization, then train S students on augmented views with
the blended MAE + optimal-transport objective. Everything is derived from
one seed: initialization, shuffling, and augmentation draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import saf as saf_mod
from .ckdformer import CKDformer, CKDformerConfig, ckd_step
from .conformer import ConformerConfig, DEFAULT_DTYPE
from .datamodel import Dataset, IMAGE_HEIGHT, IMAGE_WIDTH, flatten
from .distill import LossWeights, SinkhornConfig, SinkhornNumericError
from .pck import PCKConfig, PCKTable, pck, report
from .synth import AugmentConfig

log = logging.getLogger(__name__)

LABEL_SCALE = (float(IMAGE_WIDTH), float(IMAGE_HEIGHT))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, message: str):
        super().__init__(f"epoch {epoch} step {step}: {message}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 0.001
    seed: int = 0
    # ablation switches
    use_saf: bool = True
    use_ckd: bool = True
    students: int = 2
    shared_backbone: bool = True
    # model dimensions
    blocks: int = 4
    heads: int = 6
    d_ff: int = 128
    kernel: int = 15
    head_hidden: int = 128
    single_token: bool = False  # keep the frame as one attention token
    # optimization details
    beta: float = 0.5
    cosine_lr: bool = False
    grad_clip: float = 5.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.students < 1:
            raise ValueError("students must be >= 1")


def model_config_for(dataset: Dataset, config: TrainConfig) -> CKDformerConfig:
    """Derive model dimensions from the dataset topology and the run config.

    The default token factorization is one token per sniffing path; if the
    per-token width is not divisible by the head count (or single_token is
    set) the frame stays a single token, in which case k must divide.
    """
    topo = dataset.topology
    tokens = 1
    if not config.single_token and (topo.f % config.heads == 0):
        tokens = topo.e
    students = config.students if config.use_ckd else 1
    return CKDformerConfig(
        backbone=ConformerConfig(
            k=topo.k,
            L=config.blocks,
            n=config.heads,
            d_ff=config.d_ff,
            Ke=config.kernel,
            tokens=tokens,
        ),
        students=students,
        head_hidden=config.head_hidden,
        shared_backbone=config.shared_backbone,
    )


def prepare_inputs(
    dataset: Dataset,
    use_saf: bool,
    saf_config: saf_mod.SAFConfig | None = None,
) -> np.ndarray:
    """Flatten (and optionally filter) every frame into an (N, k) matrix."""
    if use_saf:
        result = saf_mod.saf_run(
            [s.csi for s in dataset.samples], dataset.topology, saf_config
        )
        return np.stack(result.reconstructions)
    return np.stack([flatten(s.csi, dataset.topology) for s in dataset.samples])


def _labels(dataset: Dataset) -> np.ndarray:
    # labels live in the unit image square during optimization
    scale = np.tile(LABEL_SCALE, 17)
    return np.stack([s.label for s in dataset.samples]) / scale


def _unscale(labels_norm: np.ndarray) -> np.ndarray:
    scale = np.tile(LABEL_SCALE, 17)
    return np.asarray(labels_norm) * scale


@dataclass
class EpochStats:
    epoch: int
    lr: float
    data_loss: list[float]  # per student, mean over steps
    ot_loss: list[float]
    total_loss: list[float]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: CKDformer
    history: list[EpochStats]
    config: TrainConfig
    model_config: CKDformerConfig

    def loss_curve(self) -> list[float]:
        """Mean total loss across students per epoch."""
        return [sum(e.total_loss) / len(e.total_loss) for e in self.history]


def train(
    dataset: Dataset,
    config: TrainConfig,
    sinkhorn: SinkhornConfig | None = None,
    augment: AugmentConfig | None = None,
    saf_config: saf_mod.SAFConfig | None = None,
    progress: bool = False,
    on_epoch=None,
) -> TrainResult:
    """Run the full optimization and return the model plus loss history.

    on_epoch(epoch, model, stats), when given, runs after every epoch
    (checkpointing hooks and the like).
    """
    if dataset.split != "train":
        log.warning("training on split %r", dataset.split)
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    sinkhorn = sinkhorn or SinkhornConfig()
    augment = augment or AugmentConfig()
    weights = LossWeights(beta=config.beta)

    inputs = prepare_inputs(dataset, config.use_saf, saf_config)
    labels = _labels(dataset)
    X = torch.as_tensor(inputs, dtype=DEFAULT_DTYPE)
    Y = torch.as_tensor(labels, dtype=DEFAULT_DTYPE)

    model_config = model_config_for(dataset, config)
    model = CKDformer(model_config, seed=config.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr)

    n = len(dataset)
    steps = math.ceil(n / config.batch_size)
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        lr = config.lr
        if config.cosine_lr and config.epochs > 1:
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (config.epochs - 1)))
            for group in optimizer.param_groups:
                group["lr"] = lr
        shuffle_rng = np.random.default_rng([config.seed, 2, epoch])
        order = shuffle_rng.permutation(n)
        sums = np.zeros((3, model.students))
        for step in range(steps):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            batch_rng = np.random.default_rng([config.seed, 3, epoch, step])
            optimizer.zero_grad()
            try:
                result = ckd_step(
                    model,
                    X[idx],
                    Y[idx],
                    dataset.topology.f,
                    augment,
                    sinkhorn,
                    weights,
                    batch_rng,
                )
            except SinkhornNumericError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            if not all(np.isfinite(result.total_losses)):
                raise TrainingDiverged(epoch, step, f"non-finite loss {result.total_losses}")
            if config.grad_clip > 0:
                total_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                if float(total_norm) > config.grad_clip:
                    log.debug(
                        "epoch %d step %d: gradient norm %.3g clipped to %.3g",
                        epoch, step, float(total_norm), config.grad_clip,
                    )
            optimizer.step()
            sums[0] += result.data_losses
            sums[1] += result.ot_losses
            sums[2] += result.total_losses
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            data_loss=list(sums[0] / steps),
            ot_loss=list(sums[1] / steps),
            total_loss=list(sums[2] / steps),
        )
        history.append(stats)
        if progress:
            log.info(
                "epoch %3d  lr %.2g  L_d %s  L_OT %s",
                epoch, lr,
                [f"{v:.4f}" for v in stats.data_loss],
                [f"{v:.4f}" for v in stats.ot_loss],
            )
        if on_epoch is not None:
            on_epoch(epoch, model, stats)
    return TrainResult(model=model, history=history, config=config, model_config=model_config)


@dataclass
class EvalResult:
    predictions: np.ndarray  # (N, 34) in image-plane units
    table: PCKTable
    report_text: str


def predict(
    dataset: Dataset,
    model: CKDformer,
    use_saf: bool,
    saf_config: saf_mod.SAFConfig | None = None,
    student: int | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Deterministic batch inference, returning pixel-unit 34-vectors."""
    inputs = prepare_inputs(dataset, use_saf, saf_config)
    X = torch.as_tensor(inputs, dtype=DEFAULT_DTYPE)
    outs = []
    for start in range(0, len(X), batch_size):
        outs.append(model.predict(X[start : start + batch_size], student=student).numpy())
    return _unscale(np.concatenate(outs))


def evaluate(
    dataset: Dataset,
    model: CKDformer,
    use_saf: bool,
    saf_config: saf_mod.SAFConfig | None = None,
    pck_config: PCKConfig | None = None,
    student: int | None = None,
) -> EvalResult:
    """Batch inference plus the full PCK table for a labelled split."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation dataset")
    preds = predict(dataset, model, use_saf, saf_config, student=student)
    gts = [s.skeleton() for s in dataset.samples]
    table = pck(preds, gts, pck_config)
    return EvalResult(predictions=preds, table=table, report_text=report(table))
