"""Synthetic paired-data generation: scripted skeleton motion and a CSI forward model.

Poses come from a 2-D kinematic tree with fixed bone lengths, animated by
scripted action templates at 30 Hz. The forward model maps a pose to an
e x f amplitude matrix through per-path sinusoidal mixtures whose phases
depend smoothly on the joint coordinates, plus optional observation noise.
It makes no claim of electromagnetic fidelity; its contract is smoothness,
determinism, and injectivity at template scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .datamodel import (
    CSIFrame,
    Dataset,
    FRAME_RATE_HZ,
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    KEYPOINT_INDEX,
    NUM_KEYPOINTS,
    Sample,
    SensingTopology,
    SkeletonFrame,
)

Motion = Literal["reach_up", "swing_arm", "squat", "mixed"]

MOTION_TEMPLATES = ("reach_up", "swing_arm", "squat")

# Bone lengths in pixels for the nominal 512x424 image plane.
BONE_LENGTHS = {
    "sacrum->abdomen": 28.0,
    "abdomen->chest": 42.0,
    "chest->neck": 22.0,
    "neck->head": 24.0,
    "chest->shoulder": 38.0,
    "upper_arm": 52.0,
    "forearm": 46.0,
    "sacrum->hip": 22.0,
    "thigh": 66.0,
    "shin": 62.0,
}

_TEMPLATE_PERIOD_FRAMES = 60  # one template cycle = 2 s at 30 Hz


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int
    n_train: int
    n_test: int
    topology: SensingTopology
    noise_sigma: float = 0.05  # observation noise relative to signal RMS
    motion: Motion = "mixed"

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.motion != "mixed" and self.motion not in MOTION_TEMPLATES:
            raise ValueError(f"unknown motion template {self.motion!r}")


@dataclass(frozen=True)
class AugmentConfig:
    """Strong augmentation injects noise; weak augmentation pans subcarriers."""

    strong_noise_sigma: float = 0.05
    weak_shift_max: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strong_noise_sigma < 0:
            raise ValueError("strong_noise_sigma must be non-negative")
        if self.weak_shift_max < 0:
            raise ValueError("weak_shift_max must be non-negative")


def _dir(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _pose_from_angles(root: np.ndarray, ang: dict[str, float]) -> np.ndarray:
    """Forward kinematics: joint angles to 17 keypoint positions.

    Angles are absolute image-plane directions (y grows downward), one per
    bone, so every bone keeps its exact template length in every frame.
    """
    L = BONE_LENGTHS
    p = np.zeros((NUM_KEYPOINTS, 2))

    def put(name: str, pos: np.ndarray) -> np.ndarray:
        p[KEYPOINT_INDEX[name]] = pos
        return pos

    sacrum = put("sacrum", root)
    abdomen = put("abdomen", sacrum + L["sacrum->abdomen"] * _dir(ang["spine"]))
    chest = put("chest", abdomen + L["abdomen->chest"] * _dir(ang["spine"]))
    neck = put("neck", chest + L["chest->neck"] * _dir(ang["spine"]))
    put("head", neck + L["neck->head"] * _dir(ang["spine"]))

    r_sh = put("r_shoulder", chest + L["chest->shoulder"] * _dir(ang["r_clavicle"]))
    l_sh = put("l_shoulder", chest + L["chest->shoulder"] * _dir(ang["l_clavicle"]))
    r_el = put("r_elbow", r_sh + L["upper_arm"] * _dir(ang["r_upper_arm"]))
    l_el = put("l_elbow", l_sh + L["upper_arm"] * _dir(ang["l_upper_arm"]))
    put("r_wrist", r_el + L["forearm"] * _dir(ang["r_forearm"]))
    put("l_wrist", l_el + L["forearm"] * _dir(ang["l_forearm"]))

    r_hip = put("r_hip", sacrum + L["sacrum->hip"] * _dir(ang["r_pelvis"]))
    l_hip = put("l_hip", sacrum + L["sacrum->hip"] * _dir(ang["l_pelvis"]))
    r_kn = put("r_knee", r_hip + L["thigh"] * _dir(ang["r_thigh"]))
    l_kn = put("l_knee", l_hip + L["thigh"] * _dir(ang["l_thigh"]))
    put("r_ankle", r_kn + L["shin"] * _dir(ang["r_shin"]))
    put("l_ankle", l_kn + L["shin"] * _dir(ang["l_shin"]))
    return p


_UP = -math.pi / 2  # y axis points down in image coordinates
_DOWN = math.pi / 2


def _neutral_angles() -> dict[str, float]:
    return {
        "spine": _UP,
        "r_clavicle": math.pi,  # subject faces the camera: their right is image-left
        "l_clavicle": 0.0,
        "r_upper_arm": _DOWN + 0.12,
        "l_upper_arm": _DOWN - 0.12,
        "r_forearm": _DOWN + 0.08,
        "l_forearm": _DOWN - 0.08,
        "r_pelvis": math.pi - 0.9,
        "l_pelvis": 0.9,
        "r_thigh": _DOWN + 0.05,
        "l_thigh": _DOWN - 0.05,
        "r_shin": _DOWN,
        "l_shin": _DOWN,
    }


def _template_angles(motion: str, phase: float, root_y_off: list[float]) -> dict[str, float]:
    """Joint angles for one template at cycle phase in [0, 1).

    Every template passes through the neutral pose at phase 0, so switching
    templates at cycle boundaries keeps the sequence continuous.
    """
    ang = _neutral_angles()
    # smooth 0 -> 1 -> 0 envelope over the cycle
    env = 0.5 * (1.0 - math.cos(2.0 * math.pi * phase))
    if motion == "reach_up":
        # both arms sweep from hanging to overhead
        ang["r_upper_arm"] = _DOWN + 0.12 - env * (math.pi - 0.2)
        ang["l_upper_arm"] = _DOWN - 0.12 + env * (math.pi - 0.2)
        ang["r_forearm"] = ang["r_upper_arm"] - env * 0.3
        ang["l_forearm"] = ang["l_upper_arm"] + env * 0.3
    elif motion == "swing_arm":
        swing = 0.9 * math.sin(2.0 * math.pi * phase)
        ang["r_upper_arm"] = _DOWN + 0.12 + swing
        ang["l_upper_arm"] = _DOWN - 0.12 - swing
        ang["r_forearm"] = ang["r_upper_arm"] + 0.4 * swing
        ang["l_forearm"] = ang["l_upper_arm"] - 0.4 * swing
        ang["spine"] = _UP + 0.06 * math.sin(2.0 * math.pi * phase)
    elif motion == "squat":
        bend = env
        ang["r_thigh"] = _DOWN + 0.05 + 0.9 * bend
        ang["l_thigh"] = _DOWN - 0.05 - 0.9 * bend
        ang["r_shin"] = _DOWN - 0.55 * bend
        ang["l_shin"] = _DOWN + 0.55 * bend
        ang["r_upper_arm"] = _DOWN + 0.12 - bend * 1.5
        ang["l_upper_arm"] = _DOWN - 0.12 + bend * 1.5
        ang["r_forearm"] = ang["r_upper_arm"] - bend * 0.2
        ang["l_forearm"] = ang["l_upper_arm"] + bend * 0.2
        root_y_off[0] = 55.0 * bend  # pelvis drops as the knees bend
    return ang


def frame_timestamp_ms(index: int) -> int:
    """30 Hz timestamps: 0, 33, 66, 100, ..."""
    return index * 1000 // FRAME_RATE_HZ


def generate_skeleton_sequence(config: GeneratorConfig, count: int | None = None) -> list[SkeletonFrame]:
    """Deterministic 30 Hz pose sequence following the scripted templates."""
    if count is None:
        count = config.n_train + config.n_test
    rng = np.random.default_rng(config.seed)
    sway_phase = rng.uniform(0, 2 * math.pi)
    sway_amp = rng.uniform(8.0, 20.0)
    template_order = list(MOTION_TEMPLATES)
    rng.shuffle(template_order)

    base_root = np.array([IMAGE_WIDTH / 2.0, 230.0])
    frames = []
    for i in range(count):
        cycle, step = divmod(i, _TEMPLATE_PERIOD_FRAMES)
        phase = step / _TEMPLATE_PERIOD_FRAMES
        if config.motion == "mixed":
            motion = template_order[cycle % len(template_order)]
        else:
            motion = config.motion
        root_y_off = [0.0]
        ang = _template_angles(motion, phase, root_y_off)
        t_s = i / FRAME_RATE_HZ
        root = base_root + np.array(
            [sway_amp * math.sin(2 * math.pi * 0.1 * t_s + sway_phase), root_y_off[0]]
        )
        frames.append(
            SkeletonFrame(timestamp_ms=frame_timestamp_ms(i), keypoints=_pose_from_angles(root, ang))
        )
    return frames


# Mixing constants of the forward model depend only on the topology shape,
# never on the user seed, so the pose -> CSI map itself is a fixed function.
_MIXING_SEED = 0x5EA5


def _mixing(e: int, f: int, n_joints: int = NUM_KEYPOINTS):
    rng = np.random.default_rng([_MIXING_SEED, e, f])
    amp = rng.uniform(0.4, 1.0, size=(e, n_joints)) / math.sqrt(n_joints)
    wx = rng.uniform(-2.0, 2.0, size=(e, n_joints))
    wy = rng.uniform(-2.0, 2.0, size=(e, n_joints))
    phase = rng.uniform(0, 2 * math.pi, size=(e, n_joints))
    # slow progression across subcarriers: adjacent bins stay correlated,
    # as in a delay-limited frequency-smooth channel
    freq = 0.5 + 0.12 * np.arange(f)
    return amp, wx, wy, phase, freq


def csi_forward_model(
    skeleton: SkeletonFrame,
    topology: SensingTopology,
    noise_sigma: float = 0.0,
    seed: int = 0,
    sequence_no: int = 0,
) -> CSIFrame:
    """Map a pose to an e x f amplitude matrix, plus seeded observation noise.

    Path i, subcarrier j:
        2 + sum_g amp[i,g] * cos(2*pi*freq[j]*(wx[i,g]*x_g + wy[i,g]*y_g) + phase[i,g])
    with joint coordinates normalized to [0, 1]. Values are quantized to
    float32 precision because the wire format carries 32-bit floats; keeping
    the dataset at that precision makes UDP replay lossless.
    """
    e, f = topology.e, topology.f
    amp, wx, wy, phase, freq = _mixing(e, f)
    q = skeleton.keypoints / np.array([IMAGE_WIDTH, IMAGE_HEIGHT])
    proj = wx * q[:, 0][None, :] + wy * q[:, 1][None, :]  # (e, joints)
    args = 2 * math.pi * freq[None, :, None] * proj[:, None, :] + phase[:, None, :]
    values = 2.0 + (amp[:, None, :] * np.cos(args)).sum(axis=2)  # (e, f)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        rms = float(np.sqrt(np.mean(values**2)))
        values = values + rng.normal(0.0, noise_sigma * rms, size=values.shape)
    values = values.astype(np.float32).astype(np.float64)
    return CSIFrame(
        timestamp_ms=skeleton.timestamp_ms, values=values, sequence_no=sequence_no
    )


def generate_dataset(config: GeneratorConfig) -> tuple[Dataset, Dataset]:
    """Seeded train/test datasets with disjoint timestamps."""
    n = config.n_train + config.n_test
    skeletons = generate_skeleton_sequence(config, n)
    noise_rng = np.random.default_rng([config.seed, 1])
    frame_seeds = noise_rng.integers(0, 2**63 - 1, size=n)
    samples = []
    for i, sk in enumerate(skeletons):
        csi = csi_forward_model(
            sk,
            config.topology,
            noise_sigma=config.noise_sigma,
            seed=int(frame_seeds[i]),
            sequence_no=i,
        )
        samples.append(Sample.from_frames(csi, sk))
    train = Dataset(topology=config.topology, samples=tuple(samples[: config.n_train]), split="train")
    test = Dataset(topology=config.topology, samples=tuple(samples[config.n_train :]), split="test")
    return train, test


def add_noise(x: np.ndarray, sigma_rel: float, rng: np.random.Generator) -> np.ndarray:
    """x plus gaussian noise of standard deviation sigma_rel * RMS(x)."""
    x = np.asarray(x, dtype=np.float64)
    if sigma_rel == 0:
        return x.copy()
    rms = float(np.sqrt(np.mean(x**2)))
    return x + rng.normal(0.0, sigma_rel * rms, size=x.shape)


def strong_augment(x: np.ndarray, config: AugmentConfig) -> np.ndarray:
    """Noise injection: x + N(0, (strong_noise_sigma * RMS(x))^2), seeded."""
    return add_noise(x, config.strong_noise_sigma, np.random.default_rng(config.seed))


def cyclic_shift(x: np.ndarray, shift: int, f: int) -> np.ndarray:
    """Pan every path row by `shift` subcarrier positions (cyclically).

    shift == f completes a full cycle and is accepted as the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size % f != 0:
        raise ValueError(f"vector of length {x.size} is not a multiple of f={f}")
    if not 0 <= shift <= f:
        raise ValueError(f"shift must be in [0, {f}], got {shift}")
    rows = x.reshape(-1, f)
    return np.roll(rows, shift % f, axis=1).reshape(-1)


def weak_augment(x: np.ndarray, shift: int, f: int) -> np.ndarray:
    """Cyclic subcarrier panning; exactly energy-preserving."""
    return cyclic_shift(x, shift, f)
