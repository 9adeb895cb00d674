"""Core domain types: sensing topology, CSI frames, skeleton labels, datasets.

A mutual-sensing network of m sensors yields e = m*(m-1) ordered sniffing
paths (sensors cannot sniff themselves); every path carries f subcarrier
amplitudes, so one time instant is an e x f matrix. Labels are 17 image-plane
keypoints captured at 30 Hz, flattened to 34-value vectors for regression.
"""

from __future__ import annotations

import json
from bisect import bisect_left
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

FRAME_RATE_HZ = 30
# Nominal image plane for keypoint coordinates (depth-camera resolution).
IMAGE_WIDTH = 512
IMAGE_HEIGHT = 424

NUM_KEYPOINTS = 17
LABEL_DIM = 2 * NUM_KEYPOINTS

# Canonical joint index table. Index i of a label vector holds
# (x_i, y_i) = label[2i], label[2i+1].
KEYPOINT_NAMES = (
    "head",
    "chest",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "abdomen",
    "neck",
    "sacrum",
)
KEYPOINT_INDEX = {name: i for i, name in enumerate(KEYPOINT_NAMES)}
RIGHT_SHOULDER = KEYPOINT_INDEX["r_shoulder"]
LEFT_HIP = KEYPOINT_INDEX["l_hip"]

# Bone list (parent, child) over the joint tree; used by the synthetic
# generator and the overlay renderer.
SKELETON_EDGES = (
    ("neck", "head"),
    ("chest", "neck"),
    ("abdomen", "chest"),
    ("sacrum", "abdomen"),
    ("chest", "r_shoulder"),
    ("r_shoulder", "r_elbow"),
    ("r_elbow", "r_wrist"),
    ("chest", "l_shoulder"),
    ("l_shoulder", "l_elbow"),
    ("l_elbow", "l_wrist"),
    ("sacrum", "r_hip"),
    ("r_hip", "r_knee"),
    ("r_knee", "r_ankle"),
    ("sacrum", "l_hip"),
    ("l_hip", "l_knee"),
    ("l_knee", "l_ankle"),
)

DATASET_FORMAT = "powerskel-dataset"
DATASET_FORMAT_VERSION = 1


class TopologyError(ValueError):
    """Raised for sensing-network configurations that cannot exist."""


class StreamOrderError(ValueError):
    """Raised when a timestamped stream is not sorted."""


def path_count(m: int) -> int:
    """Number of ordered sniffing paths among m mutually-sniffing sensors.

    Sensors cannot sniff themselves, so e = m * (m - 1).
    """
    if m < 2:
        raise TopologyError(f"need at least 2 sensors for mutual sensing, got {m}")
    return m * (m - 1)


@dataclass(frozen=True)
class SensingTopology:
    """The mutual-sensing network: sensor identities and derived path order.

    Paths are every ordered (transmitter, receiver) pair with tx != rx,
    sorted lexicographically so that row order of a CSI matrix is
    reproducible from the sensor identifiers alone.
    """

    sensor_ids: tuple[str, ...]
    f: int
    paths: tuple[tuple[str, str], ...] = field(init=False)

    def __post_init__(self) -> None:
        ids = tuple(self.sensor_ids)
        if len(ids) < 2:
            raise TopologyError(f"need at least 2 sensors, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate sensor ids")
        if self.f < 1:
            raise TopologyError(f"subcarrier count must be >= 1, got {self.f}")
        paths = tuple(sorted((tx, rx) for tx in ids for rx in ids if tx != rx))
        object.__setattr__(self, "sensor_ids", ids)
        object.__setattr__(self, "paths", paths)

    @property
    def m(self) -> int:
        return len(self.sensor_ids)

    @property
    def e(self) -> int:
        return len(self.paths)

    @property
    def k(self) -> int:
        """Flattened frame dimension e * f."""
        return self.e * self.f

    @cached_property
    def _path_index(self) -> dict[tuple[str, str], int]:
        return {path: i for i, path in enumerate(self.paths)}

    def path_index(self, tx_id: str, rx_id: str) -> int:
        """Row index of the (tx, rx) sniffing path, or KeyError if unknown."""
        return self._path_index[(tx_id, rx_id)]


def make_topology(m: int, f: int) -> SensingTopology:
    """Topology with locally-administered MAC-style ids 02:00:00:00:00:NN."""
    if m > 0xFF:
        raise TopologyError(f"at most 255 synthetic sensors supported, got {m}")
    ids = tuple(f"02:00:00:00:00:{i + 1:02x}" for i in range(m))
    return SensingTopology(sensor_ids=ids, f=f)


def _readonly_array(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CSIFrame:
    """One time instant of the mutual sensing matrix: e paths x f subcarriers."""

    timestamp_ms: int
    values: np.ndarray
    sequence_no: int = 0

    def __post_init__(self) -> None:
        values = _readonly_array(self.values)
        if values.ndim != 2:
            raise ValueError(f"CSI values must be 2-D (paths x subcarriers), got ndim={values.ndim}")
        if not np.all(np.isfinite(values)):
            raise ValueError("CSI values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def e(self) -> int:
        return self.values.shape[0]

    @property
    def f(self) -> int:
        return self.values.shape[1]


def flatten(frame: CSIFrame, topology: SensingTopology | None = None) -> np.ndarray:
    """Row-major flattening of the e x f matrix into a length-k vector.

    Traverses each path row in order, appending its subcarriers; k = e * f.
    """
    if topology is not None and frame.values.shape != (topology.e, topology.f):
        raise ValueError(
            f"frame shape {frame.values.shape} does not match topology "
            f"({topology.e}, {topology.f})"
        )
    return frame.values.reshape(-1).copy()


@dataclass(frozen=True)
class SkeletonFrame:
    """17 image-plane keypoints with per-joint visibility at one instant."""

    timestamp_ms: int
    keypoints: np.ndarray
    visibility: np.ndarray = None  # defaults to all-visible

    def __post_init__(self) -> None:
        kp = _readonly_array(self.keypoints)
        if kp.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"keypoints must have shape ({NUM_KEYPOINTS}, 2), got {kp.shape}")
        if not np.all(np.isfinite(kp)):
            raise ValueError("keypoints must be finite")
        if self.visibility is None:
            vis = np.ones(NUM_KEYPOINTS, dtype=bool)
        else:
            vis = np.array(self.visibility, dtype=bool)
            if vis.shape != (NUM_KEYPOINTS,):
                raise ValueError(f"visibility must have shape ({NUM_KEYPOINTS},), got {vis.shape}")
        vis.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "visibility", vis)

    def label_vector(self) -> np.ndarray:
        """Flat (x0, y0, ..., x16, y16) vector of length 34."""
        return self.keypoints.reshape(-1).copy()

    @classmethod
    def from_label(
        cls,
        timestamp_ms: int,
        label: np.ndarray,
        visibility: np.ndarray | None = None,
    ) -> "SkeletonFrame":
        label = np.asarray(label, dtype=np.float64)
        if label.shape != (LABEL_DIM,):
            raise ValueError(f"label must have length {LABEL_DIM}, got shape {label.shape}")
        return cls(
            timestamp_ms=timestamp_ms,
            keypoints=label.reshape(NUM_KEYPOINTS, 2),
            visibility=visibility,
        )


@dataclass(frozen=True)
class Sample:
    """One CSI frame paired with its flattened 34-value keypoint label."""

    csi: CSIFrame
    label: np.ndarray
    visibility: np.ndarray = None

    def __post_init__(self) -> None:
        label = _readonly_array(self.label)
        if label.shape != (LABEL_DIM,):
            raise ValueError(f"label must have length {LABEL_DIM}, got shape {label.shape}")
        if self.visibility is None:
            vis = np.ones(NUM_KEYPOINTS, dtype=bool)
        else:
            vis = np.array(self.visibility, dtype=bool)
            if vis.shape != (NUM_KEYPOINTS,):
                raise ValueError("visibility must have 17 entries")
        vis.setflags(write=False)
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "visibility", vis)

    @classmethod
    def from_frames(cls, csi: CSIFrame, skeleton: SkeletonFrame) -> "Sample":
        return cls(csi=csi, label=skeleton.label_vector(), visibility=skeleton.visibility)

    def skeleton(self) -> SkeletonFrame:
        """Rebuild the labelled pose for this sample."""
        return SkeletonFrame.from_label(self.csi.timestamp_ms, self.label, self.visibility)


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of samples sharing one sensing topology."""

    topology: SensingTopology
    samples: tuple[Sample, ...]
    split: str = "train"

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        shape = (self.topology.e, self.topology.f)
        for i, s in enumerate(samples):
            if s.csi.values.shape != shape:
                raise ValueError(
                    f"sample {i} CSI shape {s.csi.values.shape} does not match topology {shape}"
                )
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def timestamps(self) -> list[int]:
        return [s.csi.timestamp_ms for s in self.samples]


def assert_disjoint(a: Dataset, b: Dataset) -> None:
    """Train/test integrity: no timestamp may appear in both splits."""
    overlap = set(a.timestamps()) & set(b.timestamps())
    if overlap:
        raise ValueError(f"splits share {len(overlap)} timestamps, e.g. {sorted(overlap)[:3]}")


@dataclass(frozen=True)
class SyncResult:
    """Output of stream synchronization plus drop accounting."""

    samples: tuple[Sample, ...]
    dropped_csi: int
    dropped_labels: int

    @property
    def matched(self) -> int:
        return len(self.samples)


def _check_sorted(timestamps: list[int], name: str) -> None:
    for i in range(1, len(timestamps)):
        if timestamps[i] < timestamps[i - 1]:
            raise StreamOrderError(f"{name} stream not timestamp-sorted at position {i}")


def synchronize(
    csi_stream: list[CSIFrame],
    label_stream: list[SkeletonFrame],
    max_skew_ms: int,
) -> SyncResult:
    """Pair each CSI frame with the nearest skeleton frame within max_skew_ms.

    Matching is one-to-one: when several CSI frames claim the same label, the
    closest claimant wins (ties to the earlier frame) and the others drop.
    Unmatched frames on either stream are dropped and counted. The output is
    ordered by CSI timestamp, and re-running on its own output is a no-op.
    """
    csi_ts = [f.timestamp_ms for f in csi_stream]
    label_ts = [s.timestamp_ms for s in label_stream]
    _check_sorted(csi_ts, "CSI")
    _check_sorted(label_ts, "label")

    # claims[label_idx] -> (|dt|, csi position) of the best claimant so far
    claims: dict[int, tuple[int, int]] = {}
    for i, t in enumerate(csi_ts):
        if not label_ts:
            break
        j = bisect_left(label_ts, t)
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(label_ts):
                dt = abs(label_ts[cand] - t)
                # tie on |dt| -> earlier label wins, hence strict <
                if dt <= max_skew_ms and (best is None or dt < best[0]):
                    best = (dt, cand)
        if best is None:
            continue
        dt, cand = best
        held = claims.get(cand)
        if held is None or (dt, i) < held:
            claims[cand] = (dt, i)

    pairs = sorted((i, j) for j, (_, i) in claims.items())
    samples = tuple(
        Sample.from_frames(csi_stream[i], label_stream[j]) for i, j in pairs
    )
    return SyncResult(
        samples=samples,
        dropped_csi=len(csi_stream) - len(samples),
        dropped_labels=len(label_stream) - len(samples),
    )


# ---------------------------------------------------------------------------
# On-disk format: per-split JSON-lines record files plus a JSON manifest.
# ---------------------------------------------------------------------------

def _manifest_path(directory: Path) -> Path:
    return directory / "manifest.json"


def read_manifest(directory: str | Path) -> dict:
    path = _manifest_path(Path(directory))
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_dataset(dataset: Dataset, directory: str | Path, **manifest_extra) -> Path:
    """Write one split as JSONL records and merge its entry into the manifest.

    Record fields: timestamp_ms, sequence_no, csi (e*f row-major floats),
    label (34 floats), visibility (17 booleans). The manifest declares the
    topology, split sizes, and any generator metadata passed as keywords.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record_path = directory / f"{dataset.split}.jsonl"
    with open(record_path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fh.write(
                json.dumps(
                    {
                        "timestamp_ms": s.csi.timestamp_ms,
                        "sequence_no": s.csi.sequence_no,
                        "csi": s.csi.values.reshape(-1).tolist(),
                        "label": s.label.tolist(),
                        "visibility": s.visibility.tolist(),
                    }
                )
            )
            fh.write("\n")

    manifest_file = _manifest_path(directory)
    if manifest_file.exists():
        manifest = read_manifest(directory)
    else:
        manifest = {
            "format": DATASET_FORMAT,
            "version": DATASET_FORMAT_VERSION,
            "m": dataset.topology.m,
            "f": dataset.topology.f,
            "sensor_ids": list(dataset.topology.sensor_ids),
            "splits": {},
        }
    if manifest["m"] != dataset.topology.m or manifest["f"] != dataset.topology.f:
        raise ValueError("dataset topology does not match existing manifest")
    manifest["splits"][dataset.split] = len(dataset)
    manifest.update(manifest_extra)
    with open(manifest_file, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return record_path


def load_dataset(directory: str | Path, split: str) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unrecognized dataset format in {directory}")
    topology = SensingTopology(sensor_ids=tuple(manifest["sensor_ids"]), f=manifest["f"])
    samples = []
    with open(directory / f"{split}.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            csi = CSIFrame(
                timestamp_ms=rec["timestamp_ms"],
                values=np.asarray(rec["csi"], dtype=np.float64).reshape(
                    topology.e, topology.f
                ),
                sequence_no=rec.get("sequence_no", 0),
            )
            samples.append(
                Sample(csi=csi, label=np.asarray(rec["label"]), visibility=rec["visibility"])
            )
    return Dataset(topology=topology, samples=tuple(samples), split=split)
