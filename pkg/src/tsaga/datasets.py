"""Dataset ingestion (IDX), device partitioning and a synthetic stand-in task."""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .core import SeededRng
from .edge import DatasetShard

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_ROOT_ENV = "TSAGA_DATA_ROOT"


class IdxFormatError(ValueError):
    pass


def resolve_data_path(path: str | os.PathLike) -> Path:
    """Relative paths are looked up under $TSAGA_DATA_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return p


def _read_idx(path: Path, magic: int) -> np.ndarray:
    if not str(path) or str(path) == ".":
        raise IdxFormatError("empty path")
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IdxFormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write a uint8 array of 1 or 3 dims in IDX format."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_idx_dataset(images_path, labels_path, n_classes: int = 10) -> DatasetShard:
    images = _read_idx(resolve_data_path(images_path), IMAGES_MAGIC)
    labels = _read_idx(resolve_data_path(labels_path), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= n_classes:
        raise IdxFormatError(f"label {labels.max()} exceeds class count {n_classes}")
    features = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return DatasetShard(features, labels.astype(np.int64), n_classes=n_classes)


def subset(data: DatasetShard, idx: np.ndarray) -> DatasetShard:
    return DatasetShard(data.features[idx], data.labels[idx], n_classes=data.n_classes)


def partition(
    data: DatasetShard,
    m_devices: int,
    k_m: int,
    chi: int | None,
    rng: SeededRng,
) -> list[DatasetShard]:
    """Split ``data`` into ``m_devices`` disjoint shards of ``k_m`` samples.

    With ``chi`` set, each device first draws ``chi`` classes uniformly and then
    samples uniformly among the still-unused samples of those classes.
    """
    g = rng.generator()
    total = data.k_m
    if m_devices * k_m > total:
        raise ValueError(f"{m_devices} x {k_m} samples requested, only {total} available")
    if chi is None:
        idx = g.permutation(total)[: m_devices * k_m]
        return [subset(data, np.sort(idx[m * k_m : (m + 1) * k_m])) for m in range(m_devices)]

    classes = np.unique(data.labels)
    if not 1 <= chi <= classes.size:
        raise ValueError(f"chi={chi} outside [1, {classes.size}]")
    available = np.ones(total, dtype=bool)
    shards = []
    for _ in range(m_devices):
        chosen = g.choice(classes, size=chi, replace=False)
        pool = np.flatnonzero(available & np.isin(data.labels, chosen))
        if pool.size < k_m:
            raise ValueError(
                f"classes {sorted(chosen.tolist())} have only {pool.size} unused samples, need {k_m}"
            )
        pick = np.sort(g.choice(pool, size=k_m, replace=False))
        available[pick] = False
        shards.append(subset(data, pick))
    return shards


def shard_manifest(shards: list[DatasetShard]) -> list[dict]:
    return [
        {
            "device": m,
            "k_m": sh.k_m,
            "label_counts": np.bincount(sh.labels, minlength=sh.n_classes).tolist(),
        }
        for m, sh in enumerate(shards)
    ]


def write_manifest(shards: list[DatasetShard], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(shard_manifest(shards), indent=1) + "\n")


def synthetic_classification(
    n_samples: int,
    n_features: int,
    rng: SeededRng,
    n_classes: int = 10,
    separation: float = 1.0,
    dead_fraction: float = 0.2,
    noise: float = 1.0,
    offset: float = 0.0,
    spectrum: float = 1.0,
) -> DatasetShard:
    """Gaussian class clusters with a block of always-zero features.

    The dead features play the role of MNIST's empty border pixels: their
    weights never receive gradient, so the aggregated update is structurally
    sparse, as it is on image data. ``offset`` adds a mean intensity shared by
    all classes, like the common ink pattern of digit images; it makes the
    devices' gradients, and hence their top-k sets, largely agree.

    With ``spectrum`` > 1 the within-class noise is correlated: a random
    rotation of independent components whose standard deviations fall
    geometrically from ``noise`` to ``noise / spectrum``. The first gradient
    step then gives only a nearest-centroid rule, and descent has to learn the
    whitening over many rounds, much like pixel correlations in digit images.
    """
    g = rng.generator()
    n_live = n_features - int(round(dead_fraction * n_features))
    # pairwise center distance is about separation * sqrt(2)
    centers = separation * g.standard_normal((n_classes, n_live)) / np.sqrt(n_live)
    labels = g.integers(0, n_classes, size=n_samples)
    stds = noise * np.geomspace(1.0, 1.0 / spectrum, n_live)
    if spectrum != 1.0:
        rot, _ = np.linalg.qr(g.standard_normal((n_live, n_live)))
    else:
        rot = np.eye(n_live)
    live = offset + centers[labels] + (g.standard_normal((n_samples, n_live)) * stds) @ rot.T
    features = np.zeros((n_samples, n_features))
    cols = np.sort(g.choice(n_features, size=n_live, replace=False))
    features[:, cols] = live
    return DatasetShard(features, labels, n_classes=n_classes)
