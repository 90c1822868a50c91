"""Mean-zero Gaussian random fields with a squared-exponential kernel."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import SensorLayout

MAX_JITTER = 1e-6


class GRFFactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GRFConfig:
    length_scale: float
    variance: float = 1.0
    jitter: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError("length scale must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def rbf_kernel(l: float, x1, x2):
    """exp(-|x1 - x2|^2 / (2 l^2)) for scalars or points (coordinates on the last axis)."""
    if not l > 0:
        raise ValueError("length scale must be positive")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    d = x1 - x2
    # coordinates live on the last axis; scalars are 1D points
    sq = d * d if d.ndim == 0 else np.sum(d * d, axis=-1)
    return np.exp(-sq / (2.0 * l * l))


def covariance_matrix(cfg: GRFConfig, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    diff = coords[:, None, :] - coords[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    return cfg.variance * np.exp(-sq / (2.0 * cfg.length_scale**2))


def cholesky_with_jitter(K: np.ndarray, jitter: float, max_jitter: float = MAX_JITTER):
    """Cholesky of ``K + jitter I``, raising jitter tenfold until it succeeds."""
    j = jitter
    n = K.shape[0]
    while True:
        try:
            return np.linalg.cholesky(K + j * np.eye(n)), j
        except np.linalg.LinAlgError:
            if j >= max_jitter:
                raise GRFFactorizationError(
                    f"covariance not factorizable with jitter up to {max_jitter:g}") from None
            j = max(j * 10.0, 1e-12) if j > 0 else 1e-10
            j = min(j, max_jitter)


def grf_factor(cfg: GRFConfig, layout: SensorLayout) -> np.ndarray:
    L, _ = cholesky_with_jitter(covariance_matrix(cfg, layout.coords), cfg.jitter)
    return L


def grf_sample(cfg: GRFConfig, layout: SensorLayout, count: int,
               seed: int | None = None) -> np.ndarray:
    """``count`` draws as rows of a (count, n_sensors) array."""
    n = len(layout)
    if count == 0:
        return np.zeros((0, n))
    L = grf_factor(cfg, layout)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    z = rng.standard_normal((count, n))
    return z @ L.T


def second_difference_roughness(samples: np.ndarray) -> float:
    """Mean squared second difference along the last axis."""
    d2 = np.diff(np.asarray(samples), n=2, axis=-1)
    return float(np.mean(d2 * d2))


@dataclass(frozen=True, eq=False)
class Dataset:
    layout: SensorLayout
    values: np.ndarray
    split: str
    indices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != len(self.layout):
            raise ValueError("dataset rows must have one value per sensor")
        if not np.all(np.isfinite(v)):
            raise ValueError("dataset values must be finite")

    def __len__(self) -> int:
        return self.values.shape[0]

    def save(self, directory, name: str | None = None, meta: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        name = name or self.split
        np.save(directory / f"{name}.npy", self.values.astype("<f8"))
        manifest = {"split": self.split, "count": len(self),
                    "sensors": self.layout.to_list(),
                    "indices": self.indices.tolist(),
                    "values_file": f"{name}.npy", "dtype": "<f8",
                    "meta": meta or {}}
        path = directory / f"{name}.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, manifest_path) -> "Dataset":
        manifest_path = Path(manifest_path)
        m = json.loads(manifest_path.read_text())
        values = np.load(manifest_path.parent / m["values_file"])
        return cls(SensorLayout(np.asarray(m["sensors"])), values, m["split"],
                   np.asarray(m["indices"], dtype=np.int64))


def make_dataset(cfg: GRFConfig, layout: SensorLayout, total: int, train_fraction: float,
                 seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    samples = grf_sample(cfg, layout, total, seed=seed)
    perm = np.random.default_rng([seed, 1]).permutation(total)
    n_train = int(round(train_fraction * total))
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return (Dataset(layout, samples[tr], "train", tr),
            Dataset(layout, samples[te], "test", te))
