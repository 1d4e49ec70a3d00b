"""Frequency-domain view of action trajectories.

The transform pair used throughout is the unnormalized DCT-II

    X_i = sum_n x_n cos(pi / N * (n + 1/2) * i)

and its 1/N-scaled inverse, which rebuilds a trajectory from the lowest
``k`` coefficients:

    y_n^k = 1/N * (X_0 + 2 * sum_{i=1}^{k-1} X_i cos(pi / N * (n + 1/2) * i))

Each action dimension (column) is transformed independently.  The default
path is direct O(N^2) summation written as a cosine-matrix product; a
scipy-backed fast path is available behind ``fast=True``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DomainError, RangeError, ShapeError

DEFAULT_BAND_EDGES = tuple(round(0.1 * i, 1) for i in range(11))


def _check_finite(values, what):
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise DomainError(f"{what}: non-finite value {values[r, c]!r} at row {r}, column {c}")


def _as_matrix(values, what):
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(what, arr.shape, detail="expected a non-empty N x d matrix")
    return arr


@dataclass(frozen=True)
class Trajectory:
    """An N x d action sequence, optionally with per-dimension normalization."""

    values: np.ndarray
    offset: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        values = _as_matrix(self.values, "Trajectory")
        _check_finite(values, "Trajectory")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if (self.offset is None) != (self.scale is None):
            raise DomainError("Trajectory: offset and scale must be given together")
        if self.scale is not None:
            offset = np.asarray(self.offset, dtype=np.float64).reshape(-1)
            scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
            if offset.shape != (self.dim,) or scale.shape != (self.dim,):
                raise ShapeError("Trajectory", offset.shape, scale.shape, detail=f"expected length {self.dim}")
            if not np.all(np.isfinite(offset)) or not np.all(scale > 0):
                raise DomainError("Trajectory: scale entries must be finite and strictly positive")
            object.__setattr__(self, "offset", offset)
            object.__setattr__(self, "scale", scale)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Spectrum:
    """Row ``i`` holds coefficient X_i for every action dimension."""

    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = _as_matrix(self.coeffs, "Spectrum")
        _check_finite(coeffs, "Spectrum")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def horizon(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]


@dataclass(frozen=True)
class BandEnergyTable:
    energy: np.ndarray  # d x B, rows sum to 1
    band_edges: tuple = field(default=DEFAULT_BAND_EDGES)

    @property
    def n_bands(self) -> int:
        return len(self.band_edges) - 1


# ---------------------------------------------------------------------------
# array-level kernels (operate on (..., N, d) arrays; used by the training loop)


@lru_cache(maxsize=64)
def cosine_matrix(n: int) -> np.ndarray:
    """C[i, n] = cos(pi / N * (n + 1/2) * i)."""
    idx = np.arange(n, dtype=np.float64)
    mat = np.cos(np.pi / n * np.outer(idx, idx + 0.5))
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=256)
def _synthesis_matrix(n: int, k: int) -> np.ndarray:
    # y = S @ X with S[n, i] = w_i / N * C[i, n], w_0 = 1, w_i = 2, zero past k
    weights = np.full(n, 2.0)
    weights[0] = 1.0
    weights[k:] = 0.0
    mat = cosine_matrix(n).T * weights[None, :] / n
    mat.setflags(write=False)
    return mat


def dct_array(x: np.ndarray, fast: bool = False) -> np.ndarray:
    """Forward transform along axis -2 of an (..., N, d) array."""
    x = np.asarray(x, dtype=np.float64)
    if fast:
        from scipy.fft import dct

        return dct(x, type=2, axis=-2) / 2.0
    return cosine_matrix(x.shape[-2]) @ x


def idct_array(coeffs: np.ndarray, k, fast: bool = False) -> np.ndarray:
    """k-level inverse along axis -2.  ``k`` may be an int or a per-batch int array."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = coeffs.shape[-2]
    if np.ndim(k) == 0:
        k = int(k)
        if fast:
            from scipy.fft import dct

            trunc = coeffs.copy()
            trunc[..., k:, :] = 0.0
            return dct(trunc, type=3, axis=-2) / n
        return _synthesis_matrix(n, k) @ coeffs
    ks = np.asarray(k, dtype=np.int64)
    if ks.shape != coeffs.shape[:-2]:
        raise ShapeError("idct_array", ks.shape, coeffs.shape, detail="per-batch levels must match leading axes")
    keep = (np.arange(n)[None, :] < ks.reshape(-1, 1)).reshape(ks.shape + (n, 1))
    return _synthesis_matrix(n, n) @ (coeffs * keep)


def lowpass_array(x: np.ndarray, k) -> np.ndarray:
    """k-level reconstruction of time-domain trajectories in one call."""
    return idct_array(dct_array(x), k)


# ---------------------------------------------------------------------------
# typed operations


def _check_level(k, n, what):
    if isinstance(k, bool) or int(k) != k:
        raise RangeError(f"{what}: level must be an integer, got {k!r}")
    if not 0 <= k <= n:
        raise RangeError(f"{what}: level k={k} outside [0, {n}]")
    return int(k)


def dct_forward(traj: Trajectory, fast: bool = False) -> Spectrum:
    if not isinstance(traj, Trajectory):
        traj = Trajectory(traj)
    return Spectrum(dct_array(traj.values, fast=fast))


def idct_k(spec: Spectrum, k: int, fast: bool = False) -> Trajectory:
    """k-level reconstruction; k=0 gives zeros, k=N is lossless."""
    if not isinstance(spec, Spectrum):
        spec = Spectrum(spec)
    k = _check_level(k, spec.horizon, "idct_k")
    if k == 0:
        return Trajectory(np.zeros_like(spec.coeffs))
    return Trajectory(idct_array(spec.coeffs, k, fast=fast))


def truncate(spec: Spectrum, k: int) -> Spectrum:
    k = _check_level(k, spec.horizon, "truncate")
    out = np.array(spec.coeffs)
    out[k:] = 0.0
    return Spectrum(out)


def energy_proportion(spec: Spectrum, p: float) -> np.ndarray:
    """Fraction of squared-coefficient energy in the lowest floor((N-1) p / 100) + 1 rows.

    Returns one value per action dimension.  Dimensions with zero total energy
    report 1.
    """
    if not 0.0 <= p <= 100.0:
        raise RangeError(f"energy_proportion: p={p} outside [0, 100]")
    n = spec.horizon
    cut = int((n - 1) * p / 100.0)
    sq = spec.coeffs**2
    total = sq.sum(axis=0)
    kept = sq[: cut + 1].sum(axis=0)
    out = np.ones(spec.dim)
    nz = total > 0
    out[nz] = kept[nz] / total[nz]
    return np.minimum(out, 1.0)


def parseval_energies(traj: Trajectory, spec: Optional[Spectrum] = None):
    """Both sides of N * sum x^2 == X_0^2 + 2 * sum_{i>=1} X_i^2, per dimension."""
    if spec is None:
        spec = dct_forward(traj)
    time_side = traj.horizon * (traj.values**2).sum(axis=0)
    c = spec.coeffs
    freq_side = c[0] ** 2 + 2.0 * (c[1:] ** 2).sum(axis=0)
    return time_side, freq_side


def roughness(traj: Trajectory) -> np.ndarray:
    """Total squared second difference per dimension, reflecting the signal at both ends."""
    v = traj.values
    padded = np.concatenate([v[:1], v, v[-1:]], axis=0)
    d2 = padded[2:] - 2.0 * padded[1:-1] + padded[:-2]
    return (d2**2).sum(axis=0)


def _check_edges(edges):
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != 1.0:
        raise RangeError(f"band edges must run from 0 to 1, got {edges}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise RangeError(f"band edges must be strictly increasing, got {edges}")
    return edges


def band_index(n: int, edges: Sequence[float]) -> np.ndarray:
    """Band of each coefficient index, bucketed by i / N in [lo, hi)."""
    frac = np.arange(n) / n
    return np.searchsorted(np.asarray(edges[1:-1]), frac, side="right")


def band_energy_table(dataset: Sequence[Trajectory], band_edges=DEFAULT_BAND_EDGES) -> BandEnergyTable:
    edges = _check_edges(band_edges)
    if len(dataset) == 0:
        raise DataError("band_energy_table: empty dataset")
    d = dataset[0].dim
    pooled = np.zeros((d, len(edges) - 1))
    for traj in dataset:
        if traj.dim != d:
            raise ShapeError("band_energy_table", (traj.horizon, traj.dim), (dataset[0].horizon, d),
                             detail="mixed action dimensions")
        sq = dct_forward(traj).coeffs ** 2
        bands = band_index(traj.horizon, edges)
        for b in range(len(edges) - 1):
            pooled[:, b] += sq[bands == b].sum(axis=0)
    totals = pooled.sum(axis=1, keepdims=True)
    energy = np.zeros_like(pooled)
    nz = totals[:, 0] > 0
    energy[nz] = pooled[nz] / totals[nz]
    energy[~nz, 0] = 1.0
    return BandEnergyTable(energy, edges)


# ---------------------------------------------------------------------------
# CSV

_FMT = ".17g"


def _write_matrix_csv(mat, index_name):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([index_name] + [f"dim{j}" for j in range(mat.shape[1])])
    for i, row in enumerate(mat):
        w.writerow([i] + [format(v, _FMT) for v in row])
    return buf.getvalue()


def _read_matrix_csv(text, index_name, source="<string>"):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{source}: empty file")
    header = rows[0]
    if not header or header[0] != index_name or header[1:] != [f"dim{j}" for j in range(len(header) - 1)]:
        raise DataError(f"{source}:1: bad header {header!r}")
    d = len(header) - 1
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise DataError(f"{source}:{lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            if int(row[0]) != len(out):
                raise DataError(f"{source}:{lineno}: index {row[0]} out of order")
            out.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: {exc}") from None
    if not out:
        raise DataError(f"{source}: no data rows")
    return np.array(out, dtype=np.float64)


def trajectory_to_csv(traj: Trajectory) -> str:
    return _write_matrix_csv(traj.values, "t")


def trajectory_from_csv(text: str, source="<string>") -> Trajectory:
    return Trajectory(_read_matrix_csv(text, "t", source))


def spectrum_to_csv(spec: Spectrum) -> str:
    return _write_matrix_csv(spec.coeffs, "i")


def spectrum_from_csv(text: str, source="<string>") -> Spectrum:
    return Spectrum(_read_matrix_csv(text, "i", source))


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    return trajectory_from_csv(path.read_text(), source=str(path))


def band_table_to_csv(table: BandEnergyTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    edges = table.band_edges
    w.writerow(["dim"] + [f"{a!r}:{b!r}" for a, b in zip(edges, edges[1:])])
    for j, row in enumerate(table.energy):
        w.writerow([j] + [format(v, _FMT) for v in row])
    return buf.getvalue()


def band_table_from_csv(text: str, source="<string>") -> BandEnergyTable:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0][0] != "dim":
        raise DataError(f"{source}:1: bad header")
    try:
        edges = [float(rows[0][1].split(":")[0])] + [float(h.split(":")[1]) for h in rows[0][1:]]
        energy = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{source}: {exc}") from None
    return BandEnergyTable(energy, _check_edges(edges))

