"""Weight-structure analyses: SVD energy, effective rank, cosine similarity, gates."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import EmbeddingParams, EmbeddingSpec, gates
from .errors import ContractError, ParseError, VariantError
from .numcore import Matrix, no_record, svd_values

ZERO_SIGMA_RTOL = 1e-12


@dataclass(frozen=True)
class EnergyCurve:
    sigma: np.ndarray  # descending
    energy: np.ndarray  # E_1 .. E_r

    def __len__(self) -> int:
        return len(self.energy)


def _arr(w) -> np.ndarray:
    return np.asarray(w.data if isinstance(w, Matrix) else w, dtype=np.float64)


def cumulative_energy(W) -> EnergyCurve:
    sigma = svd_values(Matrix(_arr(W)))
    sigma = np.where(sigma < ZERO_SIGMA_RTOL * sigma[0], 0.0, sigma) if sigma[0] > 0 else sigma
    sq = sigma * sigma
    tot = sq.sum()
    if tot == 0.0:
        raise ContractError("cumulative energy of an all-zero matrix is undefined")
    energy = np.cumsum(sq) / tot
    energy[-1] = 1.0  # cumsum rounding
    return EnergyCurve(sigma, energy)


def average_curve(curves: Sequence[EnergyCurve]) -> np.ndarray:
    """Pointwise mean of E_k across curves of equal length."""
    return np.mean([c.energy for c in curves], axis=0)


def effective_rank(curve: EnergyCurve | np.ndarray, threshold: float = 0.95) -> int:
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"threshold must lie in (0, 1], got {threshold}")
    energy = curve.energy if isinstance(curve, EnergyCurve) else np.asarray(curve)
    # tolerate the last ulp so threshold=1.0 lands on the full rank
    return int(np.argmax(energy >= threshold - 1e-12) + 1)


def cosine_similarity_matrix(weights: Sequence) -> np.ndarray:
    """Pairwise cosine similarity of vectorised matrices."""
    if len(weights) < 2:
        raise ContractError("cosine similarity needs at least two matrices")
    arrs = [_arr(w) for w in weights]
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ContractError(f"matrix {i} has shape {a.shape}, expected {shape}")
    V = np.stack([a.reshape(-1) for a in arrs])
    norms = np.linalg.norm(V, axis=1)
    for i, n in enumerate(norms):
        if n == 0.0:
            raise ContractError(f"matrix {i} is all zeros")
    U = V / norms[:, None]
    S = U @ U.T
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return np.clip(S, -1.0, 1.0)


def group_similarity_gap(S: np.ndarray, labels: Sequence[int]) -> tuple[float, float]:
    """Mean within-group and cross-group off-diagonal similarity."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = S[same & off]
    cross = S[~same]
    return float(within.mean()) if within.size else float("nan"), float(cross.mean()) if cross.size else float("nan")


def export_gates(params: EmbeddingParams, spec: EmbeddingSpec, path: str | Path) -> np.ndarray:
    if not spec.pooled:
        raise VariantError(f"{spec.variant} has no gates to export")
    with no_record():
        g = gates(params).data
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel"] + [f"g_{k + 1}" for k in range(spec.K)])
        for i, row in enumerate(g):
            w.writerow([i] + [repr(float(x)) for x in row])
    return g


def read_gates(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r[1:]] for r in rows])


def pool_similarity(params: EmbeddingParams) -> np.ndarray:
    spec = params.spec
    if not spec.pooled:
        raise VariantError(f"{spec.variant} has no component pool")
    if spec.K < 2:
        raise ContractError("pool similarity needs K >= 2")
    pool = params["L_pool"] if "L_pool" in params else params["W_pool"]
    return cosine_similarity_matrix(list(pool.data))


def write_energy(curve: EnergyCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "E_k"])
        for k, e in enumerate(curve.energy if isinstance(curve, EnergyCurve) else curve, start=1):
            w.writerow([k, repr(float(e))])


def write_matrix(S: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, S, delimiter=",", fmt="%.17g")


def from_csv_array(path: str | Path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
