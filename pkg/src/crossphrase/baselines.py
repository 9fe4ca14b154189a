"""Orthogonal-mapping baseline over frozen encoder representations.

Fits the rotation W minimizing ||S W - T||_F over orthogonal matrices
for aligned representation rows S, T.  The minimizer is U V^T where
U s V^T is the SVD of S^T T; the SVD here is computed with a one-sided
Jacobi iteration so the fit has no dependence on library decompositions
(tests cross-check it against an independent implementation).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import ExampleSentence
from .encoder import PhraseEncoder, infer_phrase_vectors
from .retrieval import PhraseIndex, load_index, save_index

logger = logging.getLogger(__name__)

__all__ = [
    "OrthogonalMap",
    "jacobi_svd",
    "fit_orthogonal_map",
    "orthogonality_error",
    "represent_with_frozen_encoder",
    "save_map",
    "load_map",
]

# Rotations stop when every column pair is orthogonal to this relative level.
_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 60

MAP_TAG = "orthogonal-map-v1"


@dataclass
class OrthogonalMap:
    """A d x d orthogonal matrix applied as ``points @ matrix``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"map must be square, got {m.shape}")
        self.matrix = m

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape[-1] != self.dim:
            raise ValueError(f"points have dim {pts.shape[-1]}, map has dim {self.dim}")
        return pts @ self.matrix


def orthogonality_error(matrix: np.ndarray) -> float:
    d = matrix.shape[0]
    return float(np.abs(matrix.T @ matrix - np.eye(d)).max())


def _gram_schmidt_complete(columns: np.ndarray, have: int) -> np.ndarray:
    """Fill columns[:, have:] with an orthonormal completion."""
    d = columns.shape[0]
    filled = have
    for basis in range(d):
        if filled == d:
            break
        v = np.zeros(d)
        v[basis] = 1.0
        for _ in range(2):
            v -= columns[:, :filled] @ (columns[:, :filled].T @ v)
        norm = np.sqrt((v**2).sum())
        if norm > 1e-8:
            columns[:, filled] = v / norm
            filled += 1
    if filled < d:
        raise RuntimeError("could not complete an orthonormal basis")
    return columns


def jacobi_svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi SVD of a square matrix: returns (U, s, Vt).

    Singular values are sorted descending.  When the matrix is rank
    deficient the missing left singular vectors are completed to an
    orthonormal basis.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"jacobi_svd expects a square matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("jacobi_svd: non-finite entries")
    d = m.shape[0]
    a = m.copy()
    v = np.eye(d)

    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(d - 1):
            for q in range(p + 1, d):
                app = float(a[:, p] @ a[:, p])
                aqq = float(a[:, q] @ a[:, q])
                apq = float(a[:, p] @ a[:, q])
                if abs(apq) <= _JACOBI_TOL * np.sqrt(app * aqq) or app == 0.0 or aqq == 0.0:
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                col_p = a[:, p].copy()
                a[:, p] = cs * col_p - sn * a[:, q]
                a[:, q] = sn * col_p + cs * a[:, q]
                col_p = v[:, p].copy()
                v[:, p] = cs * col_p - sn * v[:, q]
                v[:, q] = sn * col_p + cs * v[:, q]
        if not rotated:
            break
    else:
        logger.warning("jacobi_svd: no convergence after %d sweeps", _JACOBI_MAX_SWEEPS)

    s = np.sqrt((a**2).sum(axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    a = a[:, order]
    v = v[:, order]

    scale = s[0] if s[0] > 0.0 else 1.0
    rank = int((s > d * np.finfo(np.float64).eps * scale).sum())
    u = np.zeros((d, d))
    for j in range(rank):
        u[:, j] = a[:, j] / s[j]
    if rank < d:
        logger.warning("jacobi_svd: input has rank %d < %d, completing the basis", rank, d)
        u = _gram_schmidt_complete(u, rank)
    return u, s, v.T


def fit_orthogonal_map(source: np.ndarray, target: np.ndarray) -> OrthogonalMap:
    """Least-squares orthogonal map from aligned rows of source to target."""
    s = np.asarray(source, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if s.ndim != 2 or s.shape != t.shape:
        raise ValueError(f"aligned row matrices required, got {s.shape} and {t.shape}")
    if s.shape[0] < 1:
        raise ValueError("at least one aligned row pair is required")
    u, _, vt = jacobi_svd(s.T @ t)
    return OrthogonalMap(u @ vt)


def represent_with_frozen_encoder(
    encoder: PhraseEncoder,
    examples: Sequence[ExampleSentence],
    layer: Optional[int] = None,
) -> np.ndarray:
    """Unit-norm pre-projection phrase vector from a frozen encoder.

    The default layer is the next-to-last one, which carries the most
    transferable structure in an untrained or generic encoder.
    """
    if layer is None:
        layer = max(encoder.config.num_layers - 1, 0)
    _, projected = infer_phrase_vectors(
        encoder, examples, use_projection=False, layer=layer
    )
    return projected[0]


def save_map(omap: OrthogonalMap, path) -> None:
    """Store the map with the same container as index rows."""
    ids = [str(i) for i in range(omap.dim)]
    save_index(PhraseIndex(omap.matrix, ids, MAP_TAG), path)


def load_map(path) -> OrthogonalMap:
    index = load_index(path)
    if index.fingerprint != MAP_TAG:
        raise ValueError(f"not an orthogonal-map file (tag {index.fingerprint!r})")
    return OrthogonalMap(index.matrix)
