"""Geometric similarity kernels with analytic gradients.

Scalar kernels (cosine, triangle area, Gram volume, multilinear inner
product) operate on single vectors. The batched kernels produce the score
matrices used by the contrastive losses and the retrieval paths, together
with analytic backward passes written as a handful of matrix products, so
no B x B x n intermediate is ever materialized.

Everything here is float64 and accepts vectors of any norm; projecting
embeddings onto the unit sphere is the encoders' job, not this module's.

Triangle area of vertices x, y, z in R^n, with sides u = x - y, v = x - z:

    A = 0.5 * sqrt(G),   G = <u,u><v,v> - <u,v>^2

G can come out slightly negative from floating-point cancellation and is
clamped at 0 (or at ``eps`` when a stabilization floor is requested) before
the square root. The gradient uses dA/dG = 1 / (4 sqrt(G)); at or below the
degeneracy cutoff the area is non-differentiable and the zero subgradient
is returned instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

# Squared-area threshold below which a triangle counts as degenerate: the
# analytic gradient is unbounded there, so the zero subgradient is used.
DEGENERATE_G = 1e-18


class Orientation(Enum):
    """Whether larger or smaller scores mean a better match."""

    HIGHER_IS_BETTER = "higher_is_better"
    LOWER_IS_BETTER = "lower_is_better"


@dataclass(frozen=True)
class ScoreMatrix:
    """B x K similarity/dissimilarity scores plus their orientation."""

    values: np.ndarray
    orientation: Orientation
    row_semantics: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"score matrix must be non-empty and 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("score matrix contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class TriangleGrad:
    """Partial derivatives of the triangle area w.r.t. each vertex.

    ``degenerate`` is set when G fell at or below the cutoff and the zero
    subgradient was returned.
    """

    d_x: np.ndarray
    d_y: np.ndarray
    d_z: np.ndarray
    degenerate: bool = False


def _vec(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite components")
    return arr


def _same_dim(*vecs: np.ndarray) -> int:
    dims = {v.shape[0] for v in vecs}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {[v.shape[0] for v in vecs]}")
    return dims.pop()


def _mat(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (batch, dim), got shape {arr.shape}")
    return arr


def _rowdot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, y)


# ---------------------------------------------------------------------------
# Scalar kernels
# ---------------------------------------------------------------------------


def cosine(x, y) -> float:
    """Cosine of the angle between x and y, clamped to [-1, 1].

    Raises ValueError for zero-norm inputs.
    """
    x, y = _vec(x, "x"), _vec(y, "y")
    _same_dim(x, y)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine is undefined for zero-norm vectors")
    c = float(np.dot(x, y)) / (nx * ny)
    return min(1.0, max(-1.0, c))


def triangle_area(x, y, z, eps: float = 0.0) -> float:
    """Area of the triangle with vertices x, y, z in R^n.

    ``eps`` >= 0 is a stabilization floor applied to G before the square
    root (0 for exact evaluation; a small positive value keeps training
    backward passes finite near degeneracy). Negative G from cancellation
    is clamped away in either case.
    """
    x, y, z = _vec(x, "x"), _vec(y, "y"), _vec(z, "z")
    _same_dim(x, y, z)
    if eps < 0.0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    u = x - y
    v = x - z
    uu = float(np.dot(u, u))
    vv = float(np.dot(v, v))
    uv = float(np.dot(u, v))
    g = uu * vv - uv * uv
    return 0.5 * float(np.sqrt(max(g, eps, 0.0)))


def triangle_area_grad(x, y, z, eps: float = 0.0,
                       degenerate_eps: float = DEGENERATE_G) -> TriangleGrad:
    """Analytic gradient of triangle_area w.r.t. each vertex.

    With A = 0.5 sqrt(G): dA/dG = 1/(4 sqrt(G)), dG/du = 2<v,v>u - 2<u,v>v,
    dG/dv = 2<u,u>v - 2<u,v>u, and the vertex gradients follow from
    u = x - y, v = x - z. When G <= max(eps, degenerate_eps) the stabilized
    area is flat (or non-differentiable), so the zero subgradient is
    returned with the degenerate flag set.
    """
    x, y, z = _vec(x, "x"), _vec(y, "y"), _vec(z, "z")
    n = _same_dim(x, y, z)
    u = x - y
    v = x - z
    uu = float(np.dot(u, u))
    vv = float(np.dot(v, v))
    uv = float(np.dot(u, v))
    g = uu * vv - uv * uv
    cutoff = max(eps, degenerate_eps)
    if g <= cutoff:
        zero = np.zeros(n)
        return TriangleGrad(zero, zero.copy(), zero.copy(), degenerate=True)
    da_dg = 1.0 / (4.0 * np.sqrt(g))
    dg_du = 2.0 * vv * u - 2.0 * uv * v
    dg_dv = 2.0 * uu * v - 2.0 * uv * u
    return TriangleGrad(
        d_x=da_dg * (dg_du + dg_dv),
        d_y=-da_dg * dg_du,
        d_z=-da_dg * dg_dv,
        degenerate=False,
    )


def regularized_score(x, y, z, alpha: float) -> float:
    """Downstream retrieval score: triangle area minus alpha * cos(x, y).

    x and y are the two task-relevant modalities; lower is better.
    """
    return triangle_area(x, y, z) - alpha * cosine(x, y)


def gram_volume(vectors: Sequence, k: int | None = None) -> float:
    """Volume of the parallelotope spanned by k vectors: sqrt(det(G^T G)).

    Uses the first ``k`` vectors (all of them by default). Requires
    2 <= k <= n.
    """
    vecs = [_vec(v, f"vectors[{i}]") for i, v in enumerate(vectors)]
    if k is None:
        k = len(vecs)
    if k > len(vecs):
        raise ValueError(f"k={k} exceeds the {len(vecs)} vectors given")
    vecs = vecs[:k]
    if k < 2:
        raise ValueError(f"need at least 2 vectors, got k={k}")
    n = _same_dim(*vecs)
    if k > n:
        raise ValueError(f"k={k} vectors cannot be independent in dimension {n}")
    g = np.stack(vecs, axis=1)  # n x k, vectors as columns
    det = float(np.linalg.det(g.T @ g))
    return float(np.sqrt(max(det, 0.0)))


def symile_mip(x, y, z) -> float:
    """Multilinear inner product sum_d x_d * y_d * z_d (higher is better)."""
    x, y, z = _vec(x, "x"), _vec(y, "y"), _vec(z, "z")
    _same_dim(x, y, z)
    return float(np.sum(x * y * z))


# ---------------------------------------------------------------------------
# Batched kernels (vary-data convention: entry (i, j) pairs text row i with
# data rows j, i.e. the triangle (t_i, v_j, a_j)). The vary-text matrix is
# the transpose evaluated on the same batch.
# ---------------------------------------------------------------------------


def area_terms(text: np.ndarray, video: np.ndarray, audio: np.ndarray):
    """Side inner products <u,u>, <v,v>, <u,v> for all (t_i, v_j, a_j).

    Returns three (Bt, Bd) arrays computed from Gram-style dot products, so
    memory stays O(Bt * Bd) regardless of the embedding dimension.
    """
    t, v, a = _mat(text, "text"), _mat(video, "video"), _mat(audio, "audio")
    if v.shape != a.shape:
        raise ValueError(f"video/audio shape mismatch: {v.shape} vs {a.shape}")
    if t.shape[1] != v.shape[1]:
        raise ValueError(f"dimension mismatch: text {t.shape[1]} vs data {v.shape[1]}")
    tt = _rowdot(t, t)[:, None]
    vv_r = _rowdot(v, v)[None, :]
    aa_r = _rowdot(a, a)[None, :]
    va_r = _rowdot(v, a)[None, :]
    tv = t @ v.T
    ta = t @ a.T
    uu = tt - 2.0 * tv + vv_r
    vv = tt - 2.0 * ta + aa_r
    uv = tt - ta - tv + va_r
    return uu, vv, uv


def area_matrix(text, video, audio, eps: float = 0.0) -> np.ndarray:
    """(Bt, Bd) matrix of triangle areas A(t_i, v_j, a_j)."""
    uu, vv, uv = area_terms(text, video, audio)
    g = uu * vv - uv * uv
    return 0.5 * np.sqrt(np.maximum(g, max(eps, 0.0)))


def area_matrix_backward(text, video, audio, upstream: np.ndarray,
                         eps: float = 0.0):
    """Gradients of sum(upstream * area_matrix(text, video, audio)).

    Entries whose G falls at or below max(eps, DEGENERATE_G) contribute the
    zero subgradient. Returns (d_text, d_video, d_audio).
    """
    t, v, a = _mat(text), _mat(video), _mat(audio)
    c = np.asarray(upstream, dtype=np.float64)
    uu, vv, uv = area_terms(t, v, a)
    if c.shape != uu.shape:
        raise ValueError(f"upstream shape {c.shape} does not match matrix {uu.shape}")
    g = uu * vv - uv * uv
    cutoff = max(eps, DEGENERATE_G)
    sqrt_g = np.sqrt(np.maximum(g, cutoff))
    w = np.where(g > cutoff, c / (4.0 * sqrt_g), 0.0)
    # dG/du = 2<v,v>u - 2<u,v>v and dG/dv = 2<u,u>v - 2<u,v>u give, per entry,
    # coefficient matrices on the side vectors u_ij = t_i - v_j, v_ij = t_i - a_j:
    ru = 2.0 * w * vv
    rw = 2.0 * w * uu
    q = 2.0 * w * uv
    pu = ru - q  # u coefficient of the text gradient (u and v both depend on t)
    pw = rw - q  # v coefficient of the text gradient
    d_text = (pu + pw).sum(axis=1, keepdims=True) * t - pu @ v - pw @ a
    d_video = (q - ru).T @ t + ru.sum(axis=0)[:, None] * v - q.sum(axis=0)[:, None] * a
    d_audio = (q - rw).T @ t + rw.sum(axis=0)[:, None] * a - q.sum(axis=0)[:, None] * v
    return d_text, d_video, d_audio


def batch_area_matrix(text, video, audio, direction: str = "vary_text",
                      eps: float = 0.0) -> ScoreMatrix:
    """Score matrix of triangle areas over a matched batch.

    direction "vary_text": entry (i, j) = A(t_j, v_i, a_i) (rows are data
    pairs, candidate captions vary). direction "vary_data": entry (i, j) =
    A(t_i, v_j, a_j) (rows are captions, candidate data pairs vary). The
    diagonal holds the positive-pair areas either way. Lower is better.
    """
    t, v, a = _mat(text), _mat(video), _mat(audio)
    if not (t.shape[0] == v.shape[0] == a.shape[0]):
        raise ValueError(
            f"batch length mismatch: text {t.shape[0]}, video {v.shape[0]}, audio {a.shape[0]}")
    areas = area_matrix(t, v, a, eps=eps)
    if direction == "vary_data":
        return ScoreMatrix(areas, Orientation.LOWER_IS_BETTER,
                           row_semantics="row i = caption t_i vs candidates (v_j, a_j)")
    if direction == "vary_text":
        return ScoreMatrix(areas.T, Orientation.LOWER_IS_BETTER,
                           row_semantics="row i = data pair (v_i, a_i) vs candidate captions t_j")
    raise ValueError(f"unknown direction {direction!r}")


def volume_matrix(text, video, audio) -> np.ndarray:
    """(Bt, Bd) parallelotope volumes sqrt(det Gram(t_i, v_j, a_j))."""
    t, v, a = _mat(text), _mat(video), _mat(audio)
    det = _volume_det(t, v, a)
    return np.sqrt(np.maximum(det, 0.0))


def _volume_det(t, v, a):
    tt = _rowdot(t, t)[:, None]
    vv = _rowdot(v, v)[None, :]
    aa = _rowdot(a, a)[None, :]
    va = _rowdot(v, a)[None, :]
    tv = t @ v.T
    ta = t @ a.T
    det = (tt * (vv * aa - va * va)
           - tv * tv * aa
           + 2.0 * tv * ta * va
           - ta * ta * vv)
    return det


def volume_matrix_backward(text, video, audio, upstream: np.ndarray):
    """Gradients of sum(upstream * volume_matrix(text, video, audio)).

    Uses the cofactors of the 3x3 Gram matrix; rank-deficient entries
    (det at or below the degeneracy cutoff) get the zero subgradient.
    """
    t, v, a = _mat(text), _mat(video), _mat(audio)
    c = np.asarray(upstream, dtype=np.float64)
    tt = _rowdot(t, t)[:, None]
    vv = _rowdot(v, v)[None, :]
    aa = _rowdot(a, a)[None, :]
    va = _rowdot(v, a)[None, :]
    tv = t @ v.T
    ta = t @ a.T
    det = (tt * (vv * aa - va * va) - tv * tv * aa
           + 2.0 * tv * ta * va - ta * ta * vv)
    if c.shape != det.shape:
        raise ValueError(f"upstream shape {c.shape} does not match matrix {det.shape}")
    sqrt_det = np.sqrt(np.maximum(det, DEGENERATE_G))
    w = np.where(det > DEGENERATE_G, c / (2.0 * sqrt_det), 0.0)
    # Cofactors of the symmetric Gram matrix [[tt, tv, ta], [tv, vv, va], [ta, va, aa]].
    c11 = vv * aa - va * va
    c22 = tt * aa - ta * ta
    c33 = tt * vv - tv * tv
    c12 = va * ta - tv * aa
    c13 = tv * va - vv * ta
    c23 = tv * ta - tt * va
    d_text = 2.0 * ((w * c11).sum(axis=1, keepdims=True) * t + (w * c12) @ v + (w * c13) @ a)
    d_video = 2.0 * ((w * c12).T @ t
                     + (w * c22).sum(axis=0)[:, None] * v
                     + (w * c23).sum(axis=0)[:, None] * a)
    d_audio = 2.0 * ((w * c13).T @ t
                     + (w * c23).sum(axis=0)[:, None] * v
                     + (w * c33).sum(axis=0)[:, None] * a)
    return d_text, d_video, d_audio


def mip_matrix(text, video, audio) -> np.ndarray:
    """(Bt, Bd) multilinear inner products sum_d t_i[d] v_j[d] a_j[d]."""
    t, v, a = _mat(text), _mat(video), _mat(audio)
    return t @ (v * a).T


def mip_matrix_backward(text, video, audio, upstream: np.ndarray):
    t, v, a = _mat(text), _mat(video), _mat(audio)
    c = np.asarray(upstream, dtype=np.float64)
    d_text = c @ (v * a)
    ct = c.T @ t
    return d_text, ct * a, ct * v


def cosine_matrix(x, y) -> np.ndarray:
    """(Bx, By) matrix of cosines between rows of x and rows of y."""
    x, y = _mat(x, "x"), _mat(y, "y")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise ValueError("cosine is undefined for zero-norm rows")
    return (x / nx[:, None]) @ (y / ny[:, None]).T


def cosine_matrix_backward(x, y, upstream: np.ndarray):
    """Gradients of sum(upstream * cosine_matrix(x, y))."""
    x, y = _mat(x, "x"), _mat(y, "y")
    c = np.asarray(upstream, dtype=np.float64)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise ValueError("cosine is undefined for zero-norm rows")
    xh = x / nx[:, None]
    yh = y / ny[:, None]
    s = xh @ yh.T
    d_x = (c @ yh - (c * s).sum(axis=1, keepdims=True) * xh) / nx[:, None]
    d_y = (c.T @ xh - (c * s).sum(axis=0)[:, None] * yh) / ny[:, None]
    return d_x, d_y


def triangle_area_rows(text, video, audio, eps: float = 0.0) -> np.ndarray:
    """Areas of the B matched triples (t_i, v_i, a_i) only."""
    t, v, a = _mat(text), _mat(video), _mat(audio)
    u = t - v
    w = t - a
    uu = _rowdot(u, u)
    ww = _rowdot(w, w)
    uw = _rowdot(u, w)
    g = uu * ww - uw * uw
    return 0.5 * np.sqrt(np.maximum(g, max(eps, 0.0)))


def cosine_rows(x, y) -> np.ndarray:
    """Cosines of the B matched pairs (x_i, y_i) only."""
    x, y = _mat(x, "x"), _mat(y, "y")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise ValueError("cosine is undefined for zero-norm rows")
    return np.clip(_rowdot(x, y) / (nx * ny), -1.0, 1.0)
