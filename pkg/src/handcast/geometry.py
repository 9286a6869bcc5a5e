"""Planar homography estimation and application.

Implements normalized DLT, a seeded fixed-budget RANSAC with batched minimal
solves, homography chaining, and the match/mask plumbing used by the GT
pipeline. All coordinates here are pixels; callers that work in normalized
units convert at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import (
    AtInfinity,
    DegenerateConfiguration,
    InsufficientInliers,
    ShapeMismatch,
)

_W_EPS = 1e-12          # homogeneous scale below which a point is at infinity
_DET_EPS = 1e-12        # |det| below which a 3x3 is not a homography
_RANK_RTOL = 1e-9       # relative singular-value threshold for rank checks

# Reference resolution at which the default 3 px inlier threshold is defined.
_REF_DIAGONAL = float(np.hypot(456.0, 256.0))


# ---------------------------------------------------------------------------
# matches


@dataclass
class MatchSet:
    """Point correspondences between two frames.

    Attributes:
        src: (n, 2) pixel coordinates in the first frame.
        dst: (n, 2) pixel coordinates in the second frame.
        score: (n,) match scores in [0, 1].
    """

    src: np.ndarray
    dst: np.ndarray
    score: np.ndarray

    def __post_init__(self) -> None:
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if not (len(self.src) == len(self.dst) == len(self.score)):
            raise ShapeMismatch(
                f"match arrays disagree: src {len(self.src)}, dst {len(self.dst)}, "
                f"score {len(self.score)}"
            )

    def __len__(self) -> int:
        return int(self.src.shape[0])

    def subset(self, mask: np.ndarray) -> "MatchSet":
        mask = np.asarray(mask, dtype=bool)
        return MatchSet(self.src[mask], self.dst[mask], self.score[mask])

    def to_rows(self) -> list[list[float]]:
        return [
            [float(a), float(b), float(c), float(d), float(s)]
            for (a, b), (c, d), s in zip(self.src, self.dst, self.score)
        ]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "MatchSet":
        arr = np.asarray(list(rows), dtype=np.float64)
        if arr.size == 0:
            return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise ShapeMismatch(f"match rows must be [x1,y1,x2,y2,score], got {arr.shape}")
        return cls(arr[:, 0:2], arr[:, 2:4], arr[:, 4])


# ---------------------------------------------------------------------------
# homography


@dataclass(frozen=True)
class Homography:
    """A 3x3 invertible projective map, normalized so m[2,2] == 1 when nonzero."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeMismatch(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DegenerateConfiguration("homography contains non-finite entries")
        det = float(np.linalg.det(m))
        if abs(det) < _DET_EPS:
            raise DegenerateConfiguration(f"homography is singular (det={det:.3e})")
        if abs(m[2, 2]) > _W_EPS:
            m = m / m[2, 2]
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    @classmethod
    def scaling(cls, sx: float, sy: float) -> "Homography":
        return cls(np.diag([float(sx), float(sy), 1.0]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Homography(self.m @ other.m)


def project_point(h: Homography, p: Sequence[float]) -> np.ndarray:
    """Apply a homography to a single (x, y) point with a perspective divide."""
    v = h.m @ np.array([p[0], p[1], 1.0], dtype=np.float64)
    if abs(v[2]) < _W_EPS:
        raise AtInfinity(f"point {tuple(p)} maps to infinity (w={v[2]:.3e})")
    return v[:2] / v[2]


def project_points(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Vectorized projection of (n, 2) points; raises AtInfinity if any w ~ 0."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    out = ph @ h.m.T
    w = out[:, 2]
    if np.any(np.abs(w) < _W_EPS):
        raise AtInfinity("projection sent a point to infinity")
    return out[:, :2] / w[:, None]


def chain_homographies(hs: Sequence[Homography]) -> Homography:
    """Compose a sequence so the *last* element applies first.

    ``chain([A, B])`` maps p to A(B(p)); a single-element chain is that
    element. Raises DegenerateConfiguration on an empty sequence.
    """
    if len(hs) == 0:
        raise DegenerateConfiguration("cannot chain zero homographies")
    m = hs[0].m.copy()
    for h in hs[1:]:
        m = m @ h.m
    return Homography(m)


def default_inlier_threshold(width: int, height: int, base_px: float = 3.0) -> float:
    """RANSAC inlier threshold scaled with the image diagonal.

    ``base_px`` is defined at a 456x256 reference resolution.
    """
    diag = float(np.hypot(float(width), float(height)))
    return base_px * diag / _REF_DIAGONAL


# ---------------------------------------------------------------------------
# DLT

def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    """Isotropic normalization: centroid to origin, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = float(np.mean(np.linalg.norm(pts - c, axis=1)))
    if d < _W_EPS:
        raise DegenerateConfiguration("all points coincide; cannot normalize")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _dlt_design_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stack the two DLT constraint rows per correspondence: A h = 0."""
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    a = np.zeros((2 * n, 9), dtype=np.float64)
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v
    return a


def estimate_homography_dlt(matches: MatchSet, normalize: bool = True) -> Homography:
    """Direct linear transform from >= 4 correspondences.

    Exact for 4 points, least-squares for more. ``normalize`` applies Hartley
    isotropic normalization (the default; disabling it exists for the
    invariance check on well-conditioned data).

    Raises:
        DegenerateConfiguration: fewer than 4 matches, rank-deficient design
            matrix (e.g. 3+ collinear points), or a singular result.
    """
    n = len(matches)
    if n < 4:
        raise DegenerateConfiguration(f"need >= 4 matches for DLT, got {n}")
    src, dst = matches.src, matches.dst
    if normalize:
        t_src = _normalizing_transform(src)
        t_dst = _normalizing_transform(dst)
        src = (np.c_[src, np.ones(n)] @ t_src.T)[:, :2]
        dst = (np.c_[dst, np.ones(n)] @ t_dst.T)[:, :2]
    a = _dlt_design_rows(src, dst)
    _, sv, vh = np.linalg.svd(a)
    # A homography has 8 DOF: the design matrix must have rank 8 for a unique
    # (projective) solution.
    if sv[7] < _RANK_RTOL * sv[0]:
        raise DegenerateConfiguration(
            "point configuration is degenerate (rank-deficient design matrix)"
        )
    h = vh[-1].reshape(3, 3)
    if normalize:
        h = np.linalg.inv(t_dst) @ h @ t_src
    return Homography(h)


# ---------------------------------------------------------------------------
# RANSAC


@dataclass
class RansacConfig:
    """Fixed-budget RANSAC parameters. Pure function of (matches, config)."""

    max_iters: int = 2000
    inlier_threshold: float = 3.0
    min_inliers: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.inlier_threshold <= 0:
            raise ValueError(f"inlier_threshold must be > 0, got {self.inlier_threshold}")
        if self.min_inliers < 4:
            raise ValueError(f"min_inliers must be >= 4, got {self.min_inliers}")


@dataclass
class RansacResult:
    homography: Homography
    inlier_mask: np.ndarray
    n_candidates: int = 0

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def _batched_minimal_dlt(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """DLT on a batch of 4-point samples.

    Args:
        src, dst: (k, 4, 2) sampled correspondences.

    Returns:
        (k, 3, 3) homography candidates and a (k,) validity mask; invalid
        entries are degenerate samples (collinear points etc.).
    """
    k = src.shape[0]
    ok = np.ones(k, dtype=bool)

    def norm_t(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = p.mean(axis=1, keepdims=True)                      # (k,1,2)
        d = np.linalg.norm(p - c, axis=2).mean(axis=1)         # (k,)
        bad = d < _W_EPS
        d = np.where(bad, 1.0, d)
        s = np.sqrt(2.0) / d
        t = np.zeros((k, 3, 3))
        t[:, 0, 0] = s
        t[:, 1, 1] = s
        t[:, 0, 2] = -s * c[:, 0, 0]
        t[:, 1, 2] = -s * c[:, 0, 1]
        t[:, 2, 2] = 1.0
        return t, ~bad

    t_src, ok_s = norm_t(src)
    t_dst, ok_d = norm_t(dst)
    ok &= ok_s & ok_d
    sn = np.einsum("kij,knj->kni", t_src[:, :2, :2], src) + t_src[:, None, :2, 2].reshape(k, 1, 2)
    dn = np.einsum("kij,knj->kni", t_dst[:, :2, :2], dst) + t_dst[:, None, :2, 2].reshape(k, 1, 2)

    a = np.zeros((k, 8, 9), dtype=np.float64)
    x, y = sn[:, :, 0], sn[:, :, 1]
    u, v = dn[:, :, 0], dn[:, :, 1]
    a[:, 0::2, 0] = x
    a[:, 0::2, 1] = y
    a[:, 0::2, 2] = 1.0
    a[:, 0::2, 6] = -u * x
    a[:, 0::2, 7] = -u * y
    a[:, 0::2, 8] = -u
    a[:, 1::2, 3] = x
    a[:, 1::2, 4] = y
    a[:, 1::2, 5] = 1.0
    a[:, 1::2, 6] = -v * x
    a[:, 1::2, 7] = -v * y
    a[:, 1::2, 8] = -v

    _, sv, vh = np.linalg.svd(a)
    ok &= sv[:, 7] >= _RANK_RTOL * sv[:, 0]
    h = vh[:, -1, :].reshape(k, 3, 3)
    h = np.linalg.inv(t_dst) @ h @ t_src
    det = np.linalg.det(h)
    ok &= np.abs(det) >= _DET_EPS
    ok &= np.all(np.isfinite(h.reshape(k, -1)), axis=1)
    return h, ok


def _reprojection_errors_batch(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Errors (k, n) of projecting src through each of k homographies."""
    n = src.shape[0]
    ph = np.concatenate([src, np.ones((n, 1))], axis=1)        # (n, 3)
    proj = np.einsum("kij,nj->kni", h, ph)                     # (k, n, 3)
    w = proj[:, :, 2]
    safe = np.abs(w) >= _W_EPS
    w = np.where(safe, w, 1.0)
    xy = proj[:, :, :2] / w[:, :, None]
    err = np.linalg.norm(xy - dst[None, :, :], axis=2)
    return np.where(safe, err, np.inf)


def reprojection_errors(h: Homography, matches: MatchSet) -> np.ndarray:
    """Per-match reprojection error of dst against H(src), in pixels."""
    return _reprojection_errors_batch(h.m[None], matches.src, matches.dst)[0]


def estimate_homography_ransac(matches: MatchSet, cfg: RansacConfig) -> RansacResult:
    """Seeded RANSAC with a fixed iteration budget and final DLT refit.

    Deterministic: a pure function of (matches, cfg) including cfg.seed.
    The returned inlier mask is consistent with the refit homography
    (every marked inlier reprojects within cfg.inlier_threshold).

    Raises:
        InsufficientInliers: too few matches, or no consensus set of size
            >= max(4, cfg.min_inliers).
    """
    n = len(matches)
    need = max(4, cfg.min_inliers)
    if n < need:
        raise InsufficientInliers(f"{n} matches < required {need}")

    rng = np.random.default_rng(cfg.seed)
    iters = int(cfg.max_iters)
    # Vectorized distinct 4-subsets: argsort of uniform noise per iteration.
    keys = rng.random((iters, n))
    idx = np.argsort(keys, axis=1)[:, :4]                      # (iters, 4)
    cand, ok = _batched_minimal_dlt(matches.src[idx], matches.dst[idx])
    if not np.any(ok):
        raise InsufficientInliers("all minimal samples were degenerate")

    err = _reprojection_errors_batch(cand, matches.src, matches.dst)
    counts = (err <= cfg.inlier_threshold).sum(axis=1)
    counts[~ok] = -1
    best = int(np.argmax(counts))                              # first max: deterministic
    if counts[best] < need:
        raise InsufficientInliers(
            f"best consensus has {int(counts[best])} inliers, need {need}"
        )

    consensus = err[best] <= cfg.inlier_threshold
    refit = estimate_homography_dlt(matches.subset(consensus))
    final_err = reprojection_errors(refit, matches)
    final_mask = final_err <= cfg.inlier_threshold
    if int(final_mask.sum()) < cfg.min_inliers:
        raise InsufficientInliers(
            f"refit keeps {int(final_mask.sum())} inliers, need {cfg.min_inliers}"
        )
    return RansacResult(refit, final_mask, n_candidates=int(ok.sum()))


# ---------------------------------------------------------------------------
# masks


def filter_matches_by_mask(
    matches: MatchSet, mask_src: np.ndarray, mask_dst: np.ndarray
) -> MatchSet:
    """Keep matches whose endpoints both land on unmasked (False) pixels.

    Masks are boolean rasters (height, width) where True marks excluded
    (hand) regions. Endpoints outside the raster are dropped: they cannot be
    verified as background.
    """
    mask_src = np.asarray(mask_src, dtype=bool)
    mask_dst = np.asarray(mask_dst, dtype=bool)
    if mask_src.ndim != 2 or mask_dst.ndim != 2:
        raise ShapeMismatch("masks must be 2-D boolean rasters")
    if mask_src.shape != mask_dst.shape:
        raise ShapeMismatch(
            f"mask shapes disagree: {mask_src.shape} vs {mask_dst.shape}"
        )
    h, w = mask_src.shape

    def background(pts: np.ndarray, mask: np.ndarray) -> np.ndarray:
        xi = np.floor(pts[:, 0]).astype(int)
        yi = np.floor(pts[:, 1]).astype(int)
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        keep = np.zeros(len(pts), dtype=bool)
        ii = np.where(inside)[0]
        keep[ii] = ~mask[yi[ii], xi[ii]]
        return keep

    keep = background(matches.src, mask_src) & background(matches.dst, mask_dst)
    return matches.subset(keep)


def encode_mask_rle(mask: np.ndarray) -> dict[str, Any]:
    """Row-major run-length encoding; runs alternate starting with False."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got shape {mask.shape}")
    flat = mask.reshape(-1)
    if flat.size == 0:
        return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": []}
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def decode_mask_rle(enc: dict[str, Any]) -> np.ndarray:
    """Inverse of :func:`encode_mask_rle`."""
    h, w = (int(v) for v in enc["size"])
    counts = enc["counts"]
    total = sum(counts)
    if total != h * w:
        raise ShapeMismatch(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    return flat.reshape(h, w)
