"""Screen-to-scan transform fitting: RANSAC homographies, radial lens term
and the dense locally-weighted homography mesh.

A single homography plus radial lens correction registers rigid plates; the
mesh extends this to deformed film bases by solving one weighted RANSAC
homography per node of a regular lattice-space grid (default 100x100 over
the detected area) with Gaussian distance weights, then blending the node
maps bilinearly into a continuous forward map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .analysis import PatchGrid


class RansacError(RuntimeError):
    """Not enough pairs or consensus for a homography."""


class LensFitError(RuntimeError):
    """Radial distortion fit is degenerate or under-determined."""


class MeshBuildError(RuntimeError):
    """Too few solvable mesh nodes."""


class MeshDomainError(RuntimeError):
    """Point far outside the mesh's mapped domain."""


class MeshInverseError(RuntimeError):
    """Newton inversion of the forward map did not converge."""


# ---------------------------------------------------------------------------
# Homography
# ---------------------------------------------------------------------------


def _normalize_h(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, np.float64)
    if abs(H[2, 2]) > 1e-8:
        return H / H[2, 2]
    n = np.linalg.norm(H)
    H = H / n
    # fix sign for reproducibility
    flat = H.ravel()
    lead = flat[np.argmax(np.abs(flat))]
    return H if lead >= 0 else -H


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so H[2,2] = 1 where possible."""

    H: np.ndarray

    def __post_init__(self):
        H = _normalize_h(self.H)
        if abs(np.linalg.det(H)) < 1e-12:
            raise ValueError("homography is singular")
        object.__setattr__(self, "H", H)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, np.float64)
        single = pts.ndim == 1
        p = np.atleast_2d(pts)
        hom = p @ self.H[:, :2].T + self.H[:, 2]
        out = hom[:, :2] / hom[:, 2:3]
        return out[0] if single else out.reshape(pts.shape)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    @staticmethod
    def fit(src, dst, weights=None) -> "Homography":
        """Weighted normalized-DLT least-squares homography."""
        src = np.asarray(src, np.float64)
        dst = np.asarray(dst, np.float64)
        if src.shape[0] < 4:
            raise RansacError("need at least 4 point pairs for a homography")
        Ts, sn = _norm_transform(src)
        Td, dn = _norm_transform(dst)
        H = _dlt(sn, dn, weights)
        return Homography(np.linalg.inv(Td) @ H @ Ts)


def _norm_transform(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Similarity normalization to centroid 0, RMS radius sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(((pts - c) ** 2).sum(axis=1).mean())
    s = np.sqrt(2.0) / max(rms, 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return T, (pts - c) * s


def _dlt(src: np.ndarray, dst: np.ndarray, weights=None) -> np.ndarray:
    """DLT on pre-normalized points via the 9x9 normal matrix."""
    n = src.shape[0]
    A = np.zeros((2 * n, 9))
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    A[0::2, 0] = -x
    A[0::2, 1] = -y
    A[0::2, 2] = -1
    A[0::2, 6] = u * x
    A[0::2, 7] = u * y
    A[0::2, 8] = u
    A[1::2, 3] = -x
    A[1::2, 4] = -y
    A[1::2, 5] = -1
    A[1::2, 6] = v * x
    A[1::2, 7] = v * y
    A[1::2, 8] = v
    if weights is not None:
        A *= np.sqrt(np.repeat(np.asarray(weights, np.float64), 2))[:, None]
    G = A.T @ A
    w, vecs = np.linalg.eigh(G)
    h = vecs[:, 0]
    return h.reshape(3, 3)


def _dlt_batch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Minimal 4-point DLT for a batch of samples: (B, 4, 2) -> (B, 3, 3)."""
    B = src.shape[0]
    A = np.zeros((B, 8, 9))
    x, y = src[:, :, 0], src[:, :, 1]
    u, v = dst[:, :, 0], dst[:, :, 1]
    A[:, 0::2, 0] = -x
    A[:, 0::2, 1] = -y
    A[:, 0::2, 2] = -1
    A[:, 0::2, 6] = u * x
    A[:, 0::2, 7] = u * y
    A[:, 0::2, 8] = u
    A[:, 1::2, 3] = -x
    A[:, 1::2, 4] = -y
    A[:, 1::2, 5] = -1
    A[:, 1::2, 6] = v * x
    A[:, 1::2, 7] = v * y
    A[:, 1::2, 8] = v
    G = np.einsum("bki,bkj->bij", A, A)
    _, vecs = np.linalg.eigh(G)
    return vecs[:, :, 0].reshape(B, 3, 3)


def _reproj_errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Reprojection distance of each pair under H; (B, 3, 3) x (N, 2)."""
    hom = np.einsum("bij,nj->bni", H[:, :, :2], src) + H[:, None, :, 2]
    w = hom[:, :, 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    xy = hom[:, :, :2] / w[:, :, None]
    err = np.linalg.norm(xy - dst[None], axis=2)
    err[bad] = np.inf
    return err


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 2000
    inlier_threshold_px: float = 0.75
    min_inliers: int = 8
    confidence: float = 0.999
    batch: int = 32
    seed: int = 0
    # Skip sampling when a direct weighted fit already reaches this inlier
    # fraction (clean flood-fill grids); None forces sampling always.
    direct_accept_frac: Optional[float] = 0.99


def ransac_homography(
    src,
    dst,
    weights=None,
    params: RansacParams = RansacParams(),
) -> Tuple[Homography, np.ndarray]:
    """Robust weighted homography src -> dst.

    Deterministic for a given seed and invariant to the input pair order
    (pairs are canonically sorted internally).  Returns the refined
    homography and per-input-pair inlier flags.
    """
    src = np.asarray(src, np.float64).reshape(-1, 2)
    dst = np.asarray(dst, np.float64).reshape(-1, 2)
    n = src.shape[0]
    if n < 4:
        raise RansacError(f"need >= 4 pairs, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, np.float64).copy()

    order = np.lexsort((dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))
    inv_order = np.argsort(order)
    src, dst, w = src[order], dst[order], w[order]

    Ts, src_n = _norm_transform(src)
    Td, dst_n = _norm_transform(dst)
    thresh_n = params.inlier_threshold_px * Td[0, 0]

    best_H = None
    best_score = -np.inf
    best_inl = None

    def consider(H_stack):
        nonlocal best_H, best_score, best_inl
        errs = _reproj_errors(H_stack, src_n, dst_n)
        inl = errs < thresh_n
        scores = (inl * w[None]).sum(axis=1)
        k = int(np.argmax(scores))
        if scores[k] > best_score:
            best_score = scores[k]
            best_H = H_stack[k]
            best_inl = inl[k]

    if params.direct_accept_frac is not None:
        H0 = _dlt(src_n, dst_n, w)
        consider(H0[None])
        if best_inl is not None and best_inl.mean() >= params.direct_accept_frac:
            return _refit(src, dst, w, best_inl, params, inv_order, Ts, Td, thresh_n, src_n, dst_n)

    rng = np.random.Generator(np.random.Philox(key=params.seed))
    done = 0
    needed = params.iterations
    while done < min(needed, params.iterations):
        B = min(params.batch, params.iterations - done)
        # 4 distinct indices per sample, weighted toward confident pairs
        keys = rng.random((B, n))
        idx = np.argpartition(keys, 4, axis=1)[:, :4]
        H_stack = _dlt_batch(src_n[idx], dst_n[idx])
        consider(H_stack)
        done += B
        ratio = max(best_inl.mean() if best_inl is not None else 0.0, 1e-6)
        if ratio >= 1.0 - 1e-12:
            break
        needed = np.log(max(1 - params.confidence, 1e-12)) / np.log(
            max(1 - ratio**4, 1e-12)
        )

    if best_inl is None or best_inl.sum() < max(4, params.min_inliers):
        raise RansacError(
            f"consensus too small: {0 if best_inl is None else int(best_inl.sum())} inliers"
        )
    return _refit(src, dst, w, best_inl, params, inv_order, Ts, Td, thresh_n, src_n, dst_n)


def _refit(src, dst, w, inl, params, inv_order, Ts, Td, thresh_n, src_n, dst_n):
    """Weighted least-squares refinement on inliers, one re-threshold round."""
    for _ in range(2):
        if inl.sum() < 4:
            raise RansacError("degenerate inlier set during refinement")
        Hn = _dlt(src_n[inl], dst_n[inl], w[inl])
        errs = _reproj_errors(Hn[None], src_n, dst_n)[0]
        new_inl = errs < thresh_n
        if new_inl.sum() < max(4, params.min_inliers):
            break
        if (new_inl == inl).all():
            inl = new_inl
            break
        inl = new_inl
    H = Homography(np.linalg.inv(Td) @ Hn @ Ts)
    return H, inl[inv_order]


# ---------------------------------------------------------------------------
# Radial lens model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LensModel:
    """Radial distortion about a fixed center: r' = r * (1 + k1 p^2 + k2 p^4)
    with p the radius normalized by ``r_norm``."""

    center: Tuple[float, float] = (0.0, 0.0)
    k1: float = 0.0
    k2: float = 0.0
    r_norm: float = 1.0

    @staticmethod
    def identity() -> "LensModel":
        return LensModel()

    @property
    def is_identity(self) -> bool:
        return self.k1 == 0.0 and self.k2 == 0.0

    def _multiplier(self, rho2: np.ndarray) -> np.ndarray:
        return 1.0 + self.k1 * rho2 + self.k2 * rho2 * rho2

    def distort(self, xy) -> np.ndarray:
        xy = np.asarray(xy, np.float64)
        if self.is_identity:
            return xy.copy()
        rel = xy - self.center
        rho2 = (rel**2).sum(axis=-1) / self.r_norm**2
        return self.center + rel * self._multiplier(rho2)[..., None]

    def undistort(self, xy, iters: int = 12) -> np.ndarray:
        """Invert the radial model by fixed-point/Newton iteration on radius."""
        xy = np.asarray(xy, np.float64)
        if self.is_identity:
            return xy.copy()
        rel = xy - self.center
        rd = np.sqrt((rel**2).sum(axis=-1)) / self.r_norm
        ru = rd.copy()
        for _ in range(iters):
            m = self._multiplier(ru**2)
            f = ru * m - rd
            df = 1.0 + 3.0 * self.k1 * ru**2 + 5.0 * self.k2 * ru**4
            ru = ru - f / np.where(np.abs(df) < 1e-12, 1e-12, df)
        scale = np.where(rd > 1e-12, ru / np.where(rd == 0, 1.0, rd), 1.0)
        return self.center + rel * scale[..., None]

    def validate_injective(self, image_size: Tuple[int, int]) -> None:
        W, H = image_size
        corners = np.array([[0, 0], [W - 1, 0], [0, H - 1], [W - 1, H - 1]], float)
        rho2 = ((corners - self.center) ** 2).sum(axis=1).max() / self.r_norm**2
        rho = np.sqrt(np.linspace(0, rho2, 64))
        deriv = 1.0 + 3.0 * self.k1 * rho**2 + 5.0 * self.k2 * rho**4
        if (deriv <= 0).any() or (self._multiplier(rho**2) <= 0).any():
            raise LensFitError("distortion is not injective over the image extent")

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "k1": self.k1,
            "k2": self.k2,
            "r_norm": self.r_norm,
        }

    @staticmethod
    def from_dict(d: dict) -> "LensModel":
        return LensModel(
            center=tuple(d["center"]), k1=d["k1"], k2=d["k2"], r_norm=d["r_norm"]
        )


def fit_lens(
    lat: np.ndarray,
    px: np.ndarray,
    H: Homography,
    image_size: Tuple[int, int],
    weights=None,
) -> LensModel:
    """Least-squares (k1, k2) given a homography and observed positions.

    The center is fixed at the image center (decentering is unidentifiable
    from screen data alone).  Raises :class:`LensFitError` when points are
    not radially spread (e.g. all on one circle).
    """
    lat = np.asarray(lat, np.float64).reshape(-1, 2)
    px = np.asarray(px, np.float64).reshape(-1, 2)
    if lat.shape[0] < 20:
        raise LensFitError(f"need >= 20 pairs to fit a lens model, got {lat.shape[0]}")
    W, Hh = image_size
    center = np.array([(W - 1) / 2.0, (Hh - 1) / 2.0])
    r_norm = 0.5 * float(np.hypot(W, Hh))

    p = H.apply(lat)
    rel = p - center
    rho2 = (rel**2).sum(axis=1) / r_norm**2
    # obs - p = rel * (k1 rho^2 + k2 rho^4), two equations per point
    Amat = np.zeros((2 * len(lat), 2))
    Amat[0::2, 0] = rel[:, 0] * rho2
    Amat[0::2, 1] = rel[:, 0] * rho2**2
    Amat[1::2, 0] = rel[:, 1] * rho2
    Amat[1::2, 1] = rel[:, 1] * rho2**2
    b = (px - p).ravel()
    if weights is not None:
        sw = np.sqrt(np.repeat(np.asarray(weights, np.float64), 2))
        Amat = Amat * sw[:, None]
        b = b * sw
    sv = np.linalg.svd(Amat, compute_uv=False)
    if sv[0] < 1e-12 or sv[0] / max(sv[1], 1e-300) > 1e8:
        raise LensFitError("radially degenerate point distribution")
    k, *_ = np.linalg.lstsq(Amat, b, rcond=None)
    lens = LensModel(center=tuple(center), k1=float(k[0]), k2=float(k[1]), r_norm=r_norm)
    lens.validate_injective(image_size)
    return lens


def fit_global_transform(
    lat: np.ndarray,
    px: np.ndarray,
    weights,
    image_size: Tuple[int, int],
    params: RansacParams = RansacParams(),
    with_lens: bool = True,
    rounds: int = 2,
) -> Tuple[Homography, LensModel, np.ndarray]:
    """Alternate global homography RANSAC and radial lens fitting."""
    H, inl = ransac_homography(lat, px, weights, params)
    lens = LensModel.identity()
    if not with_lens:
        return H, lens, inl
    for _ in range(rounds):
        try:
            lens = fit_lens(lat[inl], px[inl], H, image_size,
                            None if weights is None else np.asarray(weights)[inl])
        except LensFitError:
            break
        und = lens.undistort(px)
        H, inl = ransac_homography(lat, und, weights, params)
    return H, lens, inl


# ---------------------------------------------------------------------------
# Mesh transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeshParams:
    grid_nx: int = 100
    grid_ny: int = 100
    weight_sigma: Optional[float] = None  # lattice units; default node spacing
    min_node_pairs: int = 4
    ransac: RansacParams = field(default_factory=RansacParams)


@dataclass
class MeshTransform:
    """Grid of local lattice->scan homographies with bilinear map blending.

    ``forward`` evaluates the four surrounding node maps at the query point
    and blends the results bilinearly, then applies the shared lens model;
    this is continuous everywhere and reproduces each node map exactly at
    its anchor.
    """

    node_u: np.ndarray  # (nx,)
    node_v: np.ndarray  # (ny,)
    H: np.ndarray  # (ny, nx, 3, 3)
    solved: np.ndarray  # (ny, nx) False where inherited from a neighbor
    lens: LensModel

    def __post_init__(self):
        self.node_u = np.asarray(self.node_u, np.float64)
        self.node_v = np.asarray(self.node_v, np.float64)
        self.H = np.asarray(self.H, np.float64)
        self.solved = np.asarray(self.solved, bool)
        if self.nx < 2 or self.ny < 2:
            raise MeshBuildError("mesh needs at least a 2x2 node grid")
        self._anchor_tree = None
        self._H_inv = None

    @property
    def nx(self) -> int:
        return self.node_u.size

    @property
    def ny(self) -> int:
        return self.node_v.size

    @property
    def spacing(self) -> Tuple[float, float]:
        du = (self.node_u[-1] - self.node_u[0]) / max(self.nx - 1, 1)
        dv = (self.node_v[-1] - self.node_v[0]) / max(self.ny - 1, 1)
        return float(du), float(dv)

    def domain(self) -> Tuple[float, float, float, float]:
        return (
            float(self.node_u[0]),
            float(self.node_u[-1]),
            float(self.node_v[0]),
            float(self.node_v[-1]),
        )

    def contains(self, uv, slack_cells: float = 1.0) -> np.ndarray:
        """True where uv is within the mesh domain plus ``slack_cells`` nodes."""
        uv = np.atleast_2d(np.asarray(uv, np.float64))
        u0, u1, v0, v1 = self.domain()
        du, dv = self.spacing
        return (
            (uv[:, 0] >= u0 - slack_cells * du)
            & (uv[:, 0] <= u1 + slack_cells * du)
            & (uv[:, 1] >= v0 - slack_cells * dv)
            & (uv[:, 1] <= v1 + slack_cells * dv)
        )

    def _blend(self, uv: np.ndarray) -> np.ndarray:
        """Bilinearly blended node maps applied to uv; no lens."""
        u, v = uv[:, 0], uv[:, 1]
        du, dv = self.spacing
        fu = np.clip((u - self.node_u[0]) / du, 0.0, self.nx - 1 - 1e-9)
        fv = np.clip((v - self.node_v[0]) / dv, 0.0, self.ny - 1 - 1e-9)
        iu = np.minimum(fu.astype(np.int64), self.nx - 2) if self.nx > 1 else np.zeros(len(u), np.int64)
        iv = np.minimum(fv.astype(np.int64), self.ny - 2) if self.ny > 1 else np.zeros(len(v), np.int64)
        t = fu - iu
        s = fv - iv
        out = np.zeros_like(uv)
        hom = np.column_stack([uv, np.ones(len(uv))])
        for dj, di, wt in (
            (0, 0, (1 - t) * (1 - s)),
            (0, 1, t * (1 - s)),
            (1, 0, (1 - t) * s),
            (1, 1, t * s),
        ):
            Hn = self.H[iv + dj, iu + di]  # (n, 3, 3)
            p = np.einsum("nij,nj->ni", Hn, hom)
            out += wt[:, None] * (p[:, :2] / p[:, 2:3])
        return out

    def forward(self, uv, strict: bool = False) -> np.ndarray:
        """Lattice coordinates -> scan pixels."""
        uv = np.asarray(uv, np.float64)
        single = uv.ndim == 1
        pts = np.atleast_2d(uv).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise MeshDomainError("non-finite lattice coordinates")
        if strict and not self.contains(pts).all():
            raise MeshDomainError("point outside mesh domain (plus one-cell slack)")
        out = self.lens.distort(self._blend(pts))
        out = out.reshape(uv.shape)
        return out[0] if single and out.ndim == 2 and out.shape[0] == 1 else out

    def _ensure_inverse_aids(self):
        if self._anchor_tree is None:
            uu, vv = np.meshgrid(self.node_u, self.node_v)
            anchors = np.column_stack([uu.ravel(), vv.ravel()])
            scan = self._blend(anchors)
            self._anchor_tree = cKDTree(scan)
            self._anchor_uv = anchors
            self._H_inv = np.linalg.inv(self.H.reshape(-1, 3, 3))

    def inverse(
        self,
        xy,
        tol_px: float = 1e-4,
        max_iter: int = 50,
    ) -> np.ndarray:
        """Scan pixels -> lattice coordinates by damped Newton on ``forward``.

        Initial guesses come from the nearest node's inverse homography.
        Raises :class:`MeshInverseError` if any point fails to reach
        ``tol_px`` within ``max_iter`` iterations.
        """
        xy = np.asarray(xy, np.float64)
        single = xy.ndim == 1
        target = np.atleast_2d(xy).reshape(-1, 2)
        self._ensure_inverse_aids()
        und = self.lens.undistort(target)
        _, nearest = self._anchor_tree.query(und, k=1)
        Hi = self._H_inv[nearest]
        hom = np.column_stack([und, np.ones(len(und))])
        p = np.einsum("nij,nj->ni", Hi, hom)
        uv = p[:, :2] / p[:, 2:3]

        h = 1e-3
        active = np.ones(len(uv), bool)
        f = self._blend(uv) - und
        for _ in range(max_iter):
            err = np.linalg.norm(f, axis=1)
            active = err > tol_px
            if not active.any():
                break
            ua = uv[active]
            fa = f[active]
            # numerical Jacobian, central differences
            Ju = (self._blend(ua + [h, 0]) - self._blend(ua - [h, 0])) / (2 * h)
            Jv = (self._blend(ua + [0, h]) - self._blend(ua - [0, h])) / (2 * h)
            det = Ju[:, 0] * Jv[:, 1] - Ju[:, 1] * Jv[:, 0]
            det = np.where(np.abs(det) < 1e-12, 1e-12, det)
            su = (fa[:, 0] * Jv[:, 1] - fa[:, 1] * Jv[:, 0]) / det
            sv = (-fa[:, 0] * Ju[:, 1] + fa[:, 1] * Ju[:, 0]) / det
            step = np.column_stack([su, sv])
            # damped update: halve the step while the residual grows
            cur_err = np.linalg.norm(fa, axis=1)
            scale = np.ones(len(ua))
            new_uv = ua - step
            for _ in range(5):
                new_f = self._blend(new_uv) - und[active]
                worse = np.linalg.norm(new_f, axis=1) > cur_err
                if not worse.any():
                    break
                scale[worse] *= 0.5
                new_uv = ua - step * scale[:, None]
            uv[active] = new_uv
            f[active] = self._blend(new_uv) - und[active]
        else:
            err = np.linalg.norm(f, axis=1)
            if (err > tol_px).any():
                raise MeshInverseError(
                    f"{int((err > tol_px).sum())} points did not converge"
                )
        return uv[0] if single else uv.reshape(xy.shape)

    def node_anchor_scan(self) -> np.ndarray:
        """(ny, nx, 2) scan positions of node anchors (lens applied)."""
        uu, vv = np.meshgrid(self.node_u, self.node_v)
        pts = np.column_stack([uu.ravel(), vv.ravel()])
        return self.forward(pts).reshape(self.ny, self.nx, 2)


def build_mesh(
    pg: PatchGrid,
    lens: Optional[LensModel] = None,
    params: MeshParams = MeshParams(),
    seed: int = 0,
) -> MeshTransform:
    """Fit the adaptive homography mesh to a detected patch grid."""
    lat, px, w = pg.pairs(measured_only=True)
    return build_mesh_points(lat, px, w, lens, params, seed)


def build_mesh_points(
    lat: np.ndarray,
    px: np.ndarray,
    w: Optional[np.ndarray] = None,
    lens: Optional[LensModel] = None,
    params: MeshParams = MeshParams(),
    seed: int = 0,
) -> MeshTransform:
    """Per-node weighted RANSAC homographies over a lattice-space grid.

    Each node re-runs the RANSAC solve on the patches within 3 sigma of its
    anchor, Gaussian-weighted by distance; nodes with insufficient support
    inherit the nearest solved node's map and are flagged unsolved.
    """
    lat = np.asarray(lat, np.float64).reshape(-1, 2)
    px = np.asarray(px, np.float64).reshape(-1, 2)
    if w is None:
        w = np.ones(len(lat))
    w = np.asarray(w, np.float64)
    if lens is None:
        lens = LensModel.identity()
    if len(lat) < 4:
        raise MeshBuildError("not enough patches to build a mesh")

    und = lens.undistort(px)

    u0, u1 = lat[:, 0].min(), lat[:, 0].max()
    v0, v1 = lat[:, 1].min(), lat[:, 1].max()
    nx, ny = params.grid_nx, params.grid_ny
    node_u = np.linspace(u0, u1, nx)
    node_v = np.linspace(v0, v1, ny)
    du = (u1 - u0) / max(nx - 1, 1)
    dv = (v1 - v0) / max(ny - 1, 1)
    sigma = params.weight_sigma or max(du, dv, 1e-6)

    tree = cKDTree(lat)
    uu, vv = np.meshgrid(node_u, node_v)
    nodes = np.column_stack([uu.ravel(), vv.ravel()])
    neighborhoods = tree.query_ball_point(nodes, 3.0 * sigma)

    H = np.zeros((ny * nx, 3, 3))
    solved = np.zeros(ny * nx, bool)
    for k, idx in enumerate(neighborhoods):
        if len(idx) < max(4, params.min_node_pairs):
            continue
        idx = np.asarray(idx)
        d2 = ((lat[idx] - nodes[k]) ** 2).sum(axis=1)
        wk = w[idx] * np.exp(-d2 / (2 * sigma**2))
        rp = replace(params.ransac, seed=(seed << 20) ^ k)
        try:
            Hk, _ = ransac_homography(lat[idx], und[idx], wk, rp)
        except RansacError:
            continue
        H[k] = Hk.H
        solved[k] = True

    n_solved = int(solved.sum())
    if n_solved < 4:
        raise MeshBuildError(f"only {n_solved} solvable mesh nodes")

    if n_solved < nx * ny:
        # unsolved nodes copy the nearest solved node's map
        solved_idx = np.flatnonzero(solved)
        stree = cKDTree(nodes[solved_idx])
        _, nn = stree.query(nodes[~solved], k=1)
        H[~solved] = H[solved_idx[nn]]

    return MeshTransform(
        node_u=node_u,
        node_v=node_v,
        H=H.reshape(ny, nx, 3, 3),
        solved=solved.reshape(ny, nx),
        lens=lens,
    )
