"""Synthetic color-screen scan generator with exact ground truth.

Renders the physical model the analysis pipeline inverts: a periodic screen
of colored patches carried by an analytic lattice-to-scan map (global
homography composed with smooth sinusoidal deformation fields, optional
capture homography and radial lens distortion), supersampled, mixed through
a known primaries matrix, masked and noised.  Every rendering returns the
exact patch centers, per-site intensities and the truth map itself, which
the test suites use as their independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .analysis import ACCEPTED, FAILED, PatchGrid
from .core import COLOR_CHANNEL, LinearImage, ScreenSpec, get_preset
from .mesh import LensModel
from .mosaic import MosaicImage


class DeformationError(ValueError):
    """Deformation is not injective over the requested canvas."""


# ---------------------------------------------------------------------------
# Analytic truth transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WarpField:
    """One sinusoidal displacement field: amp * sin(2 pi uv.freq + phase).

    ``freq`` is in cycles per lattice unit; displacement is in scan pixels
    and attached to the film (a function of lattice position).
    """

    amp: Tuple[float, float]
    freq: Tuple[float, float]
    phase: float = 0.0


def _hom_apply(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    hom = pts @ M[:2, :2].T + M[:2, 2]
    w = pts @ M[2, :2] + M[2, 2]
    return hom / w[..., None]


def _hom_jacobian(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a = pts @ M[0, :2] + M[0, 2]
    b = pts @ M[1, :2] + M[1, 2]
    w = pts @ M[2, :2] + M[2, 2]
    J = np.empty(pts.shape[:-1] + (2, 2))
    w2 = w * w
    J[..., 0, 0] = (M[0, 0] * w - a * M[2, 0]) / w2
    J[..., 0, 1] = (M[0, 1] * w - a * M[2, 1]) / w2
    J[..., 1, 0] = (M[1, 0] * w - b * M[2, 0]) / w2
    J[..., 1, 1] = (M[1, 1] * w - b * M[2, 1]) / w2
    return J


@dataclass(frozen=True)
class TruthMap:
    """Analytic lattice -> canvas map: lens(capture(base(uv) + warp(uv)))."""

    base: np.ndarray  # 3x3, lattice -> plate px
    warps: Tuple[WarpField, ...] = ()
    capture: np.ndarray = field(default_factory=lambda: np.eye(3))
    lens: Optional[LensModel] = None

    def displacement(self, uv: np.ndarray) -> np.ndarray:
        D = np.zeros_like(uv)
        for wfield in self.warps:
            phase = 2.0 * np.pi * (uv @ np.asarray(wfield.freq)) + wfield.phase
            D = D + np.asarray(wfield.amp) * np.sin(phase)[..., None]
        return D

    def __call__(self, uv) -> np.ndarray:
        uv = np.asarray(uv, np.float64)
        p = _hom_apply(self.base, uv) + self.displacement(uv)
        q = _hom_apply(self.capture, p)
        if self.lens is not None:
            q = self.lens.distort(q)
        return q

    def jacobian(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, np.float64)
        J = _hom_jacobian(self.base, uv)
        for wfield in self.warps:
            freq = np.asarray(wfield.freq)
            phase = 2.0 * np.pi * (uv @ freq) + wfield.phase
            cosf = 2.0 * np.pi * np.cos(phase)
            amp = np.asarray(wfield.amp)
            J = J + cosf[..., None, None] * np.einsum(
                "a,b->ab", amp, freq
            )
        p = _hom_apply(self.base, uv) + self.displacement(uv)
        Jc = _hom_jacobian(self.capture, p)
        J = Jc @ J
        if self.lens is not None:
            q = _hom_apply(self.capture, p)
            rel = q - self.lens.center
            rho2 = (rel**2).sum(axis=-1) / self.lens.r_norm**2
            m = 1.0 + self.lens.k1 * rho2 + self.lens.k2 * rho2**2
            dm = (2.0 / self.lens.r_norm**2) * (self.lens.k1 + 2.0 * self.lens.k2 * rho2)
            Jl = m[..., None, None] * np.eye(2) + dm[..., None, None] * (
                rel[..., :, None] * rel[..., None, :]
            )
            J = Jl @ J
        return J

    def invert(
        self,
        xy,
        init: Optional[np.ndarray] = None,
        iters: int = 20,
        tol: float = 1e-9,
    ) -> np.ndarray:
        """Newton inversion; ``init`` defaults to a global affine estimate."""
        xy = np.asarray(xy, np.float64)
        pts = np.atleast_2d(xy.reshape(-1, 2))
        if init is None:
            uv0 = np.zeros(2)
            J0 = self.jacobian(uv0[None])[0]
            f0 = self(uv0[None])[0]
            uv = (pts - f0) @ np.linalg.inv(J0).T
        else:
            uv = init.reshape(-1, 2).copy()
        for _ in range(iters):
            f = self(uv) - pts
            if np.abs(f).max() < tol:
                break
            J = self.jacobian(uv)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            det = np.where(np.abs(det) < 1e-15, 1e-15, det)
            du = (f[:, 0] * J[:, 1, 1] - f[:, 1] * J[:, 0, 1]) / det
            dv = (-f[:, 0] * J[:, 1, 0] + f[:, 1] * J[:, 0, 0]) / det
            uv = uv - np.column_stack([du, dv])
        return uv.reshape(xy.shape)

    def check_injective(self, window: Tuple[int, int, int, int]) -> None:
        i0, i1, j0, j1 = window
        uu = np.linspace(i0, i1, 24)
        vv = np.linspace(j0, j1, 24)
        gu, gv = np.meshgrid(uu, vv)
        J = self.jacobian(np.column_stack([gu.ravel(), gv.ravel()]))
        det = np.linalg.det(J)
        if det.min() <= 0 or det.max() / max(det.min(), 1e-300) > 1e3:
            raise DeformationError("deformation is not injective over the canvas")


def base_homography(
    pitch_px: float,
    aspect: float,
    rotation_deg: float = 0.0,
    translation: Tuple[float, float] = (0.0, 0.0),
    perspective: Tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Lattice -> scan base map with |image of e1| = pitch_px."""
    th = np.radians(rotation_deg)
    c, s = np.cos(th), np.sin(th)
    R = np.array([[c, -s], [s, c]])
    S = np.diag([pitch_px, pitch_px * aspect])
    H = np.eye(3)
    H[:2, :2] = R @ S
    H[:2, 2] = translation
    H[2, :2] = perspective
    return H


# ---------------------------------------------------------------------------
# Intensity patterns
# ---------------------------------------------------------------------------


def _splitmix01(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer -> uniform [0, 1); deterministic and windowless."""
    z = x.astype(np.uint64)
    z = (z + np.uint64(0x9E3779B97F4A7C15)) * np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z.astype(np.float64) / 2.0**64


@dataclass(frozen=True)
class PatternSpec:
    """Per-site intensity source.

    ``uniform``: constant ``levels`` per channel.  ``smooth``: fixed smooth
    trigonometric ramps with feature scale ``scale_cells``.  ``texture``:
    band-limited hashed noise (window independent), good for matching tests.
    """

    kind: str = "smooth"
    levels: Tuple[float, float, float] = (0.8, 0.8, 0.8)
    scale_cells: float = 24.0
    smooth_sigma: float = 2.0
    seed: int = 7
    lo: float = 0.08
    hi: float = 0.92

    def field(self, window: Tuple[int, int, int, int]) -> "PatternField":
        return PatternField(self, window)


class PatternField:
    """Evaluates the pattern at absolute lattice positions."""

    def __init__(self, spec: PatternSpec, window: Tuple[int, int, int, int]):
        self.spec = spec
        self.window = window
        if spec.kind == "texture":
            i0, i1, j0, j1 = window
            pad = int(np.ceil(4 * spec.smooth_sigma))
            self._pad = pad
            self._i0 = i0 - pad
            self._j0 = j0 - pad
            ii = np.arange(self._i0, i1 + pad + 1, dtype=np.int64)
            jj = np.arange(self._j0, j1 + pad + 1, dtype=np.int64)
            gi, gj = np.meshgrid(ii, jj)
            grids = []
            for chan in range(3):
                h = (
                    gi.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
                    ^ gj.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
                    ^ np.uint64((spec.seed << 8) + chan)
                )
                white = _splitmix01(h) - 0.5
                sm = ndimage.gaussian_filter(white, spec.smooth_sigma, mode="nearest")
                # ~unit variance after smoothing, then squash into [lo, hi]
                sm = sm * (2.0 * spec.smooth_sigma * np.sqrt(np.pi)) * 3.4641
                mid = 0.5 * (spec.lo + spec.hi)
                amp = 0.5 * (spec.hi - spec.lo)
                grids.append(mid + amp * np.tanh(sm))
            self._grids = grids

    def sample(self, channel: int, uv: np.ndarray) -> np.ndarray:
        """Intensity in [0, 1] for the given channel at lattice positions."""
        spec = self.spec
        uv = np.asarray(uv, np.float64)
        u, v = uv[..., 0], uv[..., 1]
        if spec.kind == "uniform":
            return np.full(u.shape, spec.levels[channel])
        if spec.kind == "smooth":
            sc = spec.scale_cells
            ph = (0.0, 2.1, 4.2)[channel]
            val = (
                0.5
                + 0.27 * np.sin(2 * np.pi * (u * 0.9 + v * 0.45) / sc + ph)
                + 0.16 * np.cos(2 * np.pi * (u * 0.35 - v * 0.8) / (1.7 * sc) + 1.3 * ph)
            )
            return spec.lo + (spec.hi - spec.lo) * np.clip(val, 0.0, 1.0)
        if spec.kind == "texture":
            g = self._grids[channel]
            ci = u - self._i0
            cj = v - self._j0
            return ndimage.map_coordinates(g, [cj.ravel(), ci.ravel()], order=1,
                                           mode="nearest").reshape(u.shape)
        raise ValueError(f"unknown pattern kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthScene:
    """Complete description of a synthetic scan."""

    spec: ScreenSpec = field(default_factory=lambda: get_preset("dufay"))
    size: Tuple[int, int] = (2000, 3000)  # (W, H) scan px
    pitch_px: float = 10.4  # image of |e1|; ~5 px per Dufay patch
    rotation_deg: float = 0.0
    perspective: Tuple[float, float] = (0.0, 0.0)
    warps: Tuple[WarpField, ...] = ()
    lens: Optional[LensModel] = None
    pattern: PatternSpec = field(default_factory=PatternSpec)
    mixing: np.ndarray = field(default_factory=lambda: np.eye(3))
    black: Tuple[float, float, float] = (0.02, 0.02, 0.02)
    noise_sigma: float = 0.0
    shot_noise: bool = False
    mask_rects: Tuple[Tuple[float, float, float, float], ...] = ()  # x0,y0,x1,y1
    seed: int = 1234
    supersample: int = 4

    def truth_map(
        self,
        capture: Optional[np.ndarray] = None,
        center_uv: Tuple[float, float] = (0.0, 0.0),
    ) -> TruthMap:
        """Truth transform placing lattice ``center_uv`` at the canvas center."""
        W, H = self.size
        base = base_homography(
            self.pitch_px, self.spec.aspect, self.rotation_deg,
            translation=(0.0, 0.0), perspective=self.perspective,
        )
        tm = TruthMap(base=base, warps=self.warps)
        anchor = tm(np.asarray(center_uv, np.float64)[None])[0]
        cap = np.eye(3) if capture is None else np.asarray(capture, np.float64)
        shift = np.eye(3)
        shift[:2, 2] = np.array([(W - 1) / 2.0, (H - 1) / 2.0]) - _hom_apply(cap, anchor[None])[0]
        lens = self.lens
        if lens is not None:
            lens = replace(
                lens,
                center=((W - 1) / 2.0, (H - 1) / 2.0),
                r_norm=0.5 * float(np.hypot(W, H)),
            )
        return TruthMap(base=base, warps=self.warps, capture=shift @ cap, lens=lens)


@dataclass
class SynthResult:
    image: LinearImage
    grid: PatchGrid
    mosaic: MosaicImage
    map: TruthMap
    window: Tuple[int, int, int, int]
    lattice_offset: Tuple[int, int] = (0, 0)


def _lattice_window(tmap: TruthMap, size: Tuple[int, int], margin: int = 2):
    W, H = size
    corners = np.array([[0, 0], [W - 1, 0], [0, H - 1], [W - 1, H - 1]], float)
    uv = tmap.invert(corners, iters=40)
    i0 = int(np.floor(uv[:, 0].min())) - margin
    i1 = int(np.ceil(uv[:, 0].max())) + margin
    j0 = int(np.floor(uv[:, 1].min())) - margin
    j1 = int(np.ceil(uv[:, 1].max())) + margin
    return i0, i1, j0, j1


def _in_mask(scene: SynthScene, pts: np.ndarray) -> np.ndarray:
    hit = np.zeros(pts.shape[:-1], bool)
    for x0, y0, x1, y1 in scene.mask_rects:
        hit |= (
            (pts[..., 0] >= x0) & (pts[..., 0] <= x1)
            & (pts[..., 1] >= y0) & (pts[..., 1] <= y1)
        )
    return hit


def _truth_structures(
    scene: SynthScene,
    tmap: TruthMap,
    pattern: PatternField,
    window,
    lattice_offset=(0, 0),
) -> Tuple[PatchGrid, MosaicImage]:
    spec = scene.spec
    W, H = scene.size
    i0, i1, j0, j1 = window
    ni, nj = i1 - i0 + 1, j1 - j0 + 1
    S = len(spec.sites)
    jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1), indexing="ij")
    centers = np.empty((nj, ni, S, 2))
    values = np.zeros((nj, ni, S), np.float32)
    valid = np.zeros((nj, ni, S), bool)
    offs = spec.site_offsets()
    ext_px = np.zeros(S)
    A_lin = tmap.jacobian(np.array([[(i0 + i1) / 2.0, (j0 + j1) / 2.0]]))[0]
    for s in range(S):
        lat = np.stack([ii + offs[s, 0], jj + offs[s, 1]], axis=-1)
        pos = tmap(lat.reshape(-1, 2)).reshape(nj, ni, 2)
        centers[:, :, s] = pos
        ex, ey = spec.sites[s].extent
        ext_px[s] = max(
            np.linalg.norm(A_lin[:, 0]) * ex, np.linalg.norm(A_lin[:, 1]) * ey
        )
        m = ext_px[s] + 1.0
        ok = (
            (pos[:, :, 0] >= m) & (pos[:, :, 0] <= W - 1 - m)
            & (pos[:, :, 1] >= m) & (pos[:, :, 1] <= H - 1 - m)
        )
        ok &= ~_in_mask(scene, pos)
        valid[:, :, s] = ok
        chan = COLOR_CHANNEL[spec.sites[s].color]
        values[:, :, s] = pattern.sample(chan, lat).astype(np.float32)
    values[~valid] = 0.0
    bad = ~valid
    centers[bad] = np.nan

    # Affine for extent metadata, from the map's own linearization.
    cuv = np.array([(i0 + i1) / 2.0, (j0 + j1) / 2.0])
    c0 = tmap(cuv[None])[0]
    affine = np.column_stack([A_lin, c0 - A_lin @ cuv])

    cell_ok = valid.any(axis=2)
    status = np.where(cell_ok, ACCEPTED, FAILED).astype(np.uint8)
    jg, ig = np.meshgrid(np.arange(nj), np.arange(ni), indexing="ij")
    nominal = np.stack(
        [ig + i0 + 0.5, jg + j0 + 0.5, np.ones_like(ig, float)], axis=-1
    ) @ affine.T
    hm = 0.5 * max(np.linalg.norm(affine[:, 0]), np.linalg.norm(affine[:, 1]))
    in_image = (
        (nominal[:, :, 0] >= hm) & (nominal[:, :, 0] <= W - 1 - hm)
        & (nominal[:, :, 1] >= hm) & (nominal[:, :, 1] <= H - 1 - hm)
    )

    oi, oj = lattice_offset
    grid = PatchGrid(
        i0=i0 - oi,
        j0=j0 - oj,
        image_size=(W, H),
        site_offsets=offs,
        site_colors=spec.site_colors(),
        measured=np.ones(S, bool),
        centers=centers,
        valid=valid,
        weight=valid.astype(np.float32),
        cell_status=status,
        in_image=in_image,
        global_affine=affine,
    )
    mosaic = MosaicImage(
        i0=i0 - oi,
        j0=j0 - oj,
        site_offsets=offs,
        site_colors=spec.site_colors(),
        values=values,
        valid=valid.copy(),
    )
    return grid, mosaic


def _make_forward32(tmap: TruthMap):
    """Allocation-light float32 forward evaluator (x, y arrays -> x', y')."""
    B = tmap.base.astype(np.float32)
    P = tmap.capture.astype(np.float32)
    warps = [
        (
            np.float32(w.amp[0]),
            np.float32(w.amp[1]),
            np.float32(2 * np.pi * w.freq[0]),
            np.float32(2 * np.pi * w.freq[1]),
            np.float32(w.phase),
        )
        for w in tmap.warps
    ]
    lens = tmap.lens

    def fwd(u, v):
        w = B[2, 0] * u + B[2, 1] * v + B[2, 2]
        px = (B[0, 0] * u + B[0, 1] * v + B[0, 2]) / w
        py = (B[1, 0] * u + B[1, 1] * v + B[1, 2]) / w
        for ax, ay, fu, fv, ph in warps:
            sinp = np.sin(fu * u + fv * v + ph)
            px += ax * sinp
            py += ay * sinp
        w2 = P[2, 0] * px + P[2, 1] * py + P[2, 2]
        qx = (P[0, 0] * px + P[0, 1] * py + P[0, 2]) / w2
        qy = (P[1, 0] * px + P[1, 1] * py + P[1, 2]) / w2
        if lens is not None:
            cx0, cy0 = np.float32(lens.center[0]), np.float32(lens.center[1])
            rx = qx - cx0
            ry = qy - cy0
            rho2 = (rx * rx + ry * ry) / np.float32(lens.r_norm**2)
            mlt = 1.0 + np.float32(lens.k1) * rho2 + np.float32(lens.k2) * rho2 * rho2
            qx = cx0 + rx * mlt
            qy = cy0 + ry * mlt
        return qx, qy

    return fwd


def _render_image(
    scene: SynthScene, tmap: TruthMap, pattern: PatternField, gains=(1.0, 1.0, 1.0)
) -> LinearImage:
    W, H = scene.size
    ss = max(2, int(scene.supersample))
    C = np.asarray(scene.mixing, np.float32)
    black = np.asarray(scene.black, np.float32)
    gains = np.asarray(gains, np.float32)
    spec = scene.spec
    offs = spec.site_offsets().astype(np.float32)
    exts = np.array([s.extent for s in spec.sites], np.float32)
    chans = [COLOR_CHANNEL[s.color] for s in spec.sites]
    fwd = _make_forward32(tmap)
    pure_hom = not tmap.warps and tmap.lens is None
    if pure_hom:
        Minv = np.linalg.inv(tmap.capture @ tmap.base).astype(np.float32)

    if not pure_hom:
        # Coarse inverse and inverse-Jacobian planes on a stride-4 pixel grid;
        # full resolution then needs only one corrected forward evaluation.
        stride = 4
        cx = np.arange(0, W + stride, stride, dtype=np.float64)
        cy = np.arange(0, H + stride, stride, dtype=np.float64)
        gx, gy = np.meshgrid(cx, cy)
        coarse = tmap.invert(np.column_stack([gx.ravel(), gy.ravel()]), iters=40)
        Jc = tmap.jacobian(coarse)
        det = Jc[:, 0, 0] * Jc[:, 1, 1] - Jc[:, 0, 1] * Jc[:, 1, 0]
        Jinv = (
            np.stack([Jc[:, 1, 1], -Jc[:, 0, 1], -Jc[:, 1, 0], Jc[:, 0, 0]], axis=1)
            / det[:, None]
        )
        shape = gy.shape
        cu = coarse[:, 0].reshape(shape).astype(np.float32)
        cv = coarse[:, 1].reshape(shape).astype(np.float32)
        ji = [Jinv[:, k].reshape(shape).astype(np.float32) for k in range(4)]

    sub = ((np.arange(ss) + 0.5) / ss - 0.5).astype(np.float32)
    xs = (np.arange(W, dtype=np.float32)[:, None] + sub[None, :]).ravel()

    out = np.empty((H, W, 3), np.float32)
    rows_per_block = max(1, int(4_000_000 // (W * ss * ss)))
    for y0 in range(0, H, rows_per_block):
        y1 = min(y0 + rows_per_block, H)
        ys = (np.arange(y0, y1, dtype=np.float32)[:, None] + sub[None, :]).ravel()
        YS, XS = np.meshgrid(ys, xs, indexing="ij")
        X = XS.ravel()
        Y = YS.ravel()
        if pure_hom:
            wq = Minv[2, 0] * X + Minv[2, 1] * Y + Minv[2, 2]
            u = (Minv[0, 0] * X + Minv[0, 1] * Y + Minv[0, 2]) / wq
            v = (Minv[1, 0] * X + Minv[1, 1] * Y + Minv[1, 2]) / wq
        else:
            cyx = [Y / stride, X / stride]
            u = ndimage.map_coordinates(cu, cyx, order=1, mode="nearest")
            v = ndimage.map_coordinates(cv, cyx, order=1, mode="nearest")
            j00, j01, j10, j11 = (
                ndimage.map_coordinates(j, cyx, order=1, mode="nearest") for j in ji
            )
            for _ in range(2):
                fx, fy = fwd(u, v)
                fx -= X
                fy -= Y
                u -= j00 * fx + j01 * fy
                v -= j10 * fx + j11 * fy

        rgb = np.broadcast_to(black, (u.size, 3)).copy()
        unassigned = np.ones(u.size, bool)
        for s in range(len(spec.sites)):
            nu = np.round(u - offs[s, 0])
            nv = np.round(v - offs[s, 1])
            inside = (
                unassigned
                & (np.abs(u - offs[s, 0] - nu) <= exts[s, 0])
                & (np.abs(v - offs[s, 1] - nv) <= exts[s, 1])
            )
            if not inside.any():
                continue
            lat = np.column_stack([nu[inside] + offs[s, 0], nv[inside] + offs[s, 1]])
            x = pattern.sample(chans[s], lat).astype(np.float32)
            rgb[inside] += (gains[chans[s]] * x)[:, None] * C[:, chans[s]]
            unassigned &= ~inside

        block = rgb.reshape(y1 - y0, ss, W, ss, 3).mean(axis=(1, 3))
        out[y0:y1] = block

    # Masked regions read as bare black point (flaked emulsion).
    if scene.mask_rects:
        yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        hit = _in_mask(scene, np.stack([xx, yy], axis=-1))
        out[hit] = black

    if scene.noise_sigma > 0:
        for r in range(H):
            rng = np.random.Generator(np.random.Philox(key=[scene.seed, r]))
            std = scene.noise_sigma
            noise = rng.normal(0.0, 1.0, (W, 3))
            if scene.shot_noise:
                noise *= std * (1.0 + np.sqrt(np.clip(out[r], 0, None)))
            else:
                noise *= std
            out[r] += noise

    return LinearImage(np.clip(out, 0.0, None))


def synth_scan(scene: SynthScene) -> SynthResult:
    """Render one tile plus its exact truth grid and mosaic."""
    if scene.pitch_px / 2.0 < 3.0:
        raise ValueError("patch pitch below 3 px cannot be resolved")
    tmap = scene.truth_map()
    window = _lattice_window(tmap, scene.size)
    tmap.check_injective(window)
    pattern = scene.pattern.field(window)
    grid, mosaic = _truth_structures(scene, tmap, pattern, window)
    image = _render_image(scene, tmap, pattern)
    return SynthResult(image, grid, mosaic, tmap, window)


@dataclass(frozen=True)
class CapturePerturbation:
    """Per-tile capture geometry and gain differences."""

    rotation_deg: float = 0.0
    translation_px: Tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    gains: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def matrix(self) -> np.ndarray:
        th = np.radians(self.rotation_deg)
        c, s = np.cos(th), np.sin(th)
        M = np.eye(3)
        M[:2, :2] = self.scale * np.array([[c, -s], [s, c]])
        M[:2, 2] = self.translation_px
        return M


def synth_tile_grid(
    scene: SynthScene,
    shape: Tuple[int, int] = (2, 2),
    overlap_fraction: float = 0.3,
    perturbations: Optional[Sequence[CapturePerturbation]] = None,
) -> Tuple[List[SynthResult], np.ndarray]:
    """Render a grid of overlapping tiles of one underlying plate.

    Tiles scan the same deformed screen from per-tile capture geometries;
    the returned offsets are the exact integer lattice translations between
    tile-local lattice frames (tile k content at local cell c sits at global
    cell c + offsets[k]).
    """
    if not 0.05 < overlap_fraction < 0.9:
        raise ValueError("overlap_fraction must be in (0.05, 0.9)")
    cols, rows = shape
    n = cols * rows
    if perturbations is None:
        perturbations = [CapturePerturbation() for _ in range(n)]
    if len(perturbations) != n:
        raise ValueError("need one perturbation per tile")

    W, H = scene.size
    pitch_u = scene.pitch_px
    pitch_v = scene.pitch_px * scene.spec.aspect
    du = int(round((1.0 - overlap_fraction) * W / pitch_u))
    dv = int(round((1.0 - overlap_fraction) * H / pitch_v))

    offsets = []
    results = []
    # Shared pattern over the union of windows, for cross-tile consistency.
    span_u = int(np.ceil(W / pitch_u)) + (cols - 1) * du
    span_v = int(np.ceil(H / pitch_v)) + (rows - 1) * dv
    pad = span_u // 2 + span_v // 2 + 8
    union = (-pad, pad, -pad, pad)
    pattern = scene.pattern.field(union)

    k = 0
    for r in range(rows):
        for c in range(cols):
            off = (c * du, r * dv)
            pert = perturbations[k]
            rot = replace(pert, translation_px=(0.0, 0.0)).matrix()
            tmap = scene.truth_map(capture=rot, center_uv=off)
            if pert.translation_px != (0.0, 0.0):
                jitter = np.eye(3)
                jitter[:2, 2] = pert.translation_px
                tmap = replace(tmap, capture=jitter @ tmap.capture)
            window = _lattice_window(tmap, scene.size)
            tmap.check_injective(window)
            grid, mosaic = _truth_structures(
                scene, tmap, pattern, window, lattice_offset=off
            )
            image = _render_image(scene, tmap, pattern, gains=pert.gains)
            results.append(
                SynthResult(image, grid, mosaic, tmap, window, lattice_offset=off)
            )
            offsets.append(off)
            k += 1
    return results, np.asarray(offsets, np.int64)


def synth_tile_pair(
    scene: SynthScene,
    overlap_fraction: float = 0.3,
    perturbations: Optional[Sequence[CapturePerturbation]] = None,
) -> Tuple[SynthResult, SynthResult, np.ndarray]:
    """Two overlapping captures of the same scene region."""
    results, offsets = synth_tile_grid(
        scene, shape=(2, 1), overlap_fraction=overlap_fraction,
        perturbations=perturbations,
    )
    return results[0], results[1], offsets[1] - offsets[0]


# ---------------------------------------------------------------------------
# Grid comparison
# ---------------------------------------------------------------------------


@dataclass
class GridMetrics:
    aligned: bool
    translation: Tuple[int, int]
    coverage_vs_truth: float
    rms_error_px: float
    max_error_px: float
    index_mismatches: int
    matched: int

    def to_dict(self) -> dict:
        return {
            "aligned": self.aligned,
            "translation": list(self.translation),
            "coverage_vs_truth": self.coverage_vs_truth,
            "rms_error_px": self.rms_error_px,
            "max_error_px": self.max_error_px,
            "index_mismatches": self.index_mismatches,
            "matched": self.matched,
        }


def _overlap_slices(i0a: int, na: int, i0b: int, nb: int, shift: int):
    """Slices of two 1D index ranges so a[i] aligns with b[i + shift]."""
    lo = max(i0a, i0b - shift)
    hi = min(i0a + na, i0b + nb - shift)
    if hi <= lo:
        return None
    return slice(lo - i0a, hi - i0a), slice(lo + shift - i0b, hi + shift - i0b)


def compare_grids(detected: PatchGrid, truth: PatchGrid) -> GridMetrics:
    """Align a detected grid with the oracle by integer lattice translation.

    Alignment failure is reported in the metrics, not raised.  Metrics cover
    the measured sites only (derived sites carry no detection information).
    """
    if detected.site_offsets.shape != truth.site_offsets.shape or not np.allclose(
        detected.site_offsets, truth.site_offsets
    ):
        raise ValueError("grids use different screen definitions")

    sites = np.flatnonzero(detected.measured)
    pitch = min(
        np.linalg.norm(truth.global_affine[:, 0]),
        np.linalg.norm(truth.global_affine[:, 1]),
    )
    s0 = sites[0]
    dv = detected.valid[:, :, s0]
    tv = truth.valid[:, :, s0]
    if not dv.any() or not tv.any():
        return GridMetrics(False, (0, 0), 0.0, np.nan, np.nan, 0, 0)

    # Candidate translations from the detected cell nearest the grid middle.
    jj, ii = np.nonzero(dv)
    mid = np.argmin(
        (ii - ii.mean()) ** 2 + (jj - jj.mean()) ** 2
    )
    c_det = detected.centers[jj[mid], ii[mid], s0]
    tcent = truth.centers[:, :, s0, :][tv]
    tcells = np.column_stack(np.nonzero(tv)[::-1])  # (N, 2) as (i, j)
    d2 = ((tcent - c_det) ** 2).sum(axis=1)
    cand_order = np.argsort(d2)[:4]

    best = None
    for ci in cand_order:
        ti, tj = tcells[ci]
        shift_i = int(ti + truth.i0 - (ii[mid] + detected.i0))
        shift_j = int(tj + truth.j0 - (jj[mid] + detected.j0))
        score = _translation_score(detected, truth, sites, shift_i, shift_j, pitch)
        if score is None:
            continue
        if best is None or score[0] > best[0]:
            best = (score[0], shift_i, shift_j) + score[1:]
    if best is None:
        return GridMetrics(False, (0, 0), 0.0, np.nan, np.nan, 0, 0)

    _, shift_i, shift_j, rms, mx, mism, matched, truth_count = best
    return GridMetrics(
        aligned=True,
        translation=(shift_i, shift_j),
        coverage_vs_truth=matched / max(truth_count, 1),
        rms_error_px=rms,
        max_error_px=mx,
        index_mismatches=mism,
        matched=matched,
    )


def _translation_score(detected, truth, sites, shift_i, shift_j, pitch):
    # overlap of array extents under the shift, in lattice index space
    si = _overlap_slices(detected.i0, detected.ni, truth.i0, truth.ni, shift_i)
    sj = _overlap_slices(detected.j0, detected.nj, truth.j0, truth.nj, shift_j)
    if si is None or sj is None:
        return None
    da, ta = si
    db, tb = sj
    errs = []
    matched = 0
    mism = 0
    truth_count = 0
    for s in sites:
        dvs = detected.valid[db, da, s]
        tvs = truth.valid[tb, ta, s]
        truth_count += int(truth.valid[:, :, s].sum())
        both = dvs & tvs
        matched += int(both.sum())
        if both.any():
            d = detected.centers[db, da, s][both] - truth.centers[tb, ta, s][both]
            e = np.linalg.norm(d, axis=1)
            mism += int((e > 0.5 * pitch).sum())
            errs.append(e[e <= 0.5 * pitch])
    if matched == 0:
        return None
    errs = np.concatenate(errs) if errs else np.zeros(0)
    rms = float(np.sqrt((errs**2).mean())) if errs.size else np.nan
    mx = float(errs.max()) if errs.size else np.nan
    return (matched - 10 * mism, rms, mx, mism, matched, truth_count)
