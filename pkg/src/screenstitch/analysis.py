"""Screen geometry detection: seed frame, 5x5 refinement and lattice flood fill.

The detector works on a classified patch map.  Connected components of each
color are labeled once and reduced to (centroid, mass) records; all later
measurement is nearest-component lookup through KD-trees, which is both
faster and less biased than re-measuring windowed centroids per cell.

The flood fill propagates over integer cell indices only: a cell's neighbors
are predicted from a locally refitted affine basis, measured against the
component field, and either accepted (exact integer index, no drift by
construction) or marked invalid.  Partial grids are valid results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .core import BLUE, GREEN, RED, LinearImage, ScreenSpec
from .profiling import (
    ClassMap,
    MatrixProfile,
    ProfileError,
    SampleRegion,
    apply_profile,
    classify,
    estimate_profile,
    unsharp,
)

UNVISITED, ACCEPTED, FAILED, OUTSIDE, PARTIAL = 0, 1, 2, 3, 4


class SeedError(RuntimeError):
    """No plausible screen seed near the requested start point."""


class RefineError(RuntimeError):
    """Seed refinement could not locate a quorum of the 5x5 grid."""


class TileAnalysisError(RuntimeError):
    """All analysis attempts on a tile failed."""

    def __init__(self, message: str, attempts: Optional[List[dict]] = None):
        super().__init__(message)
        self.attempts = attempts or []


@dataclass
class LocalFrame:
    """Seed-local linearization of the screen-to-scan map.

    ``origin`` is the scan position of the seed green patch; ``a1``/``a2``
    are the images of the cell basis vectors.  ``seed_pair`` records which
    (green, blue) site indices anchor the lattice.
    """

    origin: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    seed_pair: Tuple[int, int] = (0, 1)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, np.float64).reshape(2)
        self.a1 = np.asarray(self.a1, np.float64).reshape(2)
        self.a2 = np.asarray(self.a2, np.float64).reshape(2)

    @property
    def A(self) -> np.ndarray:
        """2x2 basis matrix; scan = origin + A @ (u, v)."""
        return np.stack([self.a1, self.a2], axis=1)

    @property
    def pitch(self) -> float:
        return float(min(np.linalg.norm(self.a1), np.linalg.norm(self.a2)))

    def validate(self, spec: ScreenSpec) -> None:
        if abs(np.linalg.det(self.A)) < 1e-9:
            raise SeedError("degenerate frame basis")
        n1 = np.linalg.norm(self.a1)
        n2 = np.linalg.norm(self.a2) / max(spec.aspect, 1e-9)
        for n in (n1, n2):
            if not (0.25 * spec.nominal_pitch_px <= n <= 4.0 * spec.nominal_pitch_px):
                raise SeedError(
                    f"frame scale {n:.2f}px outside plausible range of nominal "
                    f"{spec.nominal_pitch_px}px"
                )

    def canonical(self) -> "LocalFrame":
        """Fix lattice handedness and a1 orientation (pure re-indexing)."""
        a1, a2 = self.a1.copy(), self.a2.copy()
        if (abs(a1[0]) >= abs(a1[1]) and a1[0] < 0) or (
            abs(a1[0]) < abs(a1[1]) and a1[1] < 0
        ):
            a1 = -a1
        if a1[0] * a2[1] - a1[1] * a2[0] < 0:
            a2 = -a2
        return LocalFrame(self.origin, a1, a2, self.seed_pair)


class ColorComponents:
    """Connected components of each patch color, reduced to point records.

    When the screen-primary intensity image is supplied, centroids are
    intensity weighted, recovering the sub-pixel position information that a
    binary label mask quantizes away.  Masses stay in pixel counts for area
    plausibility checks.
    """

    def __init__(
        self,
        cm: ClassMap,
        intensity=None,
        colors: Sequence[int] = (GREEN, BLUE),
    ):
        self.shape = cm.labels.shape
        self.centroids: Dict[int, np.ndarray] = {}
        self.masses: Dict[int, np.ndarray] = {}
        self.trees: Dict[int, Optional[cKDTree]] = {}
        from .core import COLOR_CHANNEL, LinearImage  # local to avoid cycle noise

        for color in colors:
            mask = cm.mask(color)
            lab, n = ndimage.label(mask)  # 4-connective
            if n == 0:
                self.centroids[color] = np.zeros((0, 2))
                self.masses[color] = np.zeros(0)
                self.trees[color] = None
                continue
            flat = np.flatnonzero(mask)
            comp = lab.ravel()[flat]
            ys, xs = np.unravel_index(flat, mask.shape)
            count = np.bincount(comp, minlength=n + 1)[1:].astype(np.float64)
            if intensity is not None:
                chan = COLOR_CHANNEL[color]
                data = intensity.data if isinstance(intensity, LinearImage) else intensity
                w = np.clip(data[:, :, chan].ravel()[flat], 1e-6, None).astype(np.float64)
            else:
                w = np.ones(flat.size)
            wsum = np.bincount(comp, weights=w, minlength=n + 1)[1:]
            sx = np.bincount(comp, weights=w * xs, minlength=n + 1)[1:]
            sy = np.bincount(comp, weights=w * ys, minlength=n + 1)[1:]
            self.centroids[color] = np.stack([sx / wsum, sy / wsum], axis=1)
            self.masses[color] = count
            self.trees[color] = cKDTree(self.centroids[color])

    def count(self, color: int) -> int:
        return len(self.masses[color])

    def match(
        self,
        color: int,
        predicted: np.ndarray,
        radius: float,
        mass_range: Tuple[float, float],
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest component of ``color`` within ``radius`` of each prediction.

        Returns (component index, ok flag); index is -1 where no component
        passed the distance and mass checks.
        """
        predicted = np.atleast_2d(predicted)
        tree = self.trees[color]
        if tree is None:
            n = predicted.shape[0]
            return np.full(n, -1), np.zeros(n, bool)
        dist, idx = tree.query(predicted, k=1, distance_upper_bound=radius)
        found = np.isfinite(dist)
        idx = np.where(found, idx, -1)
        mass = np.where(found, self.masses[color][np.clip(idx, 0, None)], 0.0)
        ok = found & (mass >= mass_range[0]) & (mass <= mass_range[1])
        return np.where(ok, idx, -1), ok


# ---------------------------------------------------------------------------
# Patch grid
# ---------------------------------------------------------------------------


@dataclass
class PatchGrid:
    """Lattice-indexed detected patch centers with validity and confidence.

    Array element ``[j, i]`` holds cell ``(i0 + i, j0 + j)``.  ``measured``
    marks which spec sites were actually measured on the scan (the seed
    green/blue pair); the remaining sites are positioned from the locally
    fitted cell geometry.
    """

    i0: int
    j0: int
    image_size: Tuple[int, int]
    site_offsets: np.ndarray  # (S, 2)
    site_colors: np.ndarray  # (S,)
    measured: np.ndarray  # (S,) bool
    centers: np.ndarray  # (nj, ni, S, 2) scan px, nan where invalid
    valid: np.ndarray  # (nj, ni, S)
    weight: np.ndarray  # (nj, ni, S)
    cell_status: np.ndarray  # (nj, ni)
    in_image: np.ndarray  # (nj, ni) cell nominally inside scan extent
    global_affine: np.ndarray  # (2, 3): scan ~ M @ (u, v, 1)

    @property
    def nj(self) -> int:
        return self.centers.shape[0]

    @property
    def ni(self) -> int:
        return self.centers.shape[1]

    @property
    def n_sites(self) -> int:
        return self.centers.shape[2]

    def cell_indices(self) -> Tuple[np.ndarray, np.ndarray]:
        """(I, J) integer lattice index grids matching the array layout."""
        jj, ii = np.meshgrid(
            np.arange(self.j0, self.j0 + self.nj),
            np.arange(self.i0, self.i0 + self.ni),
            indexing="ij",
        )
        return ii, jj

    def coverage(self) -> float:
        denom = int(self.in_image.sum()) * self.n_sites
        if denom == 0:
            return 0.0
        return float(self.valid[self.in_image].sum()) / denom

    def lattice_positions(self) -> np.ndarray:
        """(nj, ni, S, 2) lattice coordinates of every site."""
        ii, jj = self.cell_indices()
        base = np.stack([ii, jj], axis=-1).astype(np.float64)[:, :, None, :]
        return base + self.site_offsets[None, None, :, :]

    def pairs(self, measured_only: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (lattice (N,2), scan (N,2), weight (N,)) of valid sites."""
        lat = self.lattice_positions()
        sel = self.valid.copy()
        if measured_only:
            sel &= self.measured[None, None, :]
        return lat[sel], self.centers[sel], self.weight[sel].astype(np.float64)


def coverage(pg: PatchGrid) -> float:
    return pg.coverage()


# ---------------------------------------------------------------------------
# Seed detection
# ---------------------------------------------------------------------------


def _plausible_mass_range(expected_area: float, loose: bool = False) -> Tuple[float, float]:
    lo, hi = (0.08, 8.0) if loose else (0.2, 3.5)
    return expected_area * lo, expected_area * hi


def _angle_of(v: np.ndarray) -> float:
    return float(np.arctan2(v[1], v[0]))


def _measure_grid(
    comps: ColorComponents,
    frame: LocalFrame,
    spec: ScreenSpec,
    half: int,
    disp_frac: float = 0.35,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Predict and measure the seed-pair sites over a (2*half+1)^2 cell block.

    Returns (lattice (N,2), measured centers (N,2), located-cell flags
    ((2*half+1)^2,), component masses (N,)).
    """
    gi, bi = frame.seed_pair
    goff = np.array(spec.sites[gi].offset)
    boff = np.array(spec.sites[bi].offset)
    rng = np.arange(-half, half + 1)
    jj, ii = np.meshgrid(rng, rng, indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    A = frame.A
    area = abs(np.linalg.det(A))
    radius = disp_frac * frame.pitch
    pts, targets, masses = [], [], []
    ok_per_site = []
    for site, off, color in ((gi, goff, GREEN), (bi, boff, BLUE)):
        lat = cells + off
        pred = frame.origin + lat @ A.T
        mass_range = _plausible_mass_range(area * spec.expected_site_area_frac(site))
        idx, ok = comps.match(color, pred, radius, mass_range)
        ok_per_site.append(ok)
        pts.append(lat[ok])
        targets.append(comps.centroids[color][idx[ok]])
        masses.append(comps.masses[color][idx[ok]])
    located = ok_per_site[0] & ok_per_site[1]
    return (
        np.concatenate(pts),
        np.concatenate(targets),
        located,
        np.concatenate(masses),
    )


def _fit_frame(lattice: np.ndarray, centers: np.ndarray, seed_pair) -> LocalFrame:
    X = np.column_stack([np.ones(len(lattice)), lattice])
    sol, *_ = np.linalg.lstsq(X, centers, rcond=None)
    return LocalFrame(origin=sol[0], a1=sol[1], a2=sol[2], seed_pair=seed_pair)


def find_seed(
    cm: ClassMap,
    start: Sequence[float],
    spec: ScreenSpec,
    comps: Optional[ColorComponents] = None,
) -> LocalFrame:
    """Estimate screen orientation and scale from a green-blue patch pair.

    Finds the nearest plausible green component to ``start``, pairs it with
    nearby blue components and interprets the displacement through every
    (green, blue) site pair of the spec under a similarity capture model.
    Candidate frames are scored on a 3x3 trial grid and the best one is
    returned (canonicalized).  Raises :class:`SeedError` when nothing
    plausible is found, which callers treat as "retry elsewhere".
    """
    start = np.asarray(start, np.float64).reshape(2)
    if not (0 <= start[0] < cm.width and 0 <= start[1] < cm.height):
        raise SeedError("start point outside image")
    if comps is None:
        comps = ColorComponents(cm)
    if comps.count(GREEN) == 0 or comps.count(BLUE) == 0:
        raise SeedError("no green/blue patches classified")

    nominal_area = spec.nominal_pitch_px**2 * spec.aspect
    basis = spec.basis_mm
    mm_unit = np.linalg.norm(spec.e1)

    # Plausible green components near the start (scale may be off by 4x
    # either way, so the mass gate is loose).
    g_sites = spec.sites_of_color(GREEN)
    g_area = nominal_area * min(spec.expected_site_area_frac(s) for s in g_sites)
    g_lo, g_hi = _plausible_mass_range(g_area, loose=True)
    gm = comps.masses[GREEN]
    g_sel = np.flatnonzero((gm >= g_lo) & (gm <= g_hi))
    if g_sel.size == 0:
        raise SeedError("no plausibly sized green patches")
    g_pts = comps.centroids[GREEN][g_sel]
    order = np.argsort(((g_pts - start) ** 2).sum(axis=1))
    search_radius = 8.0 * spec.nominal_pitch_px
    best = None

    for g_idx in order[:6]:
        g0 = g_pts[g_idx]
        if np.linalg.norm(g0 - start) > search_radius:
            break
        bm = comps.masses[BLUE]
        b_tree = comps.trees[BLUE]
        dist, b_idx = b_tree.query(g0, k=min(6, comps.count(BLUE)))
        dist, b_idx = np.atleast_1d(dist), np.atleast_1d(b_idx)
        for d, bi_ in zip(dist, b_idx):
            if not np.isfinite(d) or d > 2.5 * spec.nominal_pitch_px:
                continue
            if not (g_lo / 2 <= bm[bi_] <= g_hi * 2):
                continue
            gb = comps.centroids[BLUE][bi_] - g0
            for gs, bs in spec.seed_pairs():
                doff = np.array(spec.sites[bs].offset) - np.array(spec.sites[gs].offset)
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        dl = doff + (di, dj)
                        w_mm = basis @ dl
                        w_len = np.linalg.norm(w_mm)
                        if not 0.2 * mm_unit <= w_len <= 1.6 * mm_unit:
                            continue
                        s = np.linalg.norm(gb) / w_len
                        theta = _angle_of(gb) - _angle_of(w_mm)
                        c, sn = np.cos(theta), np.sin(theta)
                        R = np.array([[c, -sn], [sn, c]])
                        A = s * (R @ basis)
                        frame = LocalFrame(g0, A[:, 0], A[:, 1], (gs, bs))
                        try:
                            frame.validate(spec)
                        except SeedError:
                            continue
                        _, _, located, _ = _measure_grid(comps, frame, spec, half=1)
                        score = int(located.sum())
                        if best is None or score > best[0]:
                            best = (score, frame)
        if best is not None and best[0] >= 8:
            break

    if best is None or best[0] < 5:
        raise SeedError("no green-blue seed pair produced a consistent frame")
    return best[1].canonical()


def refine_seed_grid(
    cm: ClassMap,
    frame: LocalFrame,
    spec: ScreenSpec,
    comps: Optional[ColorComponents] = None,
    quorum: float = 0.6,
    tol_px: float = 0.05,
    max_iter: int = 10,
) -> LocalFrame:
    """Refine a seed frame on a 5x5 grid of green/blue pairs.

    Re-measures every located pair and least-squares refits origin and basis,
    iterating until predictions move less than ``tol_px`` over the grid.
    Raises :class:`RefineError` below a 60% quorum of the 25 cells.
    """
    if comps is None:
        comps = ColorComponents(cm)
    frame.validate(spec)
    current = frame
    for _ in range(max_iter):
        lat, centers, located, _ = _measure_grid(comps, current, spec, half=2)
        if located.sum() < quorum * located.size:
            raise RefineError(
                f"located {int(located.sum())}/{located.size} cells, "
                f"below {quorum:.0%} quorum"
            )
        new = _fit_frame(lat, centers, current.seed_pair)
        corners = np.array([[-2.5, -2.5], [2.5, -2.5], [-2.5, 2.5], [2.5, 2.5]])
        delta = (new.origin + corners @ new.A.T) - (
            current.origin + corners @ current.A.T
        )
        current = new
        if np.abs(delta).max() < tol_px:
            break
    return current


# ---------------------------------------------------------------------------
# Flood fill
# ---------------------------------------------------------------------------


@dataclass
class FloodParams:
    accept_mass: Tuple[float, float] = (0.2, 3.5)  # x expected site area
    disp_frac: float = 0.35  # of local pitch
    fit_halfwin: int = 3  # local basis window, cells
    min_fit_cells: int = 6
    edge_margin: float = 1.0  # px, beyond which predictions are "outside"


def _estimate_bounds(frame: LocalFrame, size: Tuple[int, int]) -> Tuple[int, int, int, int]:
    W, H = size
    corners = np.array([[0, 0], [W, 0], [0, H], [W, H]], float)
    inv = np.linalg.inv(frame.A)
    lat = (corners - frame.origin) @ inv.T
    i0 = int(np.floor(lat[:, 0].min())) - 2
    i1 = int(np.ceil(lat[:, 0].max())) + 2
    j0 = int(np.floor(lat[:, 1].min())) - 2
    j1 = int(np.ceil(lat[:, 1].max())) + 2
    return i0, i1, j0, j1


def flood_fill(
    cm: ClassMap,
    frame: LocalFrame,
    spec: ScreenSpec,
    comps: Optional[ColorComponents] = None,
    params: Optional[FloodParams] = None,
) -> PatchGrid:
    """Grow the patch lattice outward from the seed cell.

    Breadth-first over integer cell indices: each accepted cell proposes its
    four neighbors, whose green/blue positions are predicted through the
    proposing cell's locally refitted basis and matched against the component
    field.  Acceptance requires a nearby component of plausible mass that no
    other cell has claimed.  Rejected or unreachable cells stay invalid;
    the result is always a usable (possibly partial) grid.
    """
    if params is None:
        params = FloodParams()
    if comps is None:
        comps = ColorComponents(cm)
    frame.validate(spec)

    W, H = cm.width, cm.height
    gi_site, bi_site = frame.seed_pair
    goff = np.array(spec.sites[gi_site].offset)
    boff = np.array(spec.sites[bi_site].offset)
    g_frac = spec.expected_site_area_frac(gi_site)
    b_frac = spec.expected_site_area_frac(bi_site)

    i0, i1, j0, j1 = _estimate_bounds(frame, (W, H))
    ni, nj = i1 - i0 + 1, j1 - j0 + 1
    if ni * nj > 16_000_000:
        raise SeedError("implausibly large lattice bounds; bad frame scale")

    status = np.zeros((nj, ni), np.uint8)
    cg = np.full((nj, ni, 2), np.nan)
    cb = np.full((nj, ni, 2), np.nan)
    wg = np.zeros((nj, ni), np.float32)
    wb = np.zeros((nj, ni), np.float32)
    basisA = np.zeros((nj, ni, 2, 2))

    used_g = np.zeros(comps.count(GREEN) + 1, bool)
    used_b = np.zeros(comps.count(BLUE) + 1, bool)

    def aj(j):  # lattice j -> array row
        return j - j0

    def ai(i):
        return i - i0

    # Seed cell (0, 0): measure both sites directly from the frame; the
    # frame origin is by construction the predicted green center.
    A0 = frame.A
    area0 = abs(np.linalg.det(A0))
    radius0 = params.disp_frac * frame.pitch
    idx_g, ok_g = comps.match(
        GREEN, frame.origin, radius0, _plausible_mass_range(area0 * g_frac)
    )
    if not ok_g[0]:
        raise SeedError("seed green patch not measurable")
    idx_b, ok_b = comps.match(
        BLUE,
        frame.origin + (boff - goff) @ A0.T,
        radius0,
        _plausible_mass_range(area0 * b_frac),
    )
    if not ok_b[0]:
        raise SeedError("seed blue patch not measurable")

    sj, si = aj(0), ai(0)
    status[sj, si] = ACCEPTED
    cg[sj, si] = comps.centroids[GREEN][idx_g[0]]
    cb[sj, si] = comps.centroids[BLUE][idx_b[0]]
    wg[sj, si] = min(1.0, comps.masses[GREEN][idx_g[0]] / (area0 * g_frac))
    wb[sj, si] = min(1.0, comps.masses[BLUE][idx_b[0]] / (area0 * b_frac))
    basisA[sj, si] = A0
    used_g[idx_g[0]] = True
    used_b[idx_b[0]] = True

    dirs = np.array([[0, -1], [-1, 0], [1, 0], [0, 1]])
    frontier = np.array([[0, 0]], np.int64)
    hw = params.fit_halfwin
    roff = np.arange(-hw, hw + 1)
    wjj, wii = np.meshgrid(roff, roff, indexing="ij")
    wii = wii.ravel()
    wjj = wjj.ravel()

    while frontier.size:
        # --- propose unvisited 4-neighbors, deterministically deduplicated
        cand = (frontier[:, None, :] + dirs[None, :, :]).reshape(-1, 2)
        parent = np.repeat(frontier, 4, axis=0)
        inb = (
            (cand[:, 0] >= i0) & (cand[:, 0] <= i1)
            & (cand[:, 1] >= j0) & (cand[:, 1] <= j1)
        )
        cand, parent = cand[inb], parent[inb]
        unv = status[aj(cand[:, 1]), ai(cand[:, 0])] == UNVISITED
        cand, parent = cand[unv], parent[unv]
        if cand.size == 0:
            break
        lin = aj(cand[:, 1]).astype(np.int64) * ni + ai(cand[:, 0])
        order = np.lexsort((np.arange(len(lin)), lin))
        lin_sorted = lin[order]
        first = np.ones(len(lin_sorted), bool)
        first[1:] = lin_sorted[1:] != lin_sorted[:-1]
        keep = order[first]
        cand, parent = cand[keep], parent[keep]

        pj, pi = aj(parent[:, 1]), ai(parent[:, 0])
        Ap = basisA[pj, pi]  # (n, 2, 2)
        step = (cand - parent).astype(np.float64)
        pred_g = cg[pj, pi] + np.einsum("nab,nb->na", Ap, step)
        pred_b = pred_g + np.einsum("nab,nb->na", Ap, np.broadcast_to(boff - goff, step.shape))

        # Sites predicted off the scan are not measurable; a cell with both
        # sites outside is recorded as such and never expanded.
        m = params.edge_margin

        def _out(p):
            return (
                (p[:, 0] < m) | (p[:, 0] > W - 1 - m)
                | (p[:, 1] < m) | (p[:, 1] > H - 1 - m)
            )

        out_g, out_b = _out(pred_g), _out(pred_b)
        outside = out_g & out_b
        ojj, oii = aj(cand[outside, 1]), ai(cand[outside, 0])
        status[ojj, oii] = OUTSIDE

        keep2 = ~outside
        cand, parent = cand[keep2], parent[keep2]
        pred_g, pred_b = pred_g[keep2], pred_b[keep2]
        out_g, out_b = out_g[keep2], out_b[keep2]
        Ap = Ap[keep2]
        if cand.size == 0:
            frontier = np.zeros((0, 2), np.int64)
            continue

        area = np.abs(np.linalg.det(Ap))
        pitch = np.minimum(
            np.linalg.norm(Ap[:, :, 0], axis=1), np.linalg.norm(Ap[:, :, 1], axis=1)
        )
        radius = params.disp_frac * pitch

        acc_g, idxg = _match_varradius(comps, GREEN, pred_g, radius,
                                       area * g_frac, params.accept_mass, used_g)
        acc_b, idxb = _match_varradius(comps, BLUE, pred_b, radius,
                                       area * b_frac, params.accept_mass, used_b)
        acc_g &= ~out_g
        acc_b &= ~out_b
        # Resolve duplicate component claims inside the ring: first (already
        # deterministic) claimant wins, later ones fail.
        acc_g &= _first_claim(idxg, acc_g)
        acc_b &= _first_claim(idxb, acc_b)
        accept = acc_g & acc_b
        partial = (acc_g | acc_b) & ~accept

        cjj, cii = aj(cand[:, 1]), ai(cand[:, 0])
        status[cjj, cii] = np.where(
            accept, ACCEPTED, np.where(partial, PARTIAL, FAILED)
        ).astype(np.uint8)
        ea_full = area
        for acc, idx, used, cgrid, wgrid, color, frac in (
            (acc_g, idxg, used_g, cg, wg, GREEN, g_frac),
            (acc_b, idxb, used_b, cb, wb, BLUE, b_frac),
        ):
            if acc.any():
                sel = idx[acc]
                used[sel] = True
                cgrid[cjj[acc], cii[acc]] = comps.centroids[color][sel]
                wgrid[cjj[acc], cii[acc]] = np.minimum(
                    1.0, comps.masses[color][sel] / (ea_full[acc] * frac)
                )
        if accept.any():
            basisA[cjj[accept], cii[accept]] = _local_basis_fit(
                cand[accept], Ap[accept], status, cg, cb, wg, wb,
                goff, boff, (i0, j0), (wii, wjj), params.min_fit_cells,
            )

        nxt = cand[accept]
        order = np.lexsort((nxt[:, 0], nxt[:, 1]))
        frontier = nxt[order]

    return _assemble_grid(
        spec, frame, (W, H), (i0, j0), status, cg, cb, wg, wb, basisA
    )


def _match_varradius(comps, color, pred, radius, expected, mass_window, used):
    """Component match with per-prediction radius and used-component veto."""
    tree = comps.trees[color]
    n = pred.shape[0]
    if tree is None:
        return np.zeros(n, bool), np.full(n, -1)
    dist, idx = tree.query(pred, k=1, distance_upper_bound=float(radius.max()) + 1e-9)
    found = np.isfinite(dist)
    idx = np.where(found, idx, -1)
    ok = found & (dist <= radius)
    mass = np.where(ok, comps.masses[color][np.clip(idx, 0, None)], 0.0)
    ok &= (mass >= mass_window[0] * expected) & (mass <= mass_window[1] * expected)
    ok &= ~used[np.clip(idx, 0, None)]
    return ok, idx


def _first_claim(idx: np.ndarray, accept: np.ndarray) -> np.ndarray:
    """True where this row is the first accepted claim of its component."""
    out = np.ones(len(idx), bool)
    claimed = idx.copy()
    claimed[~accept] = -1
    _, first = np.unique(claimed, return_index=True)
    dup = np.ones(len(idx), bool)
    dup[first] = False
    out[dup & accept] = False
    return out


def _local_basis_fit(
    cells, Ap, status, cg, cb, wg, wb, goff, boff, origin_ij, window, min_cells
):
    """Weighted LS refit of the local affine basis around each new cell.

    Uses accepted green and blue centers in a +-fit_halfwin window; falls
    back to the proposing parent's basis when support is too thin.
    """
    i0, j0 = origin_ij
    wii, wjj = window
    nj, ni = status.shape
    n = cells.shape[0]
    gi = cells[:, 0, None] - i0 + wii[None, :]  # (n, K) array col idx
    gj = cells[:, 1, None] - j0 + wjj[None, :]
    inb = (gi >= 0) & (gi < ni) & (gj >= 0) & (gj < nj)
    gi_c = np.clip(gi, 0, ni - 1)
    gj_c = np.clip(gj, 0, nj - 1)
    acc = inb & (status[gj_c, gi_c] == ACCEPTED)

    du = wii[None, :].astype(np.float64)  # lattice offsets relative to cell
    dv = wjj[None, :].astype(np.float64)

    pts_g = cg[gj_c, gi_c]  # (n, K, 2)
    pts_b = cb[gj_c, gi_c]
    w_g = np.where(acc, wg[gj_c, gi_c], 0.0)
    w_b = np.where(acc, wb[gj_c, gi_c], 0.0)

    K = wii.size
    ones = np.ones((n, K))
    # Rows for G sites at (du, dv) + goff - goff = (du, dv) relative lattice;
    # B sites sit at + (boff - goff).
    dgb = boff - goff
    Xg = np.stack([ones, du * ones, dv * ones], axis=2)  # (n, K, 3)
    Xb = np.stack([ones, du + dgb[0] * ones, dv + dgb[1] * ones], axis=2)

    X = np.concatenate([Xg, Xb], axis=1)  # (n, 2K, 3)
    Y = np.concatenate([pts_g, pts_b], axis=1)  # (n, 2K, 2)
    Wt = np.concatenate([w_g, w_b], axis=1)  # (n, 2K)
    Y = np.where(np.isfinite(Y), Y, 0.0)

    XtX = np.einsum("nk,nki,nkj->nij", Wt, X, X)
    XtY = np.einsum("nk,nki,nkd->nid", Wt, X, Y)

    ncells = acc.sum(axis=1)
    det = np.linalg.det(XtX)
    good = (ncells >= min_cells) & (np.abs(det) > 1e-9)
    XtX[~good] = np.eye(3)
    XtY[~good] = 0.0
    sol = np.linalg.solve(XtX, XtY)  # (n, 3, 2): rows [origin, d/du, d/dv]
    A = np.swapaxes(sol[:, 1:3, :], 1, 2)  # (n, 2, 2) columns a1, a2
    A[~good] = Ap[~good]
    return A


def _assemble_grid(spec, frame, size, origin_ij, status, cg, cb, wg, wb, basisA):
    i0, j0 = origin_ij
    nj, ni = status.shape
    S = len(spec.sites)
    gi_site, bi_site = frame.seed_pair
    goff = np.array(spec.sites[gi_site].offset)

    accepted = (status == ACCEPTED) & np.isfinite(cg[:, :, 0]) & np.isfinite(cb[:, :, 0])
    # Global affine over accepted green centers, for extent reckoning.
    jj, ii = np.nonzero(accepted)
    lat = np.column_stack([ii + i0 + goff[0], jj + j0 + goff[1]])
    X = np.column_stack([lat, np.ones(len(lat))])
    sol, *_ = np.linalg.lstsq(X, cg[accepted], rcond=None)
    affine = sol.T  # (2, 3) scan ~ affine @ (u, v, 1)

    W, H = size
    jg, ig = np.meshgrid(np.arange(nj), np.arange(ni), indexing="ij")
    cell_lat = np.stack(
        [ig + i0 + 0.5, jg + j0 + 0.5, np.ones_like(ig, float)], axis=-1
    )
    nominal = cell_lat @ affine.T
    # count only cells at least half a cell inside the scan as expected
    hm = 0.5 * max(
        np.linalg.norm(affine[:, 0]), np.linalg.norm(affine[:, 1])
    )
    in_image = (
        (nominal[:, :, 0] >= hm) & (nominal[:, :, 0] <= W - 1 - hm)
        & (nominal[:, :, 1] >= hm) & (nominal[:, :, 1] <= H - 1 - hm)
    )

    centers = np.full((nj, ni, S, 2), np.nan)
    valid = np.zeros((nj, ni, S), bool)
    weight = np.zeros((nj, ni, S), np.float32)
    measured = np.zeros(S, bool)
    measured[[gi_site, bi_site]] = True

    offs = spec.site_offsets()
    w_min = np.minimum(wg, wb)
    has_g = np.isfinite(cg[:, :, 0])
    has_b = np.isfinite(cb[:, :, 0])
    for s in range(S):
        if s == gi_site:
            centers[:, :, s] = cg
            weight[:, :, s] = wg
            valid[:, :, s] = has_g
        elif s == bi_site:
            centers[:, :, s] = cb
            weight[:, :, s] = wb
            valid[:, :, s] = has_b
        else:
            rel = offs[s] - goff
            centers[:, :, s] = cg + np.einsum("jiab,b->jia", basisA, rel)
            weight[:, :, s] = w_min
            valid[:, :, s] = accepted

    # Derived centers can land just outside the scan on edge cells.
    oob = (
        (centers[:, :, :, 0] < 0) | (centers[:, :, :, 0] > W - 1)
        | (centers[:, :, :, 1] < 0) | (centers[:, :, :, 1] > H - 1)
    )
    valid &= ~oob
    centers[~valid] = np.nan
    weight[~valid] = 0.0

    # Trim to the interesting bounding box: cells in-image or touched.
    keep = in_image | (status != UNVISITED)
    jj_any = np.flatnonzero(keep.any(axis=1))
    ii_any = np.flatnonzero(keep.any(axis=0))
    ja, jb = jj_any[0], jj_any[-1] + 1
    ia, ib = ii_any[0], ii_any[-1] + 1

    return PatchGrid(
        i0=i0 + ia,
        j0=j0 + ja,
        image_size=(W, H),
        site_offsets=offs,
        site_colors=spec.site_colors(),
        measured=measured,
        centers=centers[ja:jb, ia:ib],
        valid=valid[ja:jb, ia:ib],
        weight=weight[ja:jb, ia:ib],
        cell_status=status[ja:jb, ia:ib],
        in_image=in_image[ja:jb, ia:ib],
        global_affine=affine,
    )


# ---------------------------------------------------------------------------
# Tile orchestration
# ---------------------------------------------------------------------------


@dataclass
class AnalyzeParams:
    classify_threshold: float = 1.5
    unsharp_amount: float = 1.0
    unsharp_radius: Optional[float] = None  # default: nominal pitch / 4
    profile_fraction: float = 0.10
    region_frac: float = 0.5
    min_coverage: float = 0.8
    max_attempts: int = 8
    flood: FloodParams = field(default_factory=FloodParams)


@dataclass
class TileAnalysis:
    profile: MatrixProfile
    frame: LocalFrame
    grid: PatchGrid
    class_map: ClassMap
    attempts: List[dict]

    @property
    def coverage(self) -> float:
        return self.grid.coverage()


def _attempt_starts(size: Tuple[int, int], n: int) -> np.ndarray:
    """Image center followed by a low-discrepancy sequence of alternates."""
    W, H = size
    pts = [np.array([W / 2.0, H / 2.0])]
    if n > 1:
        halton = qmc.Halton(d=2, scramble=False).random(n)
        margin = 0.12
        span = np.array([W, H]) * (1 - 2 * margin)
        pts.extend(np.array([W, H]) * margin + halton[1:] * span)
    return np.array(pts[:n])


def analyze_tile(
    img: LinearImage,
    spec: ScreenSpec,
    params: Optional[AnalyzeParams] = None,
) -> TileAnalysis:
    """Full single-tile analysis: profile, seed, refinement, flood fill.

    Attempts start at the image center; when the profile, the seed or the
    resulting coverage disappoints, the analysis restarts from a
    deterministic low-discrepancy sequence of alternate points, keeping the
    best grid.  Raises :class:`TileAnalysisError` with per-attempt reasons
    when every attempt fails.
    """
    if params is None:
        params = AnalyzeParams()
    min_cells = 10
    if img.width < min_cells * spec.nominal_pitch_px or img.height < (
        min_cells * spec.nominal_pitch_px * spec.aspect
    ):
        raise TileAnalysisError("image too small for a 10x10 cell analysis")

    starts = _attempt_starts((img.width, img.height), params.max_attempts)
    radius = params.unsharp_radius
    if radius is None:
        radius = spec.nominal_pitch_px / 4.0

    attempts: List[dict] = []
    best: Optional[TileAnalysis] = None
    cache: dict = {}

    for start in starts:
        record = {"start": [float(start[0]), float(start[1])]}
        attempts.append(record)
        region = SampleRegion(
            start[0], start[1],
            int(img.width * params.region_frac),
            int(img.height * params.region_frac),
        )
        key = region.slices(img)
        try:
            if (key, "prof") not in cache:
                prof = estimate_profile(img, region, fraction=params.profile_fraction)
                prof_img = apply_profile(img, prof)
                sharp = unsharp(prof_img, radius, params.unsharp_amount)
                cm = classify(sharp, params.classify_threshold)
                comps = ColorComponents(cm, intensity=prof_img)
                cache[(key, "prof")] = (prof, cm, comps)
            prof, cm, comps = cache[(key, "prof")]
        except ProfileError as exc:
            record["stage"] = "profile"
            record["error"] = str(exc)
            continue
        try:
            frame = find_seed(cm, start, spec, comps)
            frame = refine_seed_grid(cm, frame, spec, comps)
        except (SeedError, RefineError) as exc:
            record["stage"] = "seed"
            record["error"] = str(exc)
            continue
        grid = flood_fill(cm, frame, spec, comps, params.flood)
        cov = grid.coverage()
        record["stage"] = "done"
        record["coverage"] = cov
        result = TileAnalysis(prof, frame, grid, cm, attempts)
        if best is None or cov > best.coverage:
            best = result
        if cov >= params.min_coverage:
            break

    if best is None:
        raise TileAnalysisError(
            "analysis failed on all attempts: "
            + "; ".join(f"{a.get('stage')}: {a.get('error')}" for a in attempts),
            attempts,
        )
    return best
