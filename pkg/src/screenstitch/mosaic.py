"""Per-patch intensity collection, demosaicing and display rendering.

A mosaic image holds one scalar intensity per screen patch (the ``x`` in the
``d + p * x`` profile model) at the natural resolution of the color screen.
Demosaicing regrids the per-color samples onto a regular output lattice by
normalized convolution, which doubles as the fill rule for missing patches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .analysis import PatchGrid
from .core import COLOR_CHANNEL, LinearImage, ScreenSpec
from .mesh import MeshTransform


@dataclass
class MosaicImage:
    """Lattice-indexed per-site intensities mirroring a PatchGrid."""

    i0: int
    j0: int
    site_offsets: np.ndarray  # (S, 2)
    site_colors: np.ndarray  # (S,)
    values: np.ndarray  # (nj, ni, S) float32, 0 where invalid
    valid: np.ndarray  # (nj, ni, S)

    @property
    def nj(self) -> int:
        return self.values.shape[0]

    @property
    def ni(self) -> int:
        return self.values.shape[1]

    @property
    def n_sites(self) -> int:
        return self.values.shape[2]


def collect(
    img: LinearImage,
    mesh: MeshTransform,
    pg: PatchGrid,
    spec: ScreenSpec,
    kernel_frac: float = 0.3,
) -> MosaicImage:
    """Sample one intensity per valid patch from the screen-primary image.

    Each site is sampled at its mesh-predicted position with a 3x3 bilinear
    tap kernel of radius ``kernel_frac`` x the site half-extent, reading the
    channel matching the site color.  Invalid sites stay flagged and carry
    no intensity.
    """
    if img.channels != 3:
        raise ValueError("collect expects a 3-channel screen-primary image")
    A = pg.global_affine[:, :2]
    a1n, a2n = np.linalg.norm(A[:, 0]), np.linalg.norm(A[:, 1])

    nj, ni, S = pg.valid.shape
    values = np.zeros((nj, ni, S), np.float32)
    lat_all = pg.lattice_positions()

    tap = np.array([-1.0, 0.0, 1.0])
    tx, ty = np.meshgrid(tap, tap)
    taps = np.column_stack([tx.ravel(), ty.ravel()])  # (9, 2)

    for s in range(S):
        sel = pg.valid[:, :, s]
        if not sel.any():
            continue
        ex, ey = spec.sites[s].extent
        radius = kernel_frac * min(ex * a1n, ey * a2n)
        pos = mesh.forward(lat_all[:, :, s, :][sel])
        coords = pos[:, None, :] + taps[None] * radius  # (N, 9, 2)
        chan = COLOR_CHANNEL[int(pg.site_colors[s])]
        samples = ndimage.map_coordinates(
            img.data[:, :, chan],
            [coords[:, :, 1].ravel(), coords[:, :, 0].ravel()],
            order=1,
            mode="nearest",
        ).reshape(-1, taps.shape[0])
        values[sel, s] = samples.mean(axis=1)

    return MosaicImage(
        i0=pg.i0,
        j0=pg.j0,
        site_offsets=pg.site_offsets.copy(),
        site_colors=pg.site_colors.copy(),
        values=values,
        valid=pg.valid.copy(),
    )


# ---------------------------------------------------------------------------
# Demosaic
# ---------------------------------------------------------------------------


@dataclass
class DemosaicResult:
    image: LinearImage  # (H, W, 3) linear RGB
    origin: Tuple[float, float]  # lattice coordinates of output pixel (0, 0)
    step: Tuple[float, float]  # lattice units per output pixel
    holes: np.ndarray  # (H, W) True where no valid neighbor contributed

    def lattice_of(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, np.float64)
        return self.origin + xy * np.asarray(self.step)


def demosaic(
    m: MosaicImage,
    spec: ScreenSpec,
    mode: str = "site",
    sigma: float = 0.6,
    radius: int = 2,
) -> DemosaicResult:
    """Combine per-site intensities into an RGB image on a regular grid.

    ``mode='site'`` outputs one pixel per half-cell (keeps the green/blue
    column alternation of Dufay screens), ``mode='cell'`` one pixel per unit
    cell.  Each output channel is a normalized Gaussian convolution of the
    valid same-color sites within ``radius`` cells, so isolated invalid
    sites are filled from their neighbors by the same rule.
    """
    if mode == "site":
        subdiv = 2
        subpos = [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)]
    elif mode == "cell":
        subdiv = 1
        subpos = [(0.0, 0.0)]
    else:
        raise ValueError(f"unknown demosaic mode {mode!r}")

    nj, ni, S = m.values.shape
    H, W = nj * subdiv, ni * subdiv
    num = np.zeros((H, W, 3), np.float64)
    den = np.zeros((H, W, 3), np.float64)

    offs = np.arange(-radius, radius + 1)
    for s in range(S):
        chan = COLOR_CHANNEL[int(m.site_colors[s])]
        vals = m.values[:, :, s] * m.valid[:, :, s]
        mask = m.valid[:, :, s].astype(np.float64)
        fu, fv = m.site_offsets[s]
        for ou, ov in subpos:
            du = offs[None, :] + fu - ou
            dv = offs[:, None] + fv - ov
            K = np.exp(-(du**2 + dv**2) / (2.0 * sigma**2))
            n = ndimage.correlate(vals, K, mode="constant", cval=0.0)
            d = ndimage.correlate(mask, K, mode="constant", cval=0.0)
            oy = int(round(ov * subdiv))
            ox = int(round(ou * subdiv))
            num[oy::subdiv, ox::subdiv, chan] += n
            den[oy::subdiv, ox::subdiv, chan] += d

    holes = den.min(axis=2) <= 1e-12
    out = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)
    return DemosaicResult(
        image=LinearImage(np.clip(out, 0.0, None).astype(np.float32)),
        origin=(float(m.i0), float(m.j0)),
        step=(1.0 / subdiv, 1.0 / subdiv),
        holes=holes,
    )


# ---------------------------------------------------------------------------
# Display rendering
# ---------------------------------------------------------------------------

# Nominal screen-primary -> display matrix; editable in job configs.  True
# dye-spectra colorimetry is out of scope, this is a mild crosstalk removal.
DEFAULT_RENDER_MATRIX = np.array(
    [
        [1.25, -0.15, -0.10],
        [-0.10, 1.20, -0.10],
        [-0.05, -0.15, 1.20],
    ]
)


@dataclass(frozen=True)
class RenderParams:
    matrix: np.ndarray = None  # type: ignore[assignment]
    gamma: float = 2.2
    gain: float = 1.0
    bits: int = 16

    def __post_init__(self):
        m = DEFAULT_RENDER_MATRIX if self.matrix is None else np.asarray(self.matrix, np.float64)
        if m.shape != (3, 3) or abs(np.linalg.det(m)) < 1e-12:
            raise ValueError("render matrix must be an invertible 3x3")
        object.__setattr__(self, "matrix", m)
        if self.gamma <= 0:
            raise ValueError("display gamma must be positive")
        if self.bits not in (8, 16):
            raise ValueError("bit depth must be 8 or 16")


def color_render(img: LinearImage, params: RenderParams) -> Tuple[np.ndarray, dict]:
    """Linear matrix + exposure gain + gamma encode + quantize.

    Returns the integer display image and a metadata record of the applied
    parameters.
    """
    data = img.data.astype(np.float64)
    if img.channels == 1:
        data = np.repeat(data, 3, axis=2)
    lin = np.clip(params.gain * (data @ params.matrix.T), 0.0, 1.0)
    enc = np.power(lin, 1.0 / params.gamma)
    peak = 2**params.bits - 1
    out = np.round(enc * peak).astype(np.uint16 if params.bits == 16 else np.uint8)
    meta = {
        "matrix": params.matrix.tolist(),
        "gamma": params.gamma,
        "gain": params.gain,
        "bits": params.bits,
    }
    return out, meta


def auto_gain(img: LinearImage, params: RenderParams, target: float = 0.9,
              percentile: float = 99.0) -> float:
    """Exposure gain mapping the given luminance percentile to ``target``
    of full scale after gamma encoding."""
    lum = (img.data.astype(np.float64) @ params.matrix.T).clip(0).mean(axis=2)
    p = np.percentile(lum, percentile)
    if p <= 0:
        return 1.0
    return float(target**params.gamma / p)
