"""Screen geometry, image containers and lattice coordinate conventions.

Coordinate conventions used throughout the package:

* Scan pixels are addressed as ``(x, y)`` with ``x`` along image columns and
  ``y`` along rows; pixel centers sit on integer coordinates, so a ``W x H``
  image covers ``x in [-0.5, W - 0.5]``.
* Lattice coordinates ``(u, v)`` are continuous multiples of the screen cell
  basis ``e1, e2``.  The integer part indexes the repeating unit cell, the
  fractional part addresses sample sites within the cell.
* Image arrays are row-major ``(H, W)`` or ``(H, W, C)`` float32 in linear
  light.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

# Patch color labels shared by the classifier, the lattice model and the
# synthetic renderer.  NONE means "no confident color".
NONE, RED, GREEN, BLUE = 0, 1, 2, 3

COLOR_NAMES = {NONE: "none", RED: "red", GREEN: "green", BLUE: "blue"}
COLOR_BY_NAME = {v: k for k, v in COLOR_NAMES.items()}
# Channel index in screen-primary image space for each patch color.
COLOR_CHANNEL = {RED: 0, GREEN: 1, BLUE: 2}


class ScreenSpecError(ValueError):
    """Raised for inconsistent or unusable screen definitions."""


@dataclass(frozen=True)
class Site:
    """One colored sample site inside the repeating unit cell.

    ``offset`` is in fractional unit-cell coordinates, ``extent`` holds the
    fractional half-widths of the colored area used for synthesis and
    area sampling.
    """

    offset: Tuple[float, float]
    color: int
    extent: Tuple[float, float]

    def validate(self) -> None:
        if self.color not in (RED, GREEN, BLUE):
            raise ScreenSpecError(f"invalid site color {self.color!r}")
        if not (0.0 <= self.offset[0] < 1.0 and 0.0 <= self.offset[1] < 1.0):
            raise ScreenSpecError(f"site offset {self.offset} outside [0, 1)^2")
        if min(self.extent) <= 0.0:
            raise ScreenSpecError("site extent must be positive")


@dataclass(frozen=True)
class ScreenSpec:
    """Parametric description of a regular color screen.

    ``e1``/``e2`` span one repeating unit cell in nominal screen millimeters
    (absolute mm calibration is optional metadata; the pipeline works in
    lattice units and scan pixels).  ``nominal_pitch_px`` is the expected
    image-space length of ``e1`` at scan resolution and anchors all
    scale-plausibility checks.
    """

    kind: str
    e1: Tuple[float, float]
    e2: Tuple[float, float]
    sites: Tuple[Site, ...]
    nominal_pitch_px: float
    name: str = "custom"

    def __post_init__(self):
        if self.kind not in ("dufay", "paget_finlay", "custom"):
            raise ScreenSpecError(f"unknown screen kind {self.kind!r}")
        if abs(_cross(self.e1, self.e2)) < 1e-12:
            raise ScreenSpecError("cell basis e1, e2 must be linearly independent")
        if self.nominal_pitch_px <= 0:
            raise ScreenSpecError("nominal_pitch_px must be positive")
        if not self.sites:
            raise ScreenSpecError("screen needs at least one sample site")
        for s in self.sites:
            s.validate()
        if not self.seed_pairs():
            raise ScreenSpecError(
                "screen needs a green and a blue site with distinct offsets "
                "(seed detection is driven by a green-blue neighbor pair)"
            )

    # -- derived geometry ------------------------------------------------

    @property
    def basis_mm(self) -> np.ndarray:
        """2x2 matrix with columns e1, e2 (mm per lattice unit)."""
        return np.array([[self.e1[0], self.e2[0]], [self.e1[1], self.e2[1]]], float)

    @property
    def aspect(self) -> float:
        """|e2| / |e1| ratio, the nominal cell anisotropy."""
        return float(np.hypot(*self.e2) / np.hypot(*self.e1))

    def site_offsets(self) -> np.ndarray:
        return np.array([s.offset for s in self.sites], float)

    def site_colors(self) -> np.ndarray:
        return np.array([s.color for s in self.sites], np.int64)

    def sites_of_color(self, color: int) -> List[int]:
        return [i for i, s in enumerate(self.sites) if s.color == color]

    def seed_pairs(self) -> List[Tuple[int, int]]:
        """(green_site, blue_site) index pairs with distinct offsets."""
        pairs = []
        for gi in self.sites_of_color(GREEN):
            for bi in self.sites_of_color(BLUE):
                if self.sites[gi].offset != self.sites[bi].offset:
                    pairs.append((gi, bi))
        return pairs

    def expected_site_area_frac(self, site_index: int) -> float:
        """Colored area of a site as a fraction of the unit-cell area."""
        ex, ey = self.sites[site_index].extent
        return min(2.0 * ex, 1.0) * min(2.0 * ey, 1.0)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "e1": list(self.e1),
            "e2": list(self.e2),
            "nominal_pitch_px": self.nominal_pitch_px,
            "sites": [
                {
                    "offset": list(s.offset),
                    "color": COLOR_NAMES[s.color],
                    "extent": list(s.extent),
                }
                for s in self.sites
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "ScreenSpec":
        try:
            sites = tuple(
                Site(
                    offset=tuple(float(x) for x in s["offset"]),
                    color=COLOR_BY_NAME[s["color"]],
                    extent=tuple(float(x) for x in s["extent"]),
                )
                for s in d["sites"]
            )
            return ScreenSpec(
                kind=d["kind"],
                e1=tuple(float(x) for x in d["e1"]),
                e2=tuple(float(x) for x in d["e2"]),
                sites=sites,
                nominal_pitch_px=float(d["nominal_pitch_px"]),
                name=d.get("name", "custom"),
            )
        except (KeyError, TypeError) as exc:
            raise ScreenSpecError(f"malformed screen definition: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "ScreenSpec":
        with open(path) as fh:
            return ScreenSpec.from_dict(json.load(fh))


def _cross(a: Sequence[float], b: Sequence[float]) -> float:
    return a[0] * b[1] - a[1] * b[0]


# ---------------------------------------------------------------------------
# Built-in presets.
#
# Historical reseau dimensions are nominal: the literature does not settle
# exact pitches for either Dufay variant, so these values are declared
# best-effort and every field can be overridden from a screen config file.
# The Dufay cell carries one green patch, one adjacent blue patch and one
# red-line sample site; the red lines cross the green/blue columns and are
# represented by their sample position only.
# ---------------------------------------------------------------------------

_DUFAY_SITES = (
    Site(offset=(0.0, 0.0), color=GREEN, extent=(0.22, 0.30)),
    Site(offset=(0.5, 0.0), color=BLUE, extent=(0.22, 0.30)),
    Site(offset=(0.25, 0.5), color=RED, extent=(0.50, 0.18)),
)

# Paget / Finlay: checkerboard cell, two green squares on the diagonal plus
# one red and one blue square; each square is half a cell wide.
_PAGET_SITES = (
    Site(offset=(0.0, 0.0), color=GREEN, extent=(0.25, 0.25)),
    Site(offset=(0.5, 0.5), color=GREEN, extent=(0.25, 0.25)),
    Site(offset=(0.5, 0.0), color=RED, extent=(0.25, 0.25)),
    Site(offset=(0.0, 0.5), color=BLUE, extent=(0.25, 0.25)),
)


def _rot(v: Tuple[float, float], deg: float) -> Tuple[float, float]:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return (c * v[0] - s * v[1], s * v[0] + c * v[1])


PRESETS = {
    # 0.060 mm cell along the green/blue column pair, 0.030 mm red-line
    # period: ~10.4 x 5.2 px per cell at 4400 ppi, i.e. ~5 px per patch.
    "dufay": ScreenSpec(
        kind="dufay",
        e1=(0.060, 0.0),
        e2=(0.0, 0.030),
        sites=_DUFAY_SITES,
        nominal_pitch_px=10.4,
        name="dufay",
    ),
    # Second collection variant: finer pitch, lines angled relative to the
    # plate edge.  Angle and pitch are nominal placeholders.
    "dufay-fine": ScreenSpec(
        kind="dufay",
        e1=_rot((0.050, 0.0), 23.0),
        e2=_rot((0.0, 0.025), 23.0),
        sites=_DUFAY_SITES,
        nominal_pitch_px=8.7,
        name="dufay-fine",
    ),
    "paget": ScreenSpec(
        kind="paget_finlay",
        e1=(0.080, 0.0),
        e2=(0.0, 0.080),
        sites=_PAGET_SITES,
        nominal_pitch_px=13.9,
        name="paget",
    ),
}


def get_preset(name: str) -> ScreenSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ScreenSpecError(
            f"unknown screen preset {name!r}; available: {sorted(PRESETS)}"
        ) from None


# ---------------------------------------------------------------------------
# Lattice operations
# ---------------------------------------------------------------------------


def site_color_at(spec: ScreenSpec, cell: Sequence[int], site_index: int) -> int:
    """Color of the addressed sample site; translation invariant across cells."""
    if not 0 <= site_index < len(spec.sites):
        raise IndexError(
            f"site_index {site_index} out of range for {len(spec.sites)} sites"
        )
    return spec.sites[site_index].color


def lattice_to_mm(spec: ScreenSpec, uv) -> np.ndarray:
    """Map lattice coordinates ``(u, v)`` to nominal screen millimeters.

    Exactly linear: ``u * e1 + v * e2``.  Accepts a single pair or an
    ``(..., 2)`` array.
    """
    uv = np.asarray(uv, float)
    return uv @ spec.basis_mm.T


def site_lattice_positions(spec: ScreenSpec, i, j, site_index: int) -> np.ndarray:
    """Lattice coordinates of site ``site_index`` in cells ``(i, j)``."""
    off = spec.sites[site_index].offset
    i = np.asarray(i, float)
    j = np.asarray(j, float)
    return np.stack([i + off[0], j + off[1]], axis=-1)


# ---------------------------------------------------------------------------
# Image container
# ---------------------------------------------------------------------------


@dataclass
class LinearImage:
    """Linear-light image, row-major float32, samples in [0, inf)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W) or (H, W, 1|3) data, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite samples")
        if self.data.min() < 0:
            raise ValueError("image contains negative samples")

    def luminance(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[:, :, 0]
        return self.data @ np.array([0.2126, 0.7152, 0.0722], np.float32)


# ---------------------------------------------------------------------------
# Digitization resolution arithmetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanDimensions:
    width_px: int
    height_px: int


def scan_dimensions(
    plate_width_in: float,
    plate_height_in: float,
    ppi: float,
    padding_in: float = 0.25,
    pad_width: bool = False,
    pad_height: bool = True,
) -> ScanDimensions:
    """Pixel dimensions needed to scan a plate at a given resolution.

    Padding is counted along the scan (long) axis by default, matching the
    capture convention used when the plates were digitized: a 5 x 7 inch
    plate with 0.25 inch padding at 4400 ppi needs 22,000 x 33,000 px.
    """
    if min(plate_width_in, plate_height_in, ppi) <= 0:
        raise ValueError("plate dimensions and ppi must be positive")
    w = plate_width_in + (2 * padding_in if pad_width else 0.0)
    h = plate_height_in + (2 * padding_in if pad_height else 0.0)
    return ScanDimensions(int(round(w * ppi)), int(round(h * ppi)))
