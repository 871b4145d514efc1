"""Scan linearization, screen-primary profile estimation and patch classification.

The matrix profile models every scanned pixel of a clean screen as
``d + p * x`` where ``d`` is the scan black point, ``p`` one of the three
primary vectors ``r, g, b`` and ``x`` the patch intensity.  Converting a scan
into this screen-primary space turns patch detection into simple per-channel
thresholding and makes patch intensities directly collectable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import BLUE, GREEN, NONE, RED, LinearImage


class TransferError(ValueError):
    """Unsupported or malformed transfer description."""


class ProfileError(RuntimeError):
    """Profile estimation failed; retry with a different sample region."""


@dataclass(frozen=True)
class Transfer:
    """Per-channel transfer description of the raw scan encoding.

    ``kind`` is one of ``linear``, ``gamma`` (decode as ``sample**gamma``) or
    ``lut`` (monotone 1D table mapping encoded [0, 1] to linear).
    """

    kind: str = "linear"
    gamma: float = 1.0
    lut: Optional[np.ndarray] = None

    @staticmethod
    def parse(text: str) -> "Transfer":
        """Parse a CLI-style override such as ``linear`` or ``gamma:2.2``."""
        if text == "linear":
            return Transfer("linear")
        if text.startswith("gamma:"):
            return Transfer("gamma", gamma=float(text.split(":", 1)[1]))
        raise TransferError(f"unsupported transfer override {text!r}")


def linearize(raw: np.ndarray, transfer: Transfer) -> LinearImage:
    """Decode a raw scan (values in [0, 1]) to linear light."""
    data = np.asarray(raw, np.float32)
    if transfer.kind == "linear":
        out = data
    elif transfer.kind == "gamma":
        if transfer.gamma <= 0:
            raise TransferError("gamma must be positive")
        out = np.power(np.clip(data, 0.0, None), transfer.gamma, dtype=np.float32)
    elif transfer.kind == "lut":
        lut = np.asarray(transfer.lut, np.float64)
        if lut is None or lut.ndim != 1 or lut.size < 2:
            raise TransferError("lut transfer needs a 1D table of >= 2 entries")
        if np.any(np.diff(lut) < 0):
            raise TransferError("lut must be monotone non-decreasing")
        x = np.linspace(0.0, 1.0, lut.size)
        out = np.interp(np.clip(data, 0.0, 1.0), x, lut).astype(np.float32)
    else:
        raise TransferError(f"unsupported transfer kind {transfer.kind!r}")
    return LinearImage(np.clip(out, 0.0, None))


# ---------------------------------------------------------------------------
# Matrix profile
# ---------------------------------------------------------------------------


@dataclass
class MatrixProfile:
    """Black point ``d`` plus primary vectors ``r, g, b`` in scan linear RGB."""

    d: np.ndarray
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for name in ("d", "r", "g", "b"):
            v = np.asarray(getattr(self, name), np.float64).reshape(3)
            setattr(self, name, v)

    @property
    def A(self) -> np.ndarray:
        """3x3 primaries matrix with columns r, g, b."""
        return np.stack([self.r, self.g, self.b], axis=1)

    @property
    def M(self) -> np.ndarray:
        """4x4 affine map from screen-primary intensities to scan linear RGB."""
        M = np.eye(4)
        M[:3, :3] = self.A
        M[:3, 3] = self.d
        return M

    @staticmethod
    def from_M(M: np.ndarray) -> "MatrixProfile":
        M = np.asarray(M, np.float64)
        if M.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return MatrixProfile(d=M[:3, 3], r=M[:3, 0], g=M[:3, 1], b=M[:3, 2])

    def validate(self) -> None:
        A = self.A
        if np.linalg.matrix_rank(A, tol=1e-9) < 3:
            raise ProfileError("primaries are collinear; profile matrix singular")

    def forward(self, xyz: np.ndarray) -> np.ndarray:
        """Screen-primary intensities -> scan linear RGB."""
        xyz = np.asarray(xyz, np.float64)
        return xyz @ self.A.T + self.d

    def to_dict(self) -> dict:
        return {
            "d": self.d.tolist(),
            "r": self.r.tolist(),
            "g": self.g.tolist(),
            "b": self.b.tolist(),
            "M": self.M.tolist(),
        }

    @staticmethod
    def from_dict(doc: dict) -> "MatrixProfile":
        return MatrixProfile(
            d=np.array(doc["d"], float),
            r=np.array(doc["r"], float),
            g=np.array(doc["g"], float),
            b=np.array(doc["b"], float),
        )


@dataclass(frozen=True)
class SampleRegion:
    """Axis-aligned sample rectangle, by default centered in the image."""

    cx: float
    cy: float
    width: int
    height: int

    @staticmethod
    def centered(img: LinearImage, frac: float = 0.5) -> "SampleRegion":
        w = max(8, int(img.width * frac))
        h = max(8, int(img.height * frac))
        return SampleRegion(img.width / 2.0, img.height / 2.0, w, h)

    def slices(self, img: LinearImage) -> Tuple[slice, slice]:
        x0 = int(np.clip(round(self.cx - self.width / 2), 0, img.width - 1))
        y0 = int(np.clip(round(self.cy - self.height / 2), 0, img.height - 1))
        x1 = int(np.clip(x0 + self.width, 1, img.width))
        y1 = int(np.clip(y0 + self.height, 1, img.height))
        return slice(y0, y1), slice(x0, x1)


def estimate_profile(
    img: LinearImage,
    region: Optional[SampleRegion] = None,
    fraction: float = 0.10,
    dark_percentile: float = 1.0,
    min_saturation: float = 0.05,
) -> MatrixProfile:
    """Estimate the screen-primary matrix profile from a sample region.

    The black point is a low-percentile estimate of the region; each primary
    direction is the dominant principal direction of the top-``fraction``
    most saturated pixels of its color (saturation = channel value minus the
    mean of the other two, after black subtraction).  Raises
    :class:`ProfileError` when a primary cluster is empty, not saturated
    enough, or when the recovered primaries are nearly collinear, so callers
    can retry with another region.
    """
    if img.channels != 3:
        raise ProfileError("profile estimation needs a 3-channel image")
    ys, xs = (region or SampleRegion.centered(img)).slices(img)
    pix = img.data[ys, xs].reshape(-1, 3).astype(np.float64)
    if pix.shape[0] < 64:
        raise ProfileError("sample region too small")

    d = np.percentile(pix, dark_percentile, axis=0)
    rel = pix - d

    bright = np.percentile(rel.max(axis=1), 90.0)
    if bright <= 0:
        raise ProfileError("sample region carries no signal above black point")

    primaries = []
    for ch in range(3):
        others = [c for c in range(3) if c != ch]
        sat = rel[:, ch] - rel[:, others].mean(axis=1)
        k = max(16, int(sat.size * fraction))
        sel = np.argpartition(sat, -k)[-k:]
        cluster = rel[sel]
        if np.percentile(sat[sel], 50.0) < min_saturation * bright:
            raise ProfileError(
                f"no saturated pixels for channel {ch}; region looks gray"
            )
        # Dominant principal direction through the origin (black point):
        # more robust to intensity spread along the primary than a mean.
        _, _, vt = np.linalg.svd(cluster, full_matrices=False)
        direction = vt[0]
        if direction[ch] < 0:
            direction = -direction
        # Scale so the brightest cluster members sit near intensity 1.
        scale = np.percentile(cluster @ direction, 99.0)
        if scale <= 0:
            raise ProfileError(f"degenerate primary cluster for channel {ch}")
        primaries.append(direction * scale)

    prof = MatrixProfile(d=d, r=primaries[0], g=primaries[1], b=primaries[2])
    unit = [p / np.linalg.norm(p) for p in primaries]
    for i in range(3):
        for j in range(i + 1, 3):
            if abs(np.dot(unit[i], unit[j])) > 0.998:
                raise ProfileError("recovered primaries are nearly collinear")
    prof.validate()
    return prof


def apply_profile(img: LinearImage, profile: MatrixProfile) -> LinearImage:
    """Convert scan linear RGB to screen-primary intensity space.

    A pixel equal to ``d + r*x`` maps to ``(x, 0, 0)`` and likewise for the
    green and blue primaries.  Output may be slightly negative from noise;
    downstream consumers treat it as signed.
    """
    profile.validate()
    inv = np.linalg.inv(profile.A)
    flat = img.data.reshape(-1, 3).astype(np.float64) - profile.d
    out = (flat @ inv.T).astype(np.float32).reshape(img.data.shape)
    im = LinearImage.__new__(LinearImage)
    im.data = out  # bypass the >= 0 convention: profile space is signed
    return im


def unsharp(img: LinearImage, radius: float, amount: float) -> LinearImage:
    """Unsharp mask: ``img + amount * (img - gaussian(img, radius))``, clamped at 0."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if amount == 0.0:
        out = img.data.copy()
    else:
        blurred = ndimage.gaussian_filter(
            img.data, sigma=(radius, radius, 0.0), mode="nearest"
        )
        out = img.data + np.float32(amount) * (img.data - blurred)
    im = LinearImage.__new__(LinearImage)
    im.data = np.clip(out, 0.0, None)
    return im


# ---------------------------------------------------------------------------
# Patch classification
# ---------------------------------------------------------------------------


@dataclass
class ClassMap:
    """Per-pixel patch color labels (NONE / RED / GREEN / BLUE)."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, np.uint8)
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2D array")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def mask(self, color: int) -> np.ndarray:
        return self.labels == color


def classify(img: LinearImage, t: float = 1.5) -> ClassMap:
    """Label each pixel red/green/blue when its channel dominates.

    A pixel ``(r, g, b)`` in screen-primary space is red iff
    ``r > |g + b| * t``, and symmetrically for green and blue.  With noisy
    (signed) inputs and ``t < 1`` several rules can fire at once; ambiguous
    pixels are labeled NONE to keep the flood fill conservative.
    """
    if t <= 0:
        raise ValueError("threshold must be positive")
    if img.channels != 3:
        raise ValueError("classification needs a 3-channel image")
    data = img.data
    t = np.float32(t)
    fires = np.empty(data.shape, bool)
    total = data.sum(axis=2, dtype=np.float32)
    for ch in range(3):
        fires[:, :, ch] = data[:, :, ch] > np.abs(total - data[:, :, ch]) * t
    nfires = fires.sum(axis=2)
    labels = np.zeros(data.shape[:2], np.uint8)
    one = nfires == 1
    # channel index 0/1/2 -> label RED/GREEN/BLUE
    chan = fires.argmax(axis=2)
    labels[one] = (chan[one] + 1).astype(np.uint8)
    return ClassMap(labels)
