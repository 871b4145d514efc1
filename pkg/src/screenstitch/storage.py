"""Deterministic sidecar containers and image file input/output.

Sidecars are versioned binary blobs: magic, a canonical JSON header carrying
metadata plus per-array descriptors with SHA-256 checksums, then raw ``.npy``
payloads.  Writing the same data always produces identical bytes, which the
pipeline's resume logic relies on.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import tifffile
from PIL import Image

from .analysis import PatchGrid
from .mesh import LensModel, MeshTransform
from .mosaic import MosaicImage

MAGIC = b"SCRSTCH1"
FORMAT_VERSION = 1


class StorageError(RuntimeError):
    """Corrupt, truncated or version-incompatible sidecar."""


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_sidecar(path, kind: str, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    """Write a deterministic, checksummed binary sidecar."""
    blobs = []
    descs = []
    offset = 0
    for name in sorted(arrays):
        buf = io.BytesIO()
        np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]),
                                  version=(1, 0), allow_pickle=False)
        raw = buf.getvalue()
        descs.append(
            {
                "name": name,
                "offset": offset,
                "length": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = _canon_json(
        {"format": FORMAT_VERSION, "kind": kind, "meta": meta, "arrays": descs}
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_sidecar(path, expect_kind: Optional[str] = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Read and verify a sidecar; raises :class:`StorageError` on damage."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise StorageError(f"{path}: not a sidecar file")
            hlen = int.from_bytes(fh.read(8), "little")
            try:
                header = json.loads(fh.read(hlen).decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise StorageError(f"{path}: corrupt header: {exc}") from exc
            if header.get("format") != FORMAT_VERSION:
                raise StorageError(
                    f"{path}: sidecar format {header.get('format')} "
                    f"!= supported {FORMAT_VERSION}"
                )
            if expect_kind is not None and header.get("kind") != expect_kind:
                raise StorageError(
                    f"{path}: sidecar kind {header.get('kind')!r}, "
                    f"expected {expect_kind!r}"
                )
            arrays = {}
            for desc in header["arrays"]:
                raw = fh.read(desc["length"])
                if hashlib.sha256(raw).hexdigest() != desc["sha256"]:
                    raise StorageError(f"{path}: checksum mismatch in {desc['name']!r}")
                arrays[desc["name"]] = np.lib.format.read_array(
                    io.BytesIO(raw), allow_pickle=False
                )
        return header["meta"], arrays
    except OSError as exc:
        raise StorageError(f"{path}: {exc}") from exc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Domain object sidecars
# ---------------------------------------------------------------------------


def save_grid(pg: PatchGrid, path) -> None:
    meta = {
        "i0": pg.i0,
        "j0": pg.j0,
        "image_size": list(pg.image_size),
    }
    arrays = {
        "site_offsets": pg.site_offsets,
        "site_colors": pg.site_colors,
        "measured": pg.measured,
        "centers": pg.centers,
        "valid": pg.valid,
        "weight": pg.weight,
        "cell_status": pg.cell_status,
        "in_image": pg.in_image,
        "global_affine": pg.global_affine,
    }
    write_sidecar(path, "patch-grid", meta, arrays)


def load_grid(path) -> PatchGrid:
    meta, arrays = read_sidecar(path, "patch-grid")
    return PatchGrid(
        i0=int(meta["i0"]),
        j0=int(meta["j0"]),
        image_size=tuple(meta["image_size"]),
        **{k: arrays[k] for k in (
            "site_offsets", "site_colors", "measured", "centers",
            "valid", "weight", "cell_status", "in_image", "global_affine",
        )},
    )


def save_mesh(mesh: MeshTransform, path, residual_stats: Optional[dict] = None) -> None:
    meta = {"lens": mesh.lens.to_dict()}
    if residual_stats:
        meta["residuals"] = residual_stats
    write_sidecar(
        path, "mesh-transform", meta,
        {
            "node_u": mesh.node_u,
            "node_v": mesh.node_v,
            "H": mesh.H,
            "solved": mesh.solved,
        },
    )


def load_mesh(path) -> MeshTransform:
    meta, arrays = read_sidecar(path, "mesh-transform")
    return MeshTransform(
        node_u=arrays["node_u"],
        node_v=arrays["node_v"],
        H=arrays["H"],
        solved=arrays["solved"],
        lens=LensModel.from_dict(meta["lens"]),
    )


def save_mosaic(m: MosaicImage, tiff_path, json_path) -> None:
    """Mosaic as stacked 16-bit single-channel TIFF planes plus JSON layout.

    Planes 0..S-1 are quantized intensities, planes S..2S-1 the validity
    masks.  The quantization scale is recorded in the JSON sidecar.
    """
    S = m.n_sites
    peak = float(m.values.max()) if m.values.size else 0.0
    scale = 65535.0 / peak if peak > 0 else 1.0
    quant = np.clip(np.round(m.values.astype(np.float64) * scale), 0, 65535).astype(np.uint16)
    planes = np.concatenate(
        [np.moveaxis(quant, 2, 0), np.moveaxis(m.valid, 2, 0).astype(np.uint16) * 65535]
    )
    tifffile.imwrite(tiff_path, planes)
    layout = {
        "schema": "screenstitch-mosaic/1",
        "i0": m.i0,
        "j0": m.j0,
        "n_sites": S,
        "scale": scale,
        "planes": "intensity then validity",
        "site_offsets": m.site_offsets.tolist(),
        "site_colors": m.site_colors.tolist(),
    }
    with open(json_path, "w") as fh:
        json.dump(layout, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mosaic(tiff_path, json_path) -> MosaicImage:
    with open(json_path) as fh:
        layout = json.load(fh)
    if layout.get("schema") != "screenstitch-mosaic/1":
        raise StorageError(f"{json_path}: unknown mosaic schema")
    planes = tifffile.imread(tiff_path)
    S = int(layout["n_sites"])
    if planes.ndim != 3 or planes.shape[0] != 2 * S:
        raise StorageError(f"{tiff_path}: expected {2*S} planes")
    values = np.moveaxis(planes[:S].astype(np.float32), 0, 2) / np.float32(layout["scale"])
    valid = np.moveaxis(planes[S:], 0, 2) > 32767
    values[~valid] = 0.0
    return MosaicImage(
        i0=int(layout["i0"]),
        j0=int(layout["j0"]),
        site_offsets=np.asarray(layout["site_offsets"], np.float64),
        site_colors=np.asarray(layout["site_colors"], np.int64),
        values=values,
        valid=valid,
    )


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read an 8/16-bit TIFF or PNG as float32 in [0, 1] (H, W, C)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        arr = tifffile.imread(path)
    elif suffix == ".png":
        arr = np.asarray(Image.open(path))
    else:
        raise StorageError(f"unsupported image format {suffix!r}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    raise StorageError(f"{path}: unsupported sample type {arr.dtype}")


def write_image(path, data: np.ndarray, bits: int = 16) -> None:
    """Write float data in [0, 1] (or integer data as-is) to TIFF/PNG."""
    path = Path(path)
    if np.issubdtype(data.dtype, np.floating):
        peak = 2**bits - 1
        data = np.round(np.clip(data, 0.0, 1.0) * peak).astype(
            np.uint16 if bits == 16 else np.uint8
        )
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        tifffile.imwrite(path, data)
    elif suffix == ".png":
        arr = data
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        Image.fromarray(arr).save(path)
    else:
        raise StorageError(f"unsupported image format {suffix!r}")
