"""On-disk formats.

* ``BCDN`` arrays (images, sinograms, counts, weights): magic ``b"BCDN"``,
  u32 version, u32 ndim, u32 dims, then float32 values, all little-endian,
  row-major.
* Geometry sidecar: JSON with unit-suffixed keys.
* ``BCDM`` models: magic ``b"BCDM"``, u32 version, u32 flags (bit 0:
  heterogeneous layers), u32 L, u32 K, u32 R, f64 beta, then per layer
  u32 K_l, u32 R_l and the float64 ``D`` (R x K), ``E`` (R x K) and
  ``alpha`` (K), all little-endian, row-major.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .denoiser import AutoencoderParams
from .errors import FormatError
from .mbir import SolverConfig
from .physics import Geometry
from .pipeline import BcdNetModel

ARRAY_MAGIC = b"BCDN"
ARRAY_VERSION = 1
MODEL_MAGIC = b"BCDM"
MODEL_VERSION = 1
FLAG_HETEROGENEOUS = 1


def write_array(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = ARRAY_MAGIC + struct.pack("<II", ARRAY_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_array(path) -> np.ndarray:
    """Read a ``BCDN`` file as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != ARRAY_MAGIC:
        raise FormatError(f"{path}: not a BCDN array file")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != ARRAY_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12 + 4 * ndim
    if len(data) < off:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    count = int(np.prod(dims)) if ndim else 1
    if len(data) != off + 4 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(data, dtype="<f4", offset=off, count=count).reshape(dims).astype(np.float64)


def geometry_to_dict(geom: Geometry) -> dict:
    return {
        "image_width_px": geom.image_width,
        "image_height_px": geom.image_height,
        "pixel_size_mm": geom.pixel_size,
        "n_detectors": geom.n_detectors,
        "detector_spacing_mm": geom.detector_spacing,
        "n_views": geom.n_views,
        "angles_deg": [float(np.degrees(a)) for a in geom.angles],
    }


def geometry_from_dict(d: dict) -> Geometry:
    try:
        angles = tuple(np.radians(np.asarray(d["angles_deg"], dtype=np.float64)))
        geom = Geometry(int(d["image_width_px"]), int(d["image_height_px"]),
                        float(d["pixel_size_mm"]), int(d["n_detectors"]),
                        float(d["detector_spacing_mm"]), angles)
    except KeyError as e:
        raise FormatError(f"geometry is missing key {e}") from None
    if "n_views" in d and int(d["n_views"]) != geom.n_views:
        raise FormatError("n_views does not match the angle list")
    return geom


def write_geometry(path, geom: Geometry) -> None:
    with open(path, "w") as fh:
        json.dump(geometry_to_dict(geom), fh, indent=2)
        fh.write("\n")


def read_geometry(path) -> Geometry:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e}") from None
    return geometry_from_dict(d)


def save_model(path, model: BcdNetModel) -> None:
    first = model.layers[0]
    K, R = first.n_filters, first.filter_size
    hetero = any((p.n_filters, p.filter_size) != (K, R) for p in model.layers)
    flags = FLAG_HETEROGENEOUS if hetero else 0
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIIIId", MODEL_VERSION, flags, model.n_layers, K, R, model.beta))
        for p in model.layers:
            fh.write(struct.pack("<II", p.n_filters, p.filter_size))
            for block in (p.decode, p.encode, p.log_thresholds):
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_model(path, solver: SolverConfig | None = None) -> BcdNetModel:
    """Read a ``BCDM`` file; the solver settings are not stored and come from ``solver``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a BCDM model file")
    hsize = struct.calcsize("<IIIIId")
    if len(data) < 4 + hsize:
        raise FormatError(f"{path}: truncated header")
    version, flags, L, K, R, beta = struct.unpack_from("<IIIIId", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + hsize
    layers = []
    for _ in range(L):
        if len(data) < off + 8:
            raise FormatError(f"{path}: truncated layer header")
        Kl, Rl = struct.unpack_from("<II", data, off)
        off += 8
        if (Kl, Rl) != (K, R) and not flags & FLAG_HETEROGENEOUS:
            raise FormatError(f"{path}: layer dims ({Kl}, {Rl}) differ from ({K}, {R})")
        n = 2 * Rl * Kl + Kl
        if len(data) < off + 8 * n:
            raise FormatError(f"{path}: truncated layer payload")
        vals = np.frombuffer(data, dtype="<f8", offset=off, count=n).astype(np.float64)
        off += 8 * n
        D = vals[:Rl * Kl].reshape(Rl, Kl)
        E = vals[Rl * Kl:2 * Rl * Kl].reshape(Rl, Kl)
        layers.append(AutoencoderParams(D, E, vals[2 * Rl * Kl:]))
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after last layer")
    return BcdNetModel(layers, beta, solver or SolverConfig())
