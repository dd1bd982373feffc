"""Binary and text formats for grids, masks, images, weights and poses.

All binary headers are little-endian and start with a 4-byte magic and a
uint16 version. See ``docs/formats.md`` for the byte layouts.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .geometry import load_poses, save_poses  # noqa: F401  (re-exported)
from .scene import DensityMLP, DenseGrid, Mask3D

VERSION = 1
GRID_MAGIC = b"DGRD"
MASK_MAGIC = b"MSK3"
IMAGE_MAGIC = b"DIMG"
MLP_FORMAT = "drrpose-mlp"

_GRID_HEADER = struct.Struct("<4sH3I6dd")
_MASK_HEADER = struct.Struct("<4sH3I6dd")
_IMAGE_HEADER = struct.Struct("<4sHIIB")
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """Bad magic, unsupported version, or truncated payload."""


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _check_header(buf: bytes, header: struct.Struct, magic: bytes, path):
    if len(buf) < header.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    fields = header.unpack_from(buf)
    if fields[0] != magic:
        raise FormatError(f"{path}: bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != VERSION:
        raise FormatError(f"{path}: unsupported version {fields[1]}")
    return fields


def save_grid(path, grid: DenseGrid) -> None:
    nx, ny, nz = grid.dims
    head = _GRID_HEADER.pack(GRID_MAGIC, VERSION, nx, ny, nz, *grid.extent.ravel(), grid.value_scale)
    Path(path).write_bytes(head + grid.data.astype("<f4").tobytes(order="C"))


def load_grid(path) -> DenseGrid:
    buf = _read(path)
    _, _, nx, ny, nz, *rest = _check_header(buf, _GRID_HEADER, GRID_MAGIC, path)
    extent, scale = np.asarray(rest[:6]).reshape(3, 2), rest[6]
    need = _GRID_HEADER.size + 4 * nx * ny * nz
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=_GRID_HEADER.size).reshape(nz, ny, nx)
    return DenseGrid(data.astype(np.float32), extent, scale)


def save_mask(path, mask: Mask3D) -> None:
    nx, ny, nz = mask.dims
    head = _MASK_HEADER.pack(MASK_MAGIC, VERSION, nx, ny, nz, *mask.extent.ravel(), mask.dilation)
    Path(path).write_bytes(head + np.packbits(mask.data.ravel(), bitorder="little").tobytes())


def load_mask(path) -> Mask3D:
    buf = _read(path)
    _, _, nx, ny, nz, *rest = _check_header(buf, _MASK_HEADER, MASK_MAGIC, path)
    n = nx * ny * nz
    need = _MASK_HEADER.size + (n + 7) // 8
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=_MASK_HEADER.size),
                         count=n, bitorder="little")
    return Mask3D(bits.astype(bool).reshape(nz, ny, nx), np.asarray(rest[:6]).reshape(3, 2), rest[6])


def _image_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().numpy()
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("images must be 2-D")
    return arr


def save_image_raw(path, img) -> None:
    """Raw dump; float32 arrays stay 32-bit, anything else is stored as float64."""
    arr = _image_array(img)
    code = 1 if arr.dtype == np.float32 else 2
    h, w = arr.shape
    Path(path).write_bytes(_IMAGE_HEADER.pack(IMAGE_MAGIC, VERSION, w, h, code)
                           + arr.astype(_DTYPE_CODES[code]).tobytes(order="C"))


def load_image_raw(path) -> np.ndarray:
    buf = _read(path)
    _, _, w, h, code = _check_header(buf, _IMAGE_HEADER, IMAGE_MAGIC, path)
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown sample type {code}")
    dt = _DTYPE_CODES[code]
    need = _IMAGE_HEADER.size + dt.itemsize * w * h
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=dt, offset=_IMAGE_HEADER.size).reshape(h, w).astype(dt.newbyteorder("="))


def save_pgm(path, img, bits: int = 8) -> None:
    """Binary PGM (P5) of an image in ``[0, 1]``; 16-bit samples are big-endian."""
    if bits not in (8, 16):
        raise ValueError("PGM depth must be 8 or 16 bits")
    arr = np.clip(_image_array(img).astype(np.float64), 0.0, 1.0)
    top = 255 if bits == 8 else 65535
    q = np.rint(arr * top).astype(">u2" if bits == 16 else np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{top}\n".encode() + q.tobytes())


def load_pgm(path) -> np.ndarray:
    buf = _read(path)
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, top = int(parts[1]), int(parts[2]), int(parts[3])
    dt = np.uint8 if top < 256 else np.dtype(">u2")
    data = parts[4]
    if len(data) < w * h * np.dtype(dt).itemsize:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data[: w * h * np.dtype(dt).itemsize], dtype=dt).reshape(h, w) / top


def mlp_to_dict(net: DensityMLP) -> dict:
    layers = []
    for k, lin in enumerate(list(net.layers) + [net.head]):
        entry = {
            "shape": list(lin.weight.shape),
            "weight": lin.weight.detach().reshape(-1).tolist(),
            "bias": lin.bias.detach().tolist(),
            "activation": "relu",
            "norm": None,
        }
        if net.norm and k < len(net.layers):
            bn = net.norms[k]
            entry["norm"] = {
                "kind": "batch",
                "scale": bn.weight.detach().tolist(),
                "shift": bn.bias.detach().tolist(),
                "running_mean": bn.running_mean.tolist(),
                "running_var": bn.running_var.tolist(),
                "eps": bn.eps,
                "momentum": bn.momentum,
            }
        layers.append(entry)
    return {"format": MLP_FORMAT, "version": VERSION, "in_width": net.in_width,
            "hidden": list(net.hidden), "skips": list(net.skips), "norm": net.norm,
            "layers": layers}


def mlp_from_dict(doc: dict) -> DensityMLP:
    if doc.get("format") != MLP_FORMAT:
        raise FormatError(f"not an MLP weights document: format={doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported MLP weights version {doc.get('version')}")
    net = DensityMLP(doc["in_width"], doc["hidden"], doc["skips"], doc["norm"])
    linears = list(net.layers) + [net.head]
    if len(doc["layers"]) != len(linears):
        raise FormatError("layer count does not match the declared architecture")
    with torch.no_grad():
        for k, (lin, entry) in enumerate(zip(linears, doc["layers"])):
            if list(lin.weight.shape) != entry["shape"]:
                raise FormatError(f"layer {k}: shape {entry['shape']} != {list(lin.weight.shape)}")
            lin.weight.copy_(torch.tensor(entry["weight"], dtype=lin.weight.dtype).reshape(lin.weight.shape))
            lin.bias.copy_(torch.tensor(entry["bias"], dtype=lin.bias.dtype))
            if entry["norm"] is not None:
                bn, nd = net.norms[k], entry["norm"]
                bn.weight.copy_(torch.tensor(nd["scale"], dtype=bn.weight.dtype))
                bn.bias.copy_(torch.tensor(nd["shift"], dtype=bn.bias.dtype))
                bn.running_mean.copy_(torch.tensor(nd["running_mean"], dtype=bn.running_mean.dtype))
                bn.running_var.copy_(torch.tensor(nd["running_var"], dtype=bn.running_var.dtype))
                bn.eps, bn.momentum = nd["eps"], nd["momentum"]
    return net


def save_mlp(path, net: DensityMLP) -> None:
    Path(path).write_text(json.dumps(mlp_to_dict(net), indent=1))


def load_mlp(path) -> DensityMLP:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed weights document ({exc})") from exc
    try:
        return mlp_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete weights document ({exc})") from exc
