"""Binary model checkpoints.

Layout (little-endian)::

    b"HSCN"  u16 version
    u32 header length, UTF-8 JSON header (architecture arguments)
    u32 tensor count, then per tensor:
        u16 name length, name, u16 kind length, kind, u8 ndim, u32 dims[ndim]
    float32 parameter blob, tensors in table order
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from .network import Model, build_network

MAGIC = b"HSCN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _header(model: Model) -> dict:
    spec = model.spec
    header = {"arch": spec.arch, "scale": spec.scale, "input_res": spec.input_res}
    if spec.arch == "mini_unet":
        header.update(
            unet_depth=spec.unet_depth,
            unet_filters=spec.unet_filters * spec.scale,
            unet_channels=spec.input_channels[0],
        )
    header.update(spec.extra)
    return header


def _str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def save_model(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    header = json.dumps(_header(model), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    params = model.parameters()
    kinds = [layer.kind for _, layer in model.named_layers() for _ in layer.params]
    buf.write(struct.pack("<I", len(params)))
    for (name, p), kind in zip(params, kinds):
        _str(buf, name)
        _str(buf, kind)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
    for _, p in params:
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def _read(buf: io.BytesIO, n: int) -> bytes:
    out = buf.read(n)
    if len(out) != n:
        raise CheckpointError("truncated checkpoint")
    return out


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an HSCN checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    buf = io.BytesIO(body)
    _read(buf, 4)
    (version,) = struct.unpack("<H", _read(buf, 2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<I", _read(buf, 4))
    header = json.loads(_read(buf, hlen).decode())
    kwargs = {k: header[k] for k in ("unet_depth", "unet_filters", "unet_channels") if k in header}
    spec = build_network(header["arch"], header["scale"], header["input_res"], **kwargs)
    model = Model(spec, seed=0, dtype=np.float32)

    (count,) = struct.unpack("<I", _read(buf, 4))
    table = []
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, ln).decode()
        (lk,) = struct.unpack("<H", _read(buf, 2))
        kind = _read(buf, lk).decode()
        (ndim,) = struct.unpack("<B", _read(buf, 1))
        dims = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        table.append((name, kind, dims))
    params = model.parameters()
    if len(table) != len(params):
        raise CheckpointError(f"{path}: {len(table)} tensors, architecture expects {len(params)}")
    for (name, _, dims), (pname, p) in zip(table, params):
        if name != pname or tuple(dims) != p.shape:
            raise CheckpointError(f"{path}: tensor {name}{dims} does not match {pname}{p.shape}")
        p[...] = np.frombuffer(_read(buf, 4 * p.size), dtype="<f4").reshape(p.shape)
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes after parameter blob")
    return model
