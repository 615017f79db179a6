"""Bit-exact file formats: RCPP checkpoints, binary PPM/PGM images, metrics CSV."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, Model, _param_specs
from .ccp import COMBINE_MODES

MAGIC = b"RCPP"
VERSION = 1
_INT_FIELDS = ("latent_size", "latent_channels", "text_dim", "image_tokens", "encoder_dim", "condition_dim",
               "shallow_layers", "encoder_depth", "image_size", "heads", "model_dim", "timesteps")


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict) -> bytes:
    """Serialize ``name -> float32 array`` (rank <= 4), sorted by name, with a trailing CRC32."""
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        if arr.ndim > 4:
            raise CheckpointError(f"tensor {name!r} has rank {arr.ndim} > 4")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_tensors(blob: bytes) -> dict:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an RCPP checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or malformed tensor table: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return tensors


def model_tensors(model: Model) -> dict:
    tensors = dict(model.frozen)
    tensors.update(model.trainable)
    cfg = model.cfg
    for f in _INT_FIELDS:
        tensors[f"meta.backbone.{f}"] = np.float32(getattr(cfg, f))
    tensors["meta.backbone.block_resolutions"] = np.asarray(cfg.block_resolutions, np.float32)
    tensors["meta.ccp_mode"] = np.float32(COMBINE_MODES.index(model.ccp_mode))
    return tensors


def model_from_tensors(tensors: dict) -> Model:
    try:
        kw = {f: int(tensors[f"meta.backbone.{f}"]) for f in _INT_FIELDS}
        kw["block_resolutions"] = tuple(int(r) for r in tensors["meta.backbone.block_resolutions"])
        mode = COMBINE_MODES[int(tensors["meta.ccp_mode"])]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks metadata {exc}") from exc
    cfg = BackboneConfig(**kw)
    frozen, trainable = {}, {}
    for name, shape, _, is_trainable in _param_specs(cfg):
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        (trainable if is_trainable else frozen)[name] = tensors[name]
    return Model(cfg, frozen, trainable, ccp_mode=mode)


def save_checkpoint(path, model: Model) -> int:
    """Write ``model``; returns the CRC32 stored in the trailer."""
    blob = encode_tensors(model_tensors(model))
    Path(path).write_bytes(blob)
    return struct.unpack("<I", blob[-4:])[0]


def load_checkpoint(path) -> Model:
    return model_from_tensors(decode_tensors(Path(path).read_bytes()))


# -- images ------------------------------------------------------------------------


def to_bytes(values) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    """3 x H x W image in [0, 1] -> binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got {img.shape}")
    _, h, w = img.shape
    data = to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data)


def write_pgm(path, mask):
    """G x G mask in [0, 1] -> binary P5 of ``round(255 * m)``.

    Nonzero cells are stored as at least 1 so the mask support survives
    quantisation.
    """
    m = np.asarray(mask, np.float64)
    q = to_bytes(m)
    q[(m > 0) & (q == 0)] = 1
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def _read_netpbm(path, magic):
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(blob[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {tokens[0][:2]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return blob[pos + 1 :], w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P6")
    arr = np.frombuffer(data, dtype=np.uint8, count=3 * w * h).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P5")
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w).copy()
