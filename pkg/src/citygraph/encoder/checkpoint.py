"""Parameter checkpoint files.

Layout::

    8 bytes   magic b"CGENCKPT"
    4 bytes   header length H, little-endian uint32
    H bytes   UTF-8 JSON header: {"version", "config", "blocks": [{"name", "shape", "offset"}]}
    rest      every block's values as little-endian float64, C order, at the given offsets
"""

import json
import struct

import numpy as np

from ..errors import DataError, FormatVersionError, ParseError
from .model import EncoderConfig, EncoderParams

MAGIC = b"CGENCKPT"
VERSION = 1


def save_params(params: EncoderParams, path):
    blocks, offset = [], 0
    for name, arr in params.blocks.items():
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps(
        {"version": VERSION, "config": params.cfg.to_dict(), "blocks": blocks}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in params.blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> EncoderParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ParseError("not an encoder checkpoint (bad magic)", 0)
    if len(data) < 12:
        raise ParseError("checkpoint truncated in header", len(data))
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("malformed checkpoint header", 12) from None
    if header.get("version") != VERSION:
        raise FormatVersionError(f"unsupported checkpoint version {header.get('version')!r}")
    cfg = EncoderConfig.from_dict(header["config"])
    body = data[12 + hlen :]
    blocks = {}
    for b in header["blocks"]:
        shape = tuple(b["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start, end = b["offset"], b["offset"] + 8 * n
        if end > len(body):
            raise ParseError(f"checkpoint truncated in block {b['name']}", 12 + hlen + len(body))
        blocks[b["name"]] = np.frombuffer(body[start:end], dtype="<f8").reshape(shape).astype(np.float64)
    params = EncoderParams(cfg, blocks).validate()
    bad = [k for k, v in blocks.items() if not np.all(np.isfinite(v))]
    if bad:
        raise DataError(f"checkpoint has non-finite values in {bad}")
    return params
