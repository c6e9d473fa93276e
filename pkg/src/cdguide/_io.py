"""Binary container shared by parameter and trajectory files.

Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, then the
arrays listed in ``header["arrays"]`` as raw little-endian float64 in order.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CDGBLOB\x00"


class FormatError(ValueError):
    pass


def write_blob(path, kind, version, header, arrays):
    header = dict(header)
    header["kind"] = kind
    header["version"] = version
    header["arrays"] = [
        {"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()
    ]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_blob(path, kind, version):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError(f"{path}: not a cdguide binary file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    if header.get("version") != version:
        raise FormatError(
            f"{path}: format version {header.get('version')!r} does not match "
            f"supported version {version!r}"
        )
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise FormatError(
                f"{path}: truncated payload for {spec['name']!r} "
                f"(need {nbytes} bytes, {len(data) - offset} left)"
            )
        arrays[spec["name"]] = (
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return header, arrays
