"""Small container format for arrays plus a JSON header.

Layout::

    magic (8 bytes) | version (uint32 LE) | header length (uint64 LE)
    | header (UTF-8 JSON) | array blobs, concatenated

The header lists each array's name, dtype, shape and byte length so the
reader can tell a truncated payload from a corrupt one.
"""

import json
import struct

import numpy as np

from notedx.errors import CorruptFileError, TruncatedFileError, VersionMismatchError

_PREFIX = struct.Struct("<8sIQ")


def write_container(path, magic, version, meta, arrays):
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "nbytes": len(data)})
        blobs.append(data)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic, version):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        if raw and not magic.startswith(raw[: len(magic)]):
            raise CorruptFileError(f"{path}: bad magic bytes")
        raise TruncatedFileError(f"{path}: file ends inside the fixed header")
    got_magic, got_version, header_len = _PREFIX.unpack_from(raw)
    if got_magic != magic:
        raise CorruptFileError(f"{path}: bad magic bytes")
    if got_version != version:
        raise VersionMismatchError(f"{path}: format version {got_version}, expected {version}")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise TruncatedFileError(f"{path}: file ends inside the JSON header")
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    offset = start + header_len
    arrays = {}
    for entry in header["arrays"]:
        end = offset + entry["nbytes"]
        if end > len(raw):
            raise TruncatedFileError(f"{path}: array {entry['name']!r} is truncated")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(raw[offset:end], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
        offset = end
    if offset != len(raw):
        raise CorruptFileError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["meta"], arrays
