"""On-disk containers: model checkpoints and representation banks.

Both share one layout: 4-byte magic, 1-byte version, u32 little-endian
header length, UTF-8 JSON header, then a raw little-endian float payload.
Checkpoints store float64 parameter blobs; banks store float32.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .data import atomic_write

CKPT_MAGIC = b"STCK"
BANK_MAGIC = b"STRB"
VERSION = 1


class StoreError(ValueError):
    pass


class StaleCacheError(StoreError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def params_hash(params):
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def _pack(magic, header, payload):
    blob = canonical_json(header).encode("utf-8")
    return magic + bytes([VERSION]) + struct.pack("<I", len(blob)) + blob + payload


def _unpack(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != magic:
        raise StoreError(f"{path}: expected magic {magic!r}, got {raw[:4]!r}")
    if len(raw) < 9 or raw[4] != VERSION:
        raise StoreError(f"{path}: truncated or unsupported header")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise StoreError(f"{path}: header truncated")
    header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    return header, raw, 9 + hlen


def save_checkpoint(path, params, meta):
    """Write named float64 parameter blobs plus JSON metadata, atomically."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"meta": meta, "params": entries}
    atomic_write(path, _pack(CKPT_MAGIC, header, b"".join(chunks)))


def load_checkpoint(path):
    header, raw, start = _unpack(path, CKPT_MAGIC)
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = start + e["offset"] + 8 * count
        if end > len(raw):
            raise StoreError(f"{path}: blob {e['name']!r} truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start + e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return header["meta"], params


class RepresentationBank:
    """Frozen-encoder patch representations for every forecasting window.

    ``reps[s, i, j]`` is H_j for node ``i`` in the window starting at
    ``starts[s]``; values are float32.
    """

    def __init__(self, starts, reps, provenance):
        self.starts = np.asarray(starts, dtype=np.int64)
        self.reps = np.asarray(reps, dtype=np.float32)
        self.provenance = dict(provenance)
        self._row = {int(t): k for k, t in enumerate(self.starts)}

    @property
    def shape(self):
        return self.reps.shape

    def __contains__(self, start):
        return int(start) in self._row

    def rows(self, starts):
        try:
            return np.array([self._row[int(t)] for t in starts], dtype=np.intp)
        except KeyError as exc:
            raise StoreError(f"no representations cached for window start {exc.args[0]}") from None

    def lookup(self, node, start):
        """(P, d) representations of one node's window."""
        return self.reps[self.rows([start])[0], node]

    def window(self, starts):
        """(S, N, P, d) block for several window starts."""
        return self.reps[self.rows(starts)]

    def check(self, provenance):
        for key, want in provenance.items():
            have = self.provenance.get(key)
            if have != want:
                raise StaleCacheError(f"representation bank is stale: {key} is {have}, expected {want}")


def save_bank(path, bank):
    header = {"starts": bank.starts.tolist(), "shape": list(bank.reps.shape), "provenance": bank.provenance}
    atomic_write(path, _pack(BANK_MAGIC, header, np.ascontiguousarray(bank.reps, dtype="<f4").tobytes()))


def load_bank(path, expect=None):
    header, raw, start = _unpack(path, BANK_MAGIC)
    shape = header["shape"]
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - start != 4 * count:
        raise StoreError(f"{path}: payload has {len(raw) - start} bytes, expected {4 * count}")
    reps = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
    bank = RepresentationBank(header["starts"], reps, header["provenance"])
    if expect is not None:
        bank.check(expect)
    return bank
