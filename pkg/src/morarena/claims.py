"""Ownership claims, commitments, the timestamp ledger and MOR accuracy."""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .models import predict

SCHEMES = ("adi", "ewe", "lib", "dawn", "lukas", "di")

CLAIM_MAGIC = b"MOC1"
CLAIM_VERSION = 1


class ClaimFormatError(ValueError):
    pass


class LedgerError(ValueError):
    pass


def verify_pair(f_out: int, y: int, f_x: int) -> int:
    """nu(F(x), y): 1 iff the model outputs y and y is not the true class."""
    return int(f_out == y and f_x != y)


def mor_accuracy(model, trigger_x, trigger_y, f_values) -> float:
    trigger_y = np.asarray(trigger_y, dtype=np.int64)
    f_values = np.asarray(f_values, dtype=np.int64)
    if len(trigger_y) == 0:
        raise ValueError("MOR accuracy of an empty trigger set is undefined")
    if not (len(trigger_x) == len(trigger_y) == len(f_values)):
        raise ValueError("trigger set and ground truth are not aligned")
    out = predict(model, trigger_x)
    return float(np.mean((out == trigger_y) & (f_values != trigger_y)))


# canonical encoding: every field is tag(1) + length(u64) + payload, in a fixed order

def _field(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _array_payload(a: np.ndarray, kind: str) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8" if kind == "f" else "<i8")
    head = kind.encode() + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _read_array(payload: bytes) -> np.ndarray:
    kind = payload[:1].decode()
    (ndim,) = struct.unpack_from("<B", payload, 1)
    shape = struct.unpack_from(f"<{ndim}Q", payload, 2)
    off = 2 + 8 * ndim
    dtype = {"f": "<f8", "i": "<i8"}.get(kind)
    if dtype is None:
        raise ClaimFormatError(f"unknown array kind {kind!r}")
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) != off + 8 * count:
        raise ClaimFormatError("array payload length mismatch")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(shape)
    return arr.astype(np.float64 if kind == "f" else np.int64)


def _iter_fields(blob: bytes):
    off = 0
    while off < len(blob):
        if off + 9 > len(blob):
            raise ClaimFormatError("truncated field header")
        tag = blob[off:off + 1]
        (n,) = struct.unpack_from("<Q", blob, off + 1)
        off += 9
        if off + n > len(blob):
            raise ClaimFormatError("truncated field payload")
        yield tag, blob[off:off + n]
        off += n


def encode_aux(values: dict) -> bytes:
    """Canonical bytes for a scheme's auxiliary data (sorted keys)."""
    out = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, (bytes, bytearray)):
            payload = b"b" + bytes(v)
        elif isinstance(v, (int, np.integer)):
            payload = b"n" + struct.pack("<q", int(v))
        elif isinstance(v, (float, np.floating)):
            payload = b"r" + struct.pack("<d", float(v))
        else:
            arr = np.asarray(v)
            payload = b"a" + _array_payload(arr, "i" if arr.dtype.kind in "iub" else "f")
        out.append(_field(b"k", key.encode()) + _field(b"v", payload))
    return b"".join(out)


def decode_aux(blob: bytes) -> dict:
    fields = list(_iter_fields(blob))
    if len(fields) % 2:
        raise ClaimFormatError("odd number of aux fields")
    out = {}
    for (kt, key), (vt, payload) in zip(fields[::2], fields[1::2]):
        if kt != b"k" or vt != b"v":
            raise ClaimFormatError("malformed aux entry")
        kind, body = payload[:1], payload[1:]
        if kind == b"b":
            val = body
        elif kind == b"n":
            (val,) = struct.unpack("<q", body)
        elif kind == b"r":
            (val,) = struct.unpack("<d", body)
        elif kind == b"a":
            val = _read_array(body)
        else:
            raise ClaimFormatError(f"unknown aux value kind {kind!r}")
        out[key.decode()] = val
    return out


def canonical_bytes(accuser_id, model_digest, trigger_x, trigger_y, aux, scheme) -> bytes:
    return b"".join([
        _field(b"S", scheme.encode()),
        _field(b"A", accuser_id.encode()),
        _field(b"M", model_digest.encode()),
        _field(b"X", _array_payload(np.asarray(trigger_x), "f")),
        _field(b"Y", _array_payload(np.asarray(trigger_y), "i")),
        _field(b"U", bytes(aux)),
    ])


def commit(accuser_id, model_digest, trigger_x, trigger_y, aux=b"", scheme="adi") -> str:
    body = canonical_bytes(accuser_id, model_digest, trigger_x, trigger_y, aux, scheme)
    return hashlib.sha256(body).hexdigest()


@dataclass(frozen=True)
class OwnershipClaim:
    accuser_id: str
    model_digest: str
    trigger_x: np.ndarray
    trigger_y: np.ndarray
    aux: bytes
    scheme: str
    commitment: str

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ClaimFormatError(f"unknown scheme {self.scheme!r}")
        x = np.asarray(self.trigger_x, dtype=np.float64)
        y = np.asarray(self.trigger_y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ClaimFormatError(f"trigger_x {x.shape} and trigger_y {y.shape} are not aligned")
        object.__setattr__(self, "trigger_x", x)
        object.__setattr__(self, "trigger_y", y)

    @classmethod
    def create(cls, accuser_id, model_digest, trigger_x, trigger_y, aux=b"", scheme="adi"):
        cm = commit(accuser_id, model_digest, trigger_x, trigger_y, aux, scheme)
        return cls(accuser_id, model_digest, trigger_x, trigger_y, aux, scheme, cm)

    def __len__(self):
        return len(self.trigger_y)

    @property
    def aux_values(self) -> dict:
        return decode_aux(self.aux)

    def recompute_commitment(self) -> str:
        return commit(self.accuser_id, self.model_digest, self.trigger_x, self.trigger_y,
                      self.aux, self.scheme)

    def commitment_valid(self) -> bool:
        return self.recompute_commitment() == self.commitment

    def with_triggers(self, trigger_x=None, trigger_y=None) -> "OwnershipClaim":
        """Copy with replaced triggers and the *old* commitment (a tampered claim)."""
        return replace(self,
                       trigger_x=self.trigger_x if trigger_x is None else trigger_x,
                       trigger_y=self.trigger_y if trigger_y is None else trigger_y)

    def to_bytes(self) -> bytes:
        body = canonical_bytes(self.accuser_id, self.model_digest, self.trigger_x,
                               self.trigger_y, self.aux, self.scheme)
        return (CLAIM_MAGIC + struct.pack("<H", CLAIM_VERSION)
                + _field(b"C", bytes.fromhex(self.commitment)) + body)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "OwnershipClaim":
        if blob[:4] != CLAIM_MAGIC:
            raise ClaimFormatError("not a claim container")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != CLAIM_VERSION:
            raise ClaimFormatError(f"unsupported claim version {version}")
        fields = list(_iter_fields(blob[6:]))
        tags = [t for t, _ in fields]
        if tags != [b"C", b"S", b"A", b"M", b"X", b"Y", b"U"]:
            raise ClaimFormatError(f"unexpected field layout {tags}")
        vals = [p for _, p in fields]
        try:
            return cls(
                accuser_id=vals[2].decode(),
                model_digest=vals[3].decode(),
                trigger_x=_read_array(vals[4]),
                trigger_y=_read_array(vals[5]),
                aux=vals[6],
                scheme=vals[1].decode(),
                commitment=vals[0].hex(),
            )
        except (UnicodeDecodeError, struct.error) as exc:
            raise ClaimFormatError(str(exc)) from None

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OwnershipClaim":
        return cls.from_bytes(Path(path).read_bytes())


class Ledger:
    """Append-only (commitment, timestamp) log; timestamps strictly increase."""

    def __init__(self, entries=()):
        self._entries = []
        self._index = {}
        self._lock = threading.Lock()
        for cm, ts in entries:
            self._append(cm, ts)

    def _append(self, cm, ts):
        if cm in self._index:
            raise LedgerError(f"commitment {cm[:16]}... already timestamped")
        if self._entries and ts <= self._entries[-1][1]:
            raise LedgerError("timestamps must strictly increase")
        self._entries.append((cm, ts))
        self._index[cm] = ts

    def timestamp(self, cm: str) -> tuple:
        with self._lock:
            ts = self._entries[-1][1] + 1 if self._entries else 1
            self._append(cm, ts)
            return cm, ts

    def lookup(self, cm: str):
        return self._index.get(cm)

    def __contains__(self, cm):
        return cm in self._index

    def __len__(self):
        return len(self._entries)

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def save(self, path):
        with Path(path).open("w") as fh:
            for cm, ts in self._entries:
                fh.write(json.dumps({"cm": cm, "ts": ts}) + "\n")

    @classmethod
    def load(cls, path) -> "Ledger":
        path = Path(path)
        if not path.exists():
            return cls()
        entries = []
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                entries.append((rec["cm"], int(rec["ts"])))
        return cls(entries)

