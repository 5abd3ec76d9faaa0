"""Binary field container and JSON helpers.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then the arrays listed in ``header["arrays"]`` as contiguous little-endian
complex128 data in that order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .linearized_ops import Background, BlockVector
from .spectral_forms import FormField, Lattice

MAGIC = b"STRMFLD1"
SCHEMA_VERSION = 1
_DTYPE = np.dtype("<c16")


class ContainerError(ValueError):
    """Malformed container; the message names the file and byte offset."""


def lattice_header(lattice: Lattice) -> dict:
    return {"n": lattice.n, "active": list(lattice.active), "periods": list(lattice.periods)}


def lattice_from_header(h: dict) -> Lattice:
    return Lattice(int(h["n"]), tuple(h["active"]), tuple(h["periods"]))


def write_container(path, kind: str, lattice: Lattice, arrays: dict, meta: dict | None = None):
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "lattice": lattice_header(lattice),
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=_DTYPE).tobytes())


def read_container(path) -> tuple:
    """Return ``(header, arrays)``; raises :class:`ContainerError` with file and offset."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: cannot read ({exc})") from exc
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: offset 0: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise ContainerError(f"{path}: offset 8: truncated header length")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: offset 12: malformed header ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ContainerError(f"{path}: offset 12: unsupported schema_version {header.get('schema_version')!r}")
    pos = 12 + hlen
    arrays = {}
    for spec in header.get("arrays", []):
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if pos + nbytes > len(data):
            raise ContainerError(f"{path}: offset {pos}: array {spec['name']!r} truncated "
                                 f"(need {nbytes} bytes, have {len(data) - pos})")
        arrays[spec["name"]] = np.frombuffer(data, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize,
                                             offset=pos).reshape(shape).astype(complex)
        pos += nbytes
    if pos != len(data):
        raise ContainerError(f"{path}: offset {pos}: {len(data) - pos} trailing bytes")
    return header, arrays


def save_form(path, F: FormField, meta: dict | None = None):
    m = {"bidegree": [F.p, F.q], "fiber": list(F.fiber)}
    m.update(meta or {})
    write_container(path, "form", F.lattice, {"comps": F.comps}, m)


def load_form(path) -> FormField:
    header, arrays = read_container(path)
    if header["kind"] != "form":
        raise ContainerError(f"{path}: offset 12: expected a form, found {header['kind']!r}")
    p, q = header["meta"]["bidegree"]
    return FormField(lattice_from_header(header["lattice"]), p, q, arrays["comps"])


def save_metric(path, lattice: Lattice, g: np.ndarray, meta: dict | None = None):
    write_container(path, "metric", lattice, {"g": g}, meta)


def load_metric(path) -> tuple:
    header, arrays = read_container(path)
    if header["kind"] != "metric":
        raise ContainerError(f"{path}: offset 12: expected a metric, found {header['kind']!r}")
    return lattice_from_header(header["lattice"]), arrays["g"]


def save_state(path, bg: Background, alpha: float, z: BlockVector, meta: dict | None = None):
    arrays = {f"u{i}": u for i, u in enumerate(z.ends)}
    arrays["theta"] = z.form.comps
    m = {"alpha_prime": float(alpha), "ranks": [b.rank for b in bg.bundles]}
    m.update(meta or {})
    write_container(path, "state", bg.lattice, arrays, m)


def load_state(path) -> tuple:
    """Return ``(lattice, alpha_prime, ranks, z)``."""
    header, arrays = read_container(path)
    if header["kind"] != "state":
        raise ContainerError(f"{path}: offset 12: expected a state, found {header['kind']!r}")
    lat = lattice_from_header(header["lattice"])
    ranks = header["meta"]["ranks"]
    ends = tuple(arrays[f"u{i}"] for i in range(len(ranks)))
    z = BlockVector(ends, FormField(lat, 2, 2, arrays["theta"]))
    return lat, float(header["meta"]["alpha_prime"]), ranks, z


def to_json_array(a: np.ndarray) -> dict:
    """Small complex arrays as nested real/imag lists."""
    a = np.asarray(a)
    return {"shape": list(a.shape), "real": np.real(a).tolist(), "imag": np.imag(a).tolist()}


def dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
