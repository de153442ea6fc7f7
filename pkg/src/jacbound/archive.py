"""Weight archives, CSV datasets and canonical JSON reports.

Archive layout (all integers little-endian)::

    b"GBWT0001" | u32 header_len | header (UTF-8 JSON) | payload (f64le, row-major)

Header layer entries carry ``name, kind, rows, cols, offset, meta`` with
``offset`` in bytes from the start of the payload.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from typing import List, Optional

import numpy as np

from . import __version__
from .errors import (
    ArchiveError,
    BadMagicError,
    DatasetFormatError,
    EmptyArchiveError,
    NonFinitePayloadError,
    OverlappingOffsetsError,
    TruncatedPayloadError,
    ValidationError,
)
from .margin_loss import LabeledDataset
from .relu_network import ConvCirculant, Dense, NetworkSpec, ResNetBlock, WidthChange
from .structured_operators import FilterBank, WidthOp

MAGIC = b"GBWT0001"
ARCHIVE_VERSION = 1
LAYER_KINDS = ("dense", "conv_filters", "resnet_u", "resnet_v", "width_op")


# ---------------------------------------------------------------------------
# weights


def _entries(net: NetworkSpec):
    """``(name, kind, matrix, meta)`` for every stored matrix, in layer order."""
    out = []
    for d, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Dense):
            out.append((f"layer{d}", "dense", layer.W, {}))
        elif isinstance(layer, ConvCirculant):
            b = layer.bank
            meta = {"k": b.k, "s": b.s, "n": b.n, "p_prev": layer.p_prev}
            out.append((f"layer{d}", "conv_filters", b.filters, meta))
        elif isinstance(layer, ResNetBlock):
            out.append((f"layer{d}.U", "resnet_u", layer.U, {"block": d}))
            out.append((f"layer{d}.V", "resnet_v", layer.V, {"block": d}))
        else:
            op = layer.op
            meta = {"op": op.kind, "p": op.p, "s": op.s, "signed": op.signed}
            M = op.coeffs[None, :] if op.coeffs is not None else np.zeros((0, 0))
            out.append((f"layer{d}", "width_op", M, meta))
    return out


def encode_weights(net: NetworkSpec) -> bytes:
    layers, chunks, offset = [], [], 0
    for name, kind, M, meta in _entries(net):
        M = np.ascontiguousarray(M, dtype="<f8")
        layers.append(
            {"name": name, "kind": kind, "rows": int(M.shape[0]), "cols": int(M.shape[1]), "offset": offset, "meta": meta}
        )
        chunks.append(M.tobytes(order="C"))
        offset += M.nbytes
    header = {"version": ARCHIVE_VERSION, "dtype": "f64le", "order": "row_major", "layers": layers}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def write_weights(net: NetworkSpec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_weights(net))


def _read_matrices(blob: bytes):
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise BadMagicError("not a GBWT0001 archive (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise TruncatedPayloadError("header extends past end of file")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"unreadable archive header: {exc}") from exc
    if header.get("dtype") != "f64le" or header.get("order") != "row_major":
        raise ArchiveError("archive must be f64le row_major")
    layers = header.get("layers") or []
    if not layers:
        raise EmptyArchiveError("archive has no layers")
    payload = blob[12 + hlen :]
    spans = []
    mats = []
    for entry in layers:
        try:
            kind, rows, cols, off = entry["kind"], int(entry["rows"]), int(entry["cols"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"malformed layer entry {entry!r}") from exc
        if kind not in LAYER_KINDS:
            raise ArchiveError(f"unknown layer kind {kind!r}")
        if rows < 0 or cols < 0 or off < 0:
            raise ArchiveError("negative size or offset")
        nbytes = rows * cols * 8
        if off + nbytes > len(payload):
            raise TruncatedPayloadError(f"layer {entry.get('name')} runs past the payload end")
        if nbytes:
            spans.append((off, off + nbytes, entry.get("name")))
        M = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        if not np.all(np.isfinite(M)):
            raise NonFinitePayloadError(f"layer {entry.get('name')} has non-finite values")
        mats.append((entry, M.astype(np.float64)))
    spans.sort()
    for (a0, a1, na), (b0, b1, nb) in zip(spans, spans[1:]):
        if b0 < a1:
            raise OverlappingOffsetsError(f"layers {na} and {nb} overlap in the payload")
    return mats


def decode_weights(blob: bytes) -> NetworkSpec:
    mats = _read_matrices(blob)
    layers = []
    i = 0
    while i < len(mats):
        entry, M = mats[i]
        kind, meta = entry["kind"], entry.get("meta") or {}
        if kind == "dense":
            layers.append(Dense(M))
        elif kind == "conv_filters":
            bank = FilterBank(M, int(meta["s"]))
            if bank.k != int(meta["k"]) or bank.n != int(meta["n"]):
                raise ArchiveError("conv_filters meta disagrees with the matrix shape")
            layers.append(ConvCirculant(bank, int(meta["p_prev"])))
        elif kind == "resnet_u":
            if i + 1 >= len(mats) or mats[i + 1][0]["kind"] != "resnet_v":
                raise ArchiveError("resnet_u must be followed by its resnet_v")
            layers.append(ResNetBlock(M, mats[i + 1][1]))
            i += 1
        elif kind == "resnet_v":
            raise ArchiveError("resnet_v without a preceding resnet_u")
        else:
            coeffs = M.ravel() if M.size else None
            layers.append(WidthChange(WidthOp(meta["op"], int(meta["p"]), int(meta["s"]), coeffs, bool(meta.get("signed", False)))))
        i += 1
    return NetworkSpec(tuple(layers))


def read_weights(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())


# ---------------------------------------------------------------------------
# datasets


def read_dataset_csv(path, R_policy: str = "observed", R: Optional[float] = None, n_class: Optional[int] = None) -> LabeledDataset:
    """Label in the first column, features after it.

    ``R_policy="observed"`` sets ``R`` to the largest row norm; ``"declared"``
    uses the given ``R`` and rejects data exceeding it.
    """
    if R_policy not in ("observed", "declared"):
        raise ValidationError("R_policy must be 'observed' or 'declared'")
    if R_policy == "declared" and R is None:
        raise ValidationError("declared R policy needs a value for R")
    labels: List[int] = []
    rows: List[List[float]] = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                vals = [float(c) for c in rec]
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: non-numeric cell") from exc
            if len(vals) < 2:
                raise DatasetFormatError(f"line {lineno}: need a label and at least one feature")
            if rows and len(vals) - 1 != len(rows[0]):
                raise DatasetFormatError(f"line {lineno}: ragged row ({len(vals) - 1} features, expected {len(rows[0])})")
            if vals[0] != math.floor(vals[0]):
                raise DatasetFormatError(f"line {lineno}: label {rec[0]!r} is not an integer")
            labels.append(int(vals[0]))
            rows.append(vals[1:])
    if not rows:
        raise DatasetFormatError("dataset file has no rows")
    y = np.asarray(labels, dtype=np.int64)
    if n_class is None:
        n_class = max(2, int(y.max()) + 1)
    if y.min() < 0 or y.max() >= n_class:
        raise DatasetFormatError(f"labels must lie in [0, {n_class})")
    return LabeledDataset(np.asarray(rows), y, n_class, R if R_policy == "declared" else None)


def write_dataset_csv(data: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for x, y in zip(data.inputs, data.labels):
            w.writerow([int(y)] + [format(float(v), ".17g") for v in x])


# ---------------------------------------------------------------------------
# canonical JSON


def _float_text(v: float) -> str:
    if not math.isfinite(v):
        return "null"
    t = format(v, ".17g")
    return t if any(ch in t for ch in ".en") else t + ".0"


def canonical_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with sorted keys and floats at 17 significant digits; non-finite floats become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {canonical_json(obj[k], indent, _level + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + canonical_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return canonical_json(obj.tolist(), indent, _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _float_text(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def envelope(command: str, config: dict, payload, timestamp: Optional[str] = None) -> dict:
    """Report wrapper; the timestamp is only recorded when supplied so reruns stay byte-identical."""
    env = {"tool": "jacbound", "version": __version__, "command": command, "config": config, "payload": payload}
    if timestamp is not None:
        env["timestamp"] = timestamp
    return env


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(obj) + "\n")
