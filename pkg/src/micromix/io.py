"""Binary tensor/quantized files and JSON channel plans.

TensorFile (``.mxtf``), little-endian::

    "MXTF" | version u16 | dtype u8 (0 = float32) | rank u8 | dims rank*u64 | payload

QuantFile (``.mxqt``), little-endian::

    "MXQT" | version u16 | kind u8 (0 = activation, 1 = weight)
    | layer_id: u32 length + utf-8 | plan: u32 length + utf-8 JSON
    | part count u8, then per part:
        format code u8 | rows u64 | cols u64 | per block: scale u8 + 32 code bytes

Weight parts are stored ``out_features x n_g`` so blocks run along K.
Writes go to a temporary file in the target directory and are renamed into
place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from micromix.calib import CalibStats, ChannelPlan
from micromix.error_model import ThresholdSet
from micromix.errors import FormatError, ParseError
from micromix.formats import BLOCK_SIZE, format_from_code
from micromix.gemm import MixedActivation, QuantizedLinear
from micromix.mx import MxTensor

TENSOR_MAGIC = b"MXTF"
QUANT_MAGIC = b"MXQT"
VERSION = 1
DTYPE_F32 = 0
KIND_ACTIVATION = 0
KIND_WEIGHT = 1

PLAN_FIELDS = ("layer_id", "num_channels", "permutation", "n4", "n6", "n8", "p4", "p6", "p8", "tensor_max")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Cursor over a byte buffer that reports offsets on failure."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, field: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ParseError(f"{self.what}: truncated while reading {field}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, field: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field))[0]

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise ParseError(f"{self.what}: {len(self.data) - self.pos} trailing bytes", self.pos)


# -- tensors ---------------------------------------------------------------


def encode_tensor(values) -> bytes:
    arr = np.asarray(values, dtype=np.float32)
    header = TENSOR_MAGIC + struct.pack("<HBB", VERSION, DTYPE_F32, arr.ndim)
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return header + np.ascontiguousarray(arr).astype("<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    r = _Reader(data, "tensor file")
    if r.take(4, "magic") != TENSOR_MAGIC:
        raise ParseError("tensor file: bad magic, expected b'MXTF'", 0)
    version = r.unpack("<H", "version")
    if version != VERSION:
        raise ParseError(f"tensor file: unsupported version {version}", 4)
    dtype_at = r.pos
    dtype = r.unpack("<B", "dtype")
    if dtype != DTYPE_F32:
        raise ParseError(f"tensor file: unknown dtype code {dtype}", dtype_at)
    rank = r.unpack("<B", "rank")
    dims = tuple(r.unpack("<Q", f"dim {i}") for i in range(rank))
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = r.take(count * 4, "payload")
    r.expect_end()
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def write_tensor(path, values) -> None:
    atomic_write(path, encode_tensor(values))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- plans -----------------------------------------------------------------


def plan_to_dict(plan: ChannelPlan, stats: CalibStats | None = None) -> dict:
    th = plan.thresholds
    out = {
        "layer_id": plan.layer_id,
        "num_channels": plan.num_channels,
        "permutation": [int(i) for i in plan.permutation],
        "n4": plan.n4,
        "n6": plan.n6,
        "n8": plan.n8,
        "p4": plan.p4,
        "p6": plan.p6,
        "p8": plan.p8,
        "tensor_max": th.tensor_max,
        "thresholds": {"t4": th.t4, "t6": th.t6, "int8_ceiling": th.int8_ceiling},
    }
    if stats is not None:
        out["calibration"] = {
            "num_samples": stats.num_samples,
            "num_rows": stats.num_rows,
            "channel_abs_mean": [float(v) for v in stats.channel_abs_mean],
            "channel_abs_max": [float(v) for v in stats.channel_abs_max],
        }
    return out


def plan_from_dict(d: dict) -> ChannelPlan:
    missing = [k for k in PLAN_FIELDS if k not in d]
    if missing:
        raise ParseError(f"plan JSON missing fields {missing}")
    try:
        th = d.get("thresholds", {})
        tset = ThresholdSet(float(d["tensor_max"]), float(th["t4"]), float(th["t6"]), float(th["int8_ceiling"]))
        return ChannelPlan(
            str(d["layer_id"]),
            int(d["num_channels"]),
            np.asarray(d["permutation"], dtype=np.int64),
            int(d["n4"]),
            int(d["n6"]),
            int(d["n8"]),
            float(d["p4"]),
            float(d["p6"]),
            float(d["p8"]),
            tset,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid plan JSON: {exc}") from exc


def stats_from_plan_dict(d: dict) -> CalibStats | None:
    cal = d.get("calibration")
    if cal is None:
        return None
    return CalibStats(
        str(d["layer_id"]),
        int(d["num_channels"]),
        num_samples=int(cal["num_samples"]),
        num_rows=int(cal["num_rows"]),
        channel_abs_mean=np.asarray(cal["channel_abs_mean"], dtype=np.float64),
        channel_abs_max=np.asarray(cal["channel_abs_max"], dtype=np.float64),
        tensor_max=float(d["tensor_max"]),
    )


def dumps_plan(plan: ChannelPlan, stats: CalibStats | None = None) -> str:
    return json.dumps(plan_to_dict(plan, stats), indent=1) + "\n"


def write_plan(path, plan: ChannelPlan, stats: CalibStats | None = None) -> None:
    atomic_write(path, dumps_plan(plan, stats).encode())


def load_plan_dict(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", exc.pos) from exc


def read_plan(path) -> ChannelPlan:
    return plan_from_dict(load_plan_dict(path))


# -- quantized tensors -----------------------------------------------------


def _encode_part(part: MxTensor) -> bytes:
    rows, cols = part.shape
    head = struct.pack("<BQQ", part.fmt.code, rows, cols)
    nblk = cols // BLOCK_SIZE
    body = np.empty((rows, nblk, 1 + BLOCK_SIZE), dtype=np.uint8)
    body[:, :, 0] = part.scales
    body[:, :, 1:] = part.codes.reshape(rows, nblk, BLOCK_SIZE)
    return head + body.tobytes()


def _decode_part(r: _Reader) -> MxTensor:
    fmt_at = r.pos
    code = r.unpack("<B", "format code")
    try:
        fmt = format_from_code(code)
    except FormatError:
        raise FormatError(f"quant file: unknown format code {code} (at byte offset {fmt_at})") from None
    rows = r.unpack("<Q", "rows")
    cols_at = r.pos
    cols = r.unpack("<Q", "cols")
    if cols % BLOCK_SIZE:
        raise ParseError(f"quant file: part width {cols} is not a multiple of {BLOCK_SIZE}", cols_at)
    nblk = cols // BLOCK_SIZE
    body_at = r.pos
    raw = np.frombuffer(r.take(rows * nblk * (1 + BLOCK_SIZE), "blocks"), dtype=np.uint8)
    raw = raw.reshape(rows, nblk, 1 + BLOCK_SIZE)
    scales = raw[:, :, 0].copy()
    codes = raw[:, :, 1:].reshape(rows, cols).copy()
    if np.any(scales == 0xFF):
        first = int(np.flatnonzero(scales.reshape(-1) == 0xFF)[0])
        raise ParseError("quant file: E8M0 scale byte 0xFF", body_at + first * (1 + BLOCK_SIZE))
    if np.any(codes >= fmt.n_codes):
        raise ParseError(f"quant file: code out of range for {fmt.name}", body_at)
    return MxTensor(fmt, codes, scales)


def encode_quant(obj: MixedActivation | QuantizedLinear, plan: ChannelPlan) -> bytes:
    if isinstance(obj, QuantizedLinear):
        kind, parts, layer_id = KIND_WEIGHT, obj.weight_parts, obj.plan.layer_id
    else:
        kind, parts, layer_id = KIND_ACTIVATION, obj.parts, obj.layer_id
    lid = layer_id.encode()
    plan_json = json.dumps(plan_to_dict(plan), separators=(",", ":")).encode()
    out = [QUANT_MAGIC, struct.pack("<HB", VERSION, kind)]
    out += [struct.pack("<I", len(lid)), lid, struct.pack("<I", len(plan_json)), plan_json]
    out.append(struct.pack("<B", len(parts)))
    out += [_encode_part(p) for p in parts]
    return b"".join(out)


def decode_quant(data: bytes) -> tuple[MixedActivation | QuantizedLinear, ChannelPlan]:
    """Parse a quant file into its payload and embedded plan."""
    r = _Reader(data, "quant file")
    if r.take(4, "magic") != QUANT_MAGIC:
        raise ParseError("quant file: bad magic, expected b'MXQT'", 0)
    version = r.unpack("<H", "version")
    if version != VERSION:
        raise ParseError(f"quant file: unsupported version {version}", 4)
    kind_at = r.pos
    kind = r.unpack("<B", "kind")
    if kind not in (KIND_ACTIVATION, KIND_WEIGHT):
        raise ParseError(f"quant file: unknown kind {kind}", kind_at)
    layer_id = r.take(r.unpack("<I", "layer_id length"), "layer_id").decode()
    plan_at = r.pos + 4
    plan_bytes = r.take(r.unpack("<I", "plan length"), "plan JSON")
    try:
        plan = plan_from_dict(json.loads(plan_bytes))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"quant file: embedded plan is not valid JSON ({exc})", plan_at) from exc
    count_at = r.pos
    count = r.unpack("<B", "part count")
    if count != 3:
        raise ParseError(f"quant file: expected 3 parts, found {count}", count_at)
    parts = tuple(_decode_part(r) for _ in range(count))
    r.expect_end()
    if plan.layer_id != layer_id:
        raise ParseError(f"quant file: layer_id {layer_id!r} differs from plan {plan.layer_id!r}", 7)
    if tuple(p.cols for p in parts) != plan.counts:
        raise ParseError(f"quant file: part widths do not match plan counts {plan.counts}", count_at)
    if kind == KIND_WEIGHT:
        return QuantizedLinear(plan, parts), plan
    return MixedActivation(layer_id, parts), plan


def write_quant(path, obj: MixedActivation | QuantizedLinear, plan: ChannelPlan) -> None:
    atomic_write(path, encode_quant(obj, plan))


def read_quant(path) -> tuple[MixedActivation | QuantizedLinear, ChannelPlan]:
    return decode_quant(Path(path).read_bytes())

