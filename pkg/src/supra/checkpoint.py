"""SUPRACP1 named-tensor checkpoints and softmax -> linear-attention surgery.

File layout (all integers little-endian)::

    magic        8 bytes   b"SUPRACP1"
    n_records    u32
    records      n_records x (u32 byte length, UTF-8 text)
    payload_len  u64
    payload      payload_len bytes of raw little-endian tensor data

Record 0 is ``meta<TAB><json>`` holding the model config and surgery metadata.
Every other record is ``tensor<TAB>name<TAB>dtype<TAB>d0,d1,...<TAB>offset<TAB>nbytes``
with ``dtype`` in {f32, f64} and ``offset`` relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, decay_schedule
from .model import Model, ModelConfig, param_shapes
from .tensor import Tensor

MAGIC = b"SUPRACP1"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class DtypeError(IntegrityError):
    pass


class SurgeryError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model) -> Checkpoint:
        meta = dict(model.meta)
        meta["new_params"] = sorted(model.new_params)
        return cls(model.cfg, {k: v.data.copy() for k, v in model.params.items()}, meta)

    def to_model(self, dtype=None) -> Model:
        params = {k: Tensor(v if dtype is None else v.astype(dtype), requires_grad=True, name=k)
                  for k, v in self.tensors.items()}
        meta = {k: v for k, v in self.meta.items() if k != "new_params"}
        return Model(self.config, params, frozenset(self.meta.get("new_params", [])), meta)

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def validate(self) -> None:
        expected = param_shapes(self.config)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise IntegrityError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shp in expected.items():
            if self.tensors[name].shape != shp:
                raise IntegrityError(f"{name}: shape {self.tensors[name].shape} != expected {shp}")


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise DtypeError(f"unsupported dtype {arr.dtype}")


def save(path: str | Path, ckpt: Checkpoint, dtype: str | None = None) -> None:
    """Write ``ckpt``; ``dtype`` ('f32'/'f64') casts every tensor, None keeps each tensor's own."""
    ckpt.validate()
    meta = dict(ckpt.meta)
    meta["config"] = ckpt.config.to_dict()
    records = [b"meta\t" + json.dumps(meta, sort_keys=True).encode("utf-8")]
    blobs, offset = [], 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype])
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        dims = ",".join(str(n) for n in arr.shape)
        records.append(f"tensor\t{name}\t{tag}\t{dims}\t{offset}\t{len(raw)}".encode("utf-8"))
        blobs.append(raw)
        offset += len(raw)
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(records))
    for r in records:
        out += struct.pack("<I", len(r)) + r
    out += struct.pack("<Q", offset)
    for b in blobs:
        out += b
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at {self.pos}, have {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def loads(buf: bytes, upcast: bool = False) -> Checkpoint:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a SUPRACP1 checkpoint (magic {buf[:8]!r})")
    rd = _Reader(buf)
    rd.take(len(MAGIC), "magic")
    (n_records,) = struct.unpack("<I", rd.take(4, "record count"))
    records = []
    for i in range(n_records):
        (n,) = struct.unpack("<I", rd.take(4, f"record {i} length"))
        try:
            records.append(rd.take(n, f"record {i}").decode("utf-8"))
        except UnicodeDecodeError as e:
            raise IntegrityError(f"record {i} is not UTF-8") from e
    (payload_len,) = struct.unpack("<Q", rd.take(8, "payload length"))
    payload = rd.take(payload_len, "payload")
    if rd.pos != len(buf):
        raise IntegrityError(f"{len(buf) - rd.pos} trailing bytes after payload")
    if not records or not records[0].startswith("meta\t"):
        raise IntegrityError("first record must be meta")
    try:
        meta = json.loads(records[0][5:])
        config = ModelConfig.from_dict(meta.pop("config"))
    except (ValueError, KeyError, TypeError) as e:
        raise IntegrityError(f"bad metadata: {e}") from e

    tensors, spans = {}, []
    for rec in records[1:]:
        parts = rec.split("\t")
        if len(parts) != 6 or parts[0] != "tensor":
            raise IntegrityError(f"malformed tensor record {rec!r}")
        _, name, tag, dims, off, nbytes = parts
        if tag not in DTYPES:
            raise DtypeError(f"{name}: unknown dtype {tag!r}")
        try:
            shape = tuple(int(x) for x in dims.split(",")) if dims else ()
            off, nbytes = int(off), int(nbytes)
        except ValueError as e:
            raise IntegrityError(f"{name}: unparseable shape/offset in {rec!r}") from e
        dt = DTYPES[tag]
        if any(n <= 0 for n in shape) or nbytes != int(np.prod(shape)) * dt.itemsize:
            raise IntegrityError(f"{name}: shape {shape} x {tag} does not match {nbytes} bytes")
        if off < 0 or off + nbytes > payload_len:
            raise IntegrityError(f"{name}: span [{off}, {off + nbytes}) outside payload of {payload_len}")
        if name in tensors:
            raise IntegrityError(f"duplicate tensor {name}")
        spans.append((off, off + nbytes, name))
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
        tensors[name] = arr.astype(np.float64) if upcast else arr.astype(dt.newbyteorder("="))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise IntegrityError(f"tensors {an} and {bn} overlap")
    ckpt = Checkpoint(config, tensors, meta)
    ckpt.validate()
    return ckpt


def load(path: str | Path, upcast: bool = False) -> Checkpoint:
    return loads(Path(path).read_bytes(), upcast=upcast)


# -- surgery --------------------------------------------------------------

@dataclass
class SurgeryReport:
    added: dict[str, tuple[int, ...]] = field(default_factory=dict)
    removed: dict[str, tuple[int, ...]] = field(default_factory=dict)
    changed: dict[str, tuple[int, ...]] = field(default_factory=dict)
    carried: list[str] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0

    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.changed)

    def to_dict(self) -> dict:
        return {"added": {k: list(v) for k, v in self.added.items()},
                "removed": {k: list(v) for k, v in self.removed.items()},
                "changed": {k: list(v) for k, v in self.changed.items()},
                "carried": list(self.carried),
                "params_before": self.params_before, "params_after": self.params_after}


def supra_convert(ckpt: Checkpoint, target: AttentionConfig) -> tuple[Checkpoint, SurgeryReport]:
    """Add per-head kernel MLPs (identity init) and per-layer GroupNorm affine to a softmax checkpoint."""
    src = ckpt.config
    if src.attention.is_linear or "converted_from" in ckpt.meta:
        raise SurgeryError("source checkpoint already uses linear attention")
    if not target.is_linear:
        raise SurgeryError("target attention must be a linear kernel")
    if (target.d_model, target.n_heads) != (src.d_model, src.n_heads):
        raise SurgeryError(f"head geometry mismatch: target {target.d_model}/{target.n_heads}, "
                           f"source {src.d_model}/{src.n_heads}")
    new_cfg = src.with_attention(target)
    dtype = ckpt.tensors["tok_emb"].dtype
    tensors = {k: v.copy() for k, v in ckpt.tensors.items()}
    shapes = param_shapes(new_cfg)
    added = {}
    for name in sorted(set(shapes) - set(tensors)):
        shp = shapes[name]
        if name.endswith("kernel.weight"):
            val = np.broadcast_to(np.eye(shp[-1]), shp)
        elif name.endswith("gn.weight"):
            val = np.ones(shp)
        elif name.endswith(("kernel.bias", "gn.bias")):
            val = np.zeros(shp)
        else:
            raise SurgeryError(f"don't know how to initialise {name}")
        tensors[name] = np.array(val, dtype=dtype)
        added[name] = shp
    removed = {k: ckpt.tensors[k].shape for k in sorted(set(tensors) - set(shapes))}
    for k in removed:
        del tensors[k]
    meta = dict(ckpt.meta)
    meta.update({
        "converted_from": src.attention.to_dict(),
        "decay": target.decay,
        "gammas": decay_schedule(target.decay, target.n_heads).tolist(),
        "new_params": sorted(set(meta.get("new_params", [])) | set(added)),
    })
    out = Checkpoint(new_cfg, tensors, meta)
    report = SurgeryReport(added=added, removed=removed,
                           carried=sorted(set(ckpt.tensors) - set(removed)),
                           params_before=ckpt.num_params(), params_after=out.num_params())
    return out, report


def diff_checkpoints(a: Checkpoint, b: Checkpoint) -> SurgeryReport:
    rep = SurgeryReport(params_before=a.num_params(), params_after=b.num_params())
    for name in sorted(set(a.tensors) | set(b.tensors)):
        if name not in a.tensors:
            rep.added[name] = b.tensors[name].shape
        elif name not in b.tensors:
            rep.removed[name] = a.tensors[name].shape
        else:
            x, y = a.tensors[name], b.tensors[name]
            if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                rep.changed[name] = y.shape
            else:
                rep.carried.append(name)
    return rep
