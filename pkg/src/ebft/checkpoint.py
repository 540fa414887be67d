"""Binary checkpoint I/O.

Layout (little-endian):
  magic "EBFTCKPT" | u32 version | u32 vocab, d_model, n_layers, n_heads,
  max_seq_len | u8 mlp_gated | f64 ln_eps | u32 n_entries | entry table |
  raw payloads.

Each table entry is (u16 name_len, utf-8 name, u8 dtype_tag, u8 ndim,
u32 dims..., u64 payload_offset, u64 payload_nbytes). dtype_tag 1 is a
float64 tensor; tag 2 is a bit-packed binary mask stored under
"<weight_name>.mask". Entries are written in sorted-name order so identical
models always serialize to identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, FormatError
from .model import LanguageModel, ModelConfig

MAGIC = b"EBFTCKPT"
VERSION = 1
TAG_F64 = 1
TAG_MASK = 2


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(model: LanguageModel, masks: Optional[dict] = None,
                    path: Union[str, Path] = "model.ckpt") -> None:
    """Serialize model (and optional masks keyed by weight name) to `path`."""
    cfg = model.cfg
    named = model.named_tensors()
    entries = []  # (name, tag, shape, payload bytes)
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name].data, dtype="<f8")
        entries.append((name, TAG_F64, arr.shape, arr.tobytes()))
    if masks:
        for wname in sorted(masks):
            if wname not in named:
                raise FormatError(f"mask {wname!r} has no matching weight tensor")
            bits = np.asarray(getattr(masks[wname], "bits", masks[wname]))
            if bits.shape != named[wname].shape:
                raise FormatError(
                    f"mask {wname!r} shape {bits.shape} does not match weight "
                    f"shape {named[wname].shape}")
            packed = np.packbits(bits.astype(np.uint8).ravel())
            entries.append((f"{wname}.mask", TAG_MASK, bits.shape, packed.tobytes()))
    entries.sort(key=lambda e: e[0])

    header = MAGIC + struct.pack(
        "<IIIIIIBd", VERSION, cfg.vocab_size, cfg.d_model, cfg.n_layers,
        cfg.n_heads, cfg.max_seq_len, int(cfg.mlp_gated), cfg.ln_eps)
    table = [struct.pack("<I", len(entries))]
    offset = 0
    for name, tag, shape, payload in entries:
        nb = name.encode("utf-8")
        table.append(struct.pack("<H", len(nb)) + nb)
        table.append(struct.pack("<BB", tag, len(shape)))
        table.append(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
        table.append(struct.pack("<QQ", offset, len(payload)))
        offset += len(payload)

    with open(path, "wb") as fh:
        fh.write(header)
        for chunk in table:
            fh.write(chunk)
        for _, _, _, payload in entries:
            fh.write(payload)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic bytes; not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    vocab, d, layers, heads, smax, gated, ln_eps = r.unpack("<IIIIIBd", "header")
    try:
        cfg = ModelConfig(vocab_size=vocab, d_model=d, n_layers=layers,
                          n_heads=heads, max_seq_len=smax, mlp_gated=bool(gated),
                          ln_eps=ln_eps)
    except ConfigError as e:
        raise FormatError(f"invalid hyperparameter header: {e}")
    (n_entries,) = r.unpack("<I", "entry count")

    table = []
    for i in range(n_entries):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        tag, ndim = r.unpack("<BB", f"entry {name!r} dtype/ndim")
        shape = r.unpack(f"<{ndim}I", f"entry {name!r} shape") if ndim else ()
        off, nbytes = r.unpack("<QQ", f"entry {name!r} offset")
        table.append((name, tag, tuple(shape), off, nbytes))
    payload_start = r.pos

    ckpt = Checkpoint(version=version, config=cfg)
    for name, tag, shape, off, nbytes in table:
        start = payload_start + off
        if start + nbytes > len(blob):
            raise FormatError(f"entry {name!r} payload extends past end of file")
        raw = blob[start:start + nbytes]
        count = int(np.prod(shape)) if shape else 1
        if tag == TAG_F64:
            if nbytes != 8 * count:
                raise FormatError(f"entry {name!r} payload size does not match its shape")
            ckpt.tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        elif tag == TAG_MASK:
            if nbytes != (count + 7) // 8:
                raise FormatError(f"mask {name!r} payload size does not match its shape")
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count)
            wname = name[:-len(".mask")]
            ckpt.masks[wname] = bits.reshape(shape).astype(np.float64)
        else:
            raise FormatError(f"entry {name!r} has unknown dtype tag {tag}")

    for wname, bits in ckpt.masks.items():
        if wname not in ckpt.tensors:
            raise FormatError(f"mask {wname + '.mask'!r} has no matching weight tensor")
        if bits.shape != ckpt.tensors[wname].shape:
            raise FormatError(
                f"mask {wname + '.mask'!r} shape {bits.shape} does not match "
                f"weight shape {ckpt.tensors[wname].shape}")
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> LanguageModel:
    model = LanguageModel(ckpt.config)
    named = model.named_tensors()
    for name, t in named.items():
        if name not in ckpt.tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != t.shape:
            raise FormatError(
                f"tensor {name!r} shape {arr.shape} does not match model shape {t.shape}")
        t.data = arr.copy()
    for name in ckpt.tensors:
        if name not in named:
            raise FormatError(f"checkpoint has unknown tensor {name!r}")
    return model


def load_model(path: Union[str, Path]) -> tuple[LanguageModel, dict[str, np.ndarray]]:
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt.masks
