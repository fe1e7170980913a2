"""Binary checkpoint files.

Layout (little-endian)::

    magic        b"CLMAE\\0"
    version      u16
    digest       32 bytes, SHA-256 of the numeric config
    dtype flag   u8 (4 = float32, 8 = float64)
    config       u32 length + UTF-8 ``key = value`` text
    params       table
    moments      table (names prefixed ``m:`` / ``v:``)
    step         u64
    state        u32 length + UTF-8 JSON (RNG, loader, optimizer step counts)
    crc32        u32 over everything after the magic

A table is ``u32 count`` then, per entry, ``u32 name length``, name bytes,
``u32 rank``, ``rank`` u32 extents and the row-major payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import TrainConfig, parse_config_text, load_config
from .training import Loader, TrainState

MAGIC = b"CLMAE\0"
VERSION = 1
_DTYPES = {4: "<f4", 8: "<f8"}


class CheckpointError(ValueError):
    pass


def _write_table(out: list[bytes], entries: list[tuple[str, np.ndarray]], dt: str) -> None:
    out.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _named(state: TrainState):
    return [(f"mae.{k}", p.data) for k, p in state.mae.named_parameters()] + \
           [(f"cmm.{k}", p.data) for k, p in state.cmm.named_parameters()]


def _moments(state: TrainState):
    entries = []
    for prefix, opt in (("mae", state.opt_mae), ("cmm", state.opt_cmm)):
        for k in opt.named:
            entries.append((f"m:{prefix}.{k}", opt.m[k]))
            entries.append((f"v:{prefix}.{k}", opt.v[k]))
    return entries


def _state_json(state: TrainState) -> bytes:
    payload = {
        "rng": state.rng.bit_generator.state,
        "loader": {"perm": state.loader.perm.tolist(), "cursor": state.loader.cursor,
                   "size": state.loader.size, "batch_size": state.loader.batch_size},
        "opt_steps": {"mae": state.opt_mae.step_count, "cmm": state.opt_cmm.step_count},
        "fallback_count": state.fallback_count,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(state: TrainState) -> bytes:
    cfg = state.config
    flag = np.dtype(cfg.dtype).itemsize
    dt = _DTYPES[flag]
    body: list[bytes] = [struct.pack("<H", VERSION), cfg.digest(), struct.pack("<B", flag)]
    text = cfg.to_text().encode()
    body.append(struct.pack("<I", len(text)) + text)
    _write_table(body, _named(state), dt)
    _write_table(body, _moments(state), dt)
    body.append(struct.pack("<Q", state.t))
    blob = _state_json(state)
    body.append(struct.pack("<I", len(blob)) + blob)
    payload = b"".join(body)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self, dt: str) -> list[tuple[str, np.ndarray]]:
        (count,) = self.unpack("<I")
        out = []
        itemsize = np.dtype(dt).itemsize
        for _ in range(count):
            (nlen,) = self.unpack("<I")
            name = self.take(nlen).decode()
            (rank,) = self.unpack("<I")
            shape = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(self.take(size * itemsize), dtype=dt).reshape(shape)
            out.append((name, arr))
        return out


def checkpoint_load(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``config`` (if given) must match the stored digest."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    payload, (crc,) = data[len(MAGIC):-4], struct.unpack("<I", data[-4:])
    r = _Reader(data, len(MAGIC))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupted or truncated)")
    digest = r.take(32)
    (flag,) = r.unpack("<B")
    if flag not in _DTYPES:
        raise CheckpointError(f"unknown payload dtype flag {flag}")
    dt = _DTYPES[flag]
    (tlen,) = r.unpack("<I")
    stored = load_config(overrides=parse_config_text(r.take(tlen).decode()))
    if stored.digest() != digest:
        raise CheckpointError("embedded config does not match its digest")
    if config is not None and config.digest() != digest:
        raise CheckpointError("checkpoint was written with a different configuration")
    cfg = config or stored
    params = r.table(dt)
    moments = dict(r.table(dt))
    (t,) = r.unpack("<Q")
    (slen,) = r.unpack("<I")
    extra = json.loads(r.take(slen).decode())
    if r.pos != len(data) - 4:
        raise CheckpointError("trailing bytes after checkpoint payload")

    state = TrainState.create(cfg, extra["loader"]["size"])
    local = np.dtype(cfg.dtype)
    current = dict(_named(state))
    if set(current) != {name for name, _ in params}:
        raise CheckpointError("parameter table does not match the model layout")
    for name, arr in params:
        if current[name].shape != arr.shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} vs model {current[name].shape}")
        current[name][...] = arr.astype(local)
    for prefix, opt in (("mae", state.opt_mae), ("cmm", state.opt_cmm)):
        for k in opt.named:
            for kind, store in (("m", opt.m), ("v", opt.v)):
                key = f"{kind}:{prefix}.{k}"
                if key not in moments or moments[key].shape != store[k].shape:
                    raise CheckpointError(f"moment table entry {key} missing or misshapen")
                store[k][...] = moments[key].astype(local)
    state.opt_mae.step_count = extra["opt_steps"]["mae"]
    state.opt_cmm.step_count = extra["opt_steps"]["cmm"]
    state.rng.bit_generator.state = extra["rng"]
    ld = extra["loader"]
    state.loader = Loader(ld["size"], ld["batch_size"], np.array(ld["perm"], dtype=np.int64),
                          ld["cursor"])
    state.t = t
    state.fallback_count = extra["fallback_count"]
    return state
