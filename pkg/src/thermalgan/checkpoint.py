"""Trainer checkpoints.

Layout (little-endian)::

    "TGCK" | u32 version | 32-byte sha256 of the config JSON
    u32 len | config JSON
    u32 count | count x (u32 len | name | TGT1 tensor)
    u32 count | count x optimizer:
        u32 len | name | u64 t | 4 x f64 (lr, beta1, beta2, eps)
        u32 count | count x (u32 len | param name | TGT1 m | TGT1 v)
    u64 iteration
    u32 len | RNG state JSON

The whole file is parsed before any trainer is built, so a truncated or
corrupted file never yields a half-initialised state.
"""

import hashlib
import json
import os
import struct

from .optim import AdamState
from .serialize import FormatError, tensor_from_bytes, tensor_to_bytes
from .train import TrainConfig, make_trainer

MAGIC = b"TGCK"
VERSION = 1


class CheckpointError(FormatError):
    """Checkpoint is unreadable, truncated, or from an incompatible version."""


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.off} (needed {n} more)")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def tensor(self):
        try:
            arr, self.off = tensor_from_bytes(self.buf, self.off)
        except FormatError as e:
            raise CheckpointError(str(e)) from None
        return arr


def checkpoint_bytes(state):
    cfg = state.config.to_json()
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(cfg.encode()).digest(), _pack_str(cfg)]
    tensors = dict(state.state_tensors())
    if state.snapshot_input is not None:
        tensors["snapshot_input"] = state.snapshot_input
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        parts.append(_pack_str(name))
        parts.append(tensor_to_bytes(arr))
    opts = state.optimizers()
    parts.append(struct.pack("<I", len(opts)))
    for name, opt in opts.items():
        st = opt.state
        parts.append(_pack_str(name))
        parts.append(struct.pack("<Q4d", st.t, st.lr, st.beta1, st.beta2, st.eps))
        parts.append(struct.pack("<I", len(st.m)))
        for pname in st.m:
            parts.append(_pack_str(pname))
            parts.append(tensor_to_bytes(st.m[pname]))
            parts.append(tensor_to_bytes(st.v[pname]))
    parts.append(struct.pack("<Q", state.iteration))
    parts.append(_pack_str(json.dumps(state.rng.bit_generator.state, sort_keys=True)))
    return b"".join(parts)


def save_checkpoint(state, path):
    blob = checkpoint_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return path


def parse_checkpoint(buf):
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a TGCK checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    cfg_text = r.string()
    if hashlib.sha256(cfg_text.encode()).digest() != digest:
        raise CheckpointError("config digest mismatch")
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        name = r.string()
        tensors[name] = r.tensor()
    (n_opt,) = r.unpack("<I")
    opts = {}
    for _ in range(n_opt):
        name = r.string()
        t, lr, b1, b2, eps = r.unpack("<Q4d")
        st = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
        (n_m,) = r.unpack("<I")
        for _ in range(n_m):
            pname = r.string()
            st.m[pname] = r.tensor()
            st.v[pname] = r.tensor()
        opts[name] = st
    (iteration,) = r.unpack("<Q")
    rng_state = json.loads(r.string())
    if r.off != len(buf):
        raise CheckpointError(f"{len(buf) - r.off} trailing bytes in checkpoint")
    return {
        "config": TrainConfig.from_json(cfg_text),
        "digest": digest.hex(),
        "tensors": tensors,
        "optimizers": opts,
        "iteration": iteration,
        "rng_state": rng_state,
    }


def load_checkpoint(path):
    """Rebuild a trainer exactly as it was saved."""
    with open(path, "rb") as f:
        buf = f.read()
    parsed = parse_checkpoint(buf)
    tensors = dict(parsed["tensors"])
    snap = tensors.pop("snapshot_input", None)
    state = make_trainer(parsed["config"], snapshot_input=snap)
    try:
        state.load_state_tensors(tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not match its config: {e}") from None
    own = state.optimizers()
    if set(own) != set(parsed["optimizers"]):
        raise CheckpointError("optimizer set does not match the architecture")
    for name, st in parsed["optimizers"].items():
        own[name].state = st
    state.iteration = parsed["iteration"]
    state.rng.bit_generator.state = parsed["rng_state"]
    return state


def checkpoint_digest(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_config(path):
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())["config"]
