"""Checkpoint container: config, parameters, optimizer, bank, progress.

Layout: magic, format version, a length-prefixed JSON header (config
snapshot, run metadata, epoch/step counters, tensor directory), then raw
row-major little-endian tensor payloads in directory order. Everything that
affects the next training step round-trips bit-exactly: float32 parameters,
float32 Adam moments, the step counter, the bank queues, and the seed that
drives epoch permutations.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .distill import MemoryBank
from .model import ModelConfig
from .training import Adam

MAGIC = b"TDCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_entries(named: dict):
    entries, blobs = [], []
    offset = 0
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str,
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs


def save_checkpoint(path, *, config: ModelConfig, params: dict,
                    optimizer: Adam = None, bank: MemoryBank = None,
                    epoch: int = 0, run: dict = None) -> None:
    tensors = {f"param:{k}": v for k, v in params.items()}
    opt_meta = None
    if optimizer is not None:
        st = optimizer.state()
        opt_meta = {"t": st["t"], "settings": st["settings"]}
        tensors.update({f"adam.m:{k}": v for k, v in st["m"].items()})
        tensors.update({f"adam.v:{k}": v for k, v in st["v"].items()})
    bank_meta = None
    if bank is not None:
        st = bank.state()
        bank_meta = {k: st[k] for k in
                     ("n_tasks", "n_mem", "k", "d", "policy")}
        tensors["bank:store"] = st["store"]
        tensors["bank:lengths"] = st["lengths"]
        tensors["bank:counts"] = st["counts"]
    entries, blobs = _tensor_entries(tensors)
    header = {"config": config.to_dict(), "run": run or {}, "epoch": epoch,
              "optimizer": opt_meta, "bank": bank_meta, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


class Checkpoint:
    def __init__(self, config, params, epoch, run, opt_meta, opt_tensors,
                 bank_meta, bank_tensors):
        self.config = config
        self.params = params
        self.epoch = epoch
        self.run = run
        self._opt_meta = opt_meta
        self._opt_tensors = opt_tensors
        self._bank_meta = bank_meta
        self._bank_tensors = bank_tensors

    @property
    def has_optimizer(self):
        return self._opt_meta is not None

    @property
    def has_bank(self):
        return self._bank_meta is not None

    def make_optimizer(self) -> Adam:
        if not self.has_optimizer:
            raise CheckpointError("checkpoint holds no optimizer state")
        st = {"t": self._opt_meta["t"],
              "settings": self._opt_meta["settings"],
              "m": self._opt_tensors["m"], "v": self._opt_tensors["v"]}
        return Adam.from_state(self.params, st)

    def make_bank(self) -> MemoryBank:
        if not self.has_bank:
            raise CheckpointError("checkpoint holds no bank state")
        st = dict(self._bank_meta)
        st.update(self._bank_tensors)
        return MemoryBank.from_state(st)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:len(MAGIC)]!r}")
    pos = len(MAGIC)

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: {what} wants {n} "
                                  f"bytes at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"bad checkpoint header: {e}")

    base = pos
    tensors = {}
    for ent in header["tensors"]:
        blob = buf[base + ent["offset"]:base + ent["offset"] + ent["nbytes"]]
        if len(blob) != ent["nbytes"]:
            raise CheckpointError(f"truncated tensor {ent['name']!r}")
        tensors[ent["name"]] = np.frombuffer(
            blob, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    end = base + (header["tensors"][-1]["offset"]
                  + header["tensors"][-1]["nbytes"] if header["tensors"]
                  else 0)
    if end != len(buf):
        raise CheckpointError(f"{len(buf) - end} unexpected trailing bytes")

    params = {k[len("param:"):]: v for k, v in tensors.items()
              if k.startswith("param:")}
    opt_tensors = None
    if header["optimizer"] is not None:
        opt_tensors = {
            "m": {k[len("adam.m:"):]: v for k, v in tensors.items()
                  if k.startswith("adam.m:")},
            "v": {k[len("adam.v:"):]: v for k, v in tensors.items()
                  if k.startswith("adam.v:")},
        }
    bank_tensors = None
    if header["bank"] is not None:
        bank_tensors = {"store": tensors["bank:store"],
                        "lengths": tensors["bank:lengths"],
                        "counts": tensors["bank:counts"]}
    return Checkpoint(ModelConfig.from_dict(header["config"]), params,
                      int(header["epoch"]), header["run"],
                      header["optimizer"], opt_tensors,
                      header["bank"], bank_tensors)
