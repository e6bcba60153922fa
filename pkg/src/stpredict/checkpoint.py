"""Binary model checkpoints: named float32 tensor records.

Layout (all integers little-endian u32):

    magic "STPC" | version | json_len | json config block
    n_records
    per record: name_len | name utf-8 | rank | dims... | f32 payload

The JSON block carries the network config echo, the training iteration,
the master seed, and the Adam hyperparameters; tensor records carry the
parameters (``param.<name>``) and optimizer moments (``adam.m.<name>``,
``adam.v.<name>``).
"""
from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .network import Model, NetworkConfig, init_model
from .optim import AdamState
from .rng import Rng
from .tensor import ContractError

_MAGIC = b"STPC"
_VERSION = 1
_HEAD = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


@dataclasses.dataclass
class Checkpoint:
    """A reloaded training state: model, optimizer, position in the run."""
    model: Model
    adam: AdamState
    iteration: int
    seed: int


def _write_u32(fh, value: int) -> None:
    fh.write(_U32.pack(value))


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    blob = name.encode("utf-8")
    _write_u32(fh, len(blob))
    fh.write(blob)
    _write_u32(fh, arr.ndim)
    for d in arr.shape:
        _write_u32(fh, d)
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path: str, model: Model, adam: AdamState,
                    iteration: int, seed: int) -> None:
    if iteration < 0:
        raise ContractError(f"iteration must be >= 0, got {iteration}")
    params = model.named_parameters()
    for mom in (adam.m, adam.v):
        for name in mom:
            if name not in params:
                raise ContractError(f"optimizer moment {name!r} has no "
                                    f"matching parameter")
    meta = {
        "network": dataclasses.asdict(model.cfg),
        "iteration": int(iteration),
        "seed": int(seed),
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps, "step": adam.step},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(_MAGIC, _VERSION, len(blob)))
        fh.write(blob)
        n = len(params) + len(adam.m) + len(adam.v)
        _write_u32(fh, n)
        for name, p in params.items():
            _write_record(fh, "param." + name, p.data)
        for name, arr in adam.m.items():
            _write_record(fh, "adam.m." + name, arr)
        for name, arr in adam.v.items():
            _write_record(fh, "adam.v." + name, arr)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ContractError(f"checkpoint truncated while reading {what}")
    return data


def _read_u32(fh, what: str) -> int:
    return _U32.unpack(_read_exact(fh, 4, what))[0]


def _read_record(fh) -> tuple[str, np.ndarray]:
    name_len = _read_u32(fh, "record name length")
    name = _read_exact(fh, name_len, "record name").decode("utf-8")
    rank = _read_u32(fh, f"rank of {name}")
    if not 1 <= rank <= 4:
        raise ContractError(f"record {name!r} has invalid rank {rank}")
    dims = [_read_u32(fh, f"dims of {name}") for _ in range(rank)]
    count = int(np.prod(dims))
    payload = _read_exact(fh, count * 4, f"payload of {name}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return name, arr.astype(np.float32, copy=True)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        head = _read_exact(fh, _HEAD.size, "header")
        magic, version, json_len = _HEAD.unpack(head)
        if magic != _MAGIC:
            raise ContractError(f"bad checkpoint magic {magic!r}")
        if version != _VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        meta = json.loads(_read_exact(fh, json_len, "config block"))
        n = _read_u32(fh, "record count")
        records = dict(_read_record(fh) for _ in range(n))
        if fh.read(1) != b"":
            raise ContractError("checkpoint has trailing bytes")

    cfg = NetworkConfig(**meta["network"])
    model = init_model(cfg, Rng(meta["seed"]))
    params = model.named_parameters()

    seen = set()
    adam_meta = meta["adam"]
    adam = AdamState(lr=adam_meta["lr"], beta1=adam_meta["beta1"],
                     beta2=adam_meta["beta2"], eps=adam_meta["eps"],
                     step=adam_meta["step"])
    for record, arr in records.items():
        kind, _, name = record.partition(".")
        if kind == "param":
            dest = params.get(name)
            if dest is None:
                raise ContractError(f"checkpoint parameter {name!r} not in "
                                    f"model")
            if dest.data.shape != arr.shape:
                raise ContractError(f"parameter {name!r} shape {arr.shape} "
                                    f"!= model shape {dest.data.shape}")
            dest.data = arr
            seen.add(name)
        elif record.startswith("adam.m."):
            adam.m[record[len("adam.m."):]] = arr
        elif record.startswith("adam.v."):
            adam.v[record[len("adam.v."):]] = arr
        else:
            raise ContractError(f"unknown record {record!r}")
    missing = set(params) - seen
    if missing:
        raise ContractError(f"checkpoint missing parameters: "
                            f"{sorted(missing)}")
    for name in set(adam.m) ^ set(adam.v):
        raise ContractError(f"unpaired optimizer moment for {name!r}")
    for name in adam.m:
        if name not in params:
            raise ContractError(f"optimizer moment {name!r} has no matching "
                                f"parameter")
    return Checkpoint(model=model, adam=adam,
                      iteration=meta["iteration"], seed=meta["seed"])
