"""Named parameter store, binary checkpoints, and the Adam optimizer.

Checkpoint layout (all integers little-endian):

    b"LIPC" | u32 version | u32 header_len | header JSON (utf-8) | raw float64

The header lists parameter names/shapes, optimizer slot names/shapes and the
string metadata; the raw block is the concatenation of every array's
little-endian float64 bytes in header order. Round-trips are bit exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from typing import Callable, Iterable

import numpy as np

from .errors import ContractViolation, DataFormatError
from .tape import Tensor

MAGIC = b"LIPC"
VERSION = 1


class ParamStore:
    """Dotted-name to leaf-Tensor map with optimizer state and metadata."""

    def __init__(self, metadata: dict[str, str] | None = None):
        self.entries: dict[str, Tensor] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        self.opt_state: dict[str, dict[str, np.ndarray]] = {}
        self.opt_step: int = 0

    def param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.entries:
            raise ContractViolation(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.value.size for t in self.entries.values())

    # -- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "metadata": self.metadata,
            "params": [
                {"name": n, "shape": list(t.value.shape)} for n, t in self.entries.items()
            ],
            "opt": [
                {
                    "name": n,
                    "slots": [
                        {"slot": s, "shape": list(a.shape)} for s, a in slots.items()
                    ],
                }
                for n, slots in self.opt_state.items()
            ],
            "opt_step": self.opt_step,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
        for t in self.entries.values():
            chunks.append(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
        for slots in self.opt_state.values():
            for a in slots.values():
                chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if len(blob) < 12:
            raise DataFormatError(f"checkpoint truncated at byte {len(blob)} (header needs 12)")
        if blob[:4] != MAGIC:
            raise DataFormatError(f"bad magic {blob[:4]!r} at byte 0, expected {MAGIC!r}")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version} at byte 4")
        if len(blob) < 12 + hlen:
            raise DataFormatError(f"checkpoint truncated at byte {len(blob)}, header ends at {12 + hlen}")
        try:
            header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataFormatError(f"unparseable checkpoint header at byte 12: {e}") from e
        store = cls(metadata=header.get("metadata", {}))
        store.opt_step = int(header.get("opt_step", 0))
        off = 12 + hlen

        def take(shape: list[int]) -> np.ndarray:
            nonlocal off
            n = int(np.prod(shape)) if shape else 1
            end = off + 8 * n
            if len(blob) < end:
                raise DataFormatError(f"checkpoint truncated at byte {len(blob)}, array ends at {end}")
            a = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).copy()
            off = end
            return a

        for rec in header["params"]:
            store.param(rec["name"], take(rec["shape"]))
        for rec in header.get("opt", []):
            slots = {}
            for srec in rec["slots"]:
                slots[srec["slot"]] = take(srec["shape"])
            store.opt_state[rec["name"]] = slots
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def checksum(self) -> str:
        """sha256 of the parameter payload (metadata and optimizer excluded)."""
        h = hashlib.sha256()
        for n, t in sorted(self.entries.items()):
            h.update(n.encode("utf-8"))
            h.update(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
        return h.hexdigest()

    def clone_subset(self, prefix: str, metadata: dict[str, str] | None = None) -> "ParamStore":
        out = ParamStore(metadata=metadata or dict(self.metadata))
        for n in self.names(prefix):
            out.param(n, self.entries[n].value.copy())
        return out

    def copy_values_from(self, other: "ParamStore", rename: Callable[[str], str] | None = None) -> None:
        for n, t in other.entries.items():
            tgt = rename(n) if rename else n
            if tgt not in self.entries:
                raise ContractViolation(f"parameter {tgt!r} missing from destination store")
            if self.entries[tgt].value.shape != t.value.shape:
                raise ContractViolation(
                    f"parameter {tgt!r} shape mismatch: {self.entries[tgt].value.shape} vs {t.value.shape}"
                )
            self.entries[tgt].value = t.value.copy()


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """One Adam update over the named gradients; moment state lives in the store."""
    if t < 1:
        raise ContractViolation(f"adam_step: t must be >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        if name not in store.entries:
            raise ContractViolation(f"adam_step: unknown parameter {name!r}")
        p = store.entries[name]
        if g.shape != p.value.shape:
            raise ContractViolation(
                f"adam_step: gradient shape {g.shape} does not match parameter {name!r} {p.value.shape}"
            )
        slots = store.opt_state.setdefault(
            name, {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value)}
        )
        slots["m"] = beta1 * slots["m"] + (1.0 - beta1) * g
        slots["v"] = beta2 * slots["v"] + (1.0 - beta2) * (g * g)
        mhat = slots["m"] / bc1
        vhat = slots["v"] / bc2
        p.value = p.value - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Stateful wrapper around adam_step reading gradients off the tensors."""

    def __init__(
        self,
        store: ParamStore,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        names: Iterable[str] | None = None,
    ):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.names = list(names) if names is not None else None

    def step(self, lr: float | None = None) -> None:
        names = self.names if self.names is not None else list(self.store.entries)
        grads = {
            n: self.store.entries[n].grad
            for n in names
            if self.store.entries[n].grad is not None
        }
        self.store.opt_step += 1
        adam_step(
            self.store,
            grads,
            lr if lr is not None else self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            t=self.store.opt_step,
        )

    def zero_grad(self) -> None:
        self.store.zero_grad()


# -- learning-rate schedules ----------------------------------------------


def lr_halving(base: float, it: int, every: int = 5000, after: int = 25000) -> float:
    """Halve the rate every `every` iterations once `after` is reached."""
    if it < after:
        return base
    return base * 0.5 ** ((it - after) // every + 1)


def lr_exp_decay(base: float, it: int, total: int, gamma: float = 0.1) -> float:
    return base * gamma ** (it / max(1, total))


def lr_cosine(base: float, it: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * min(it, total) / max(1, total)))
