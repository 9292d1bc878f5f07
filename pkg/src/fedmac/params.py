"""Parameter containers: initialisation, plain SGD and the FMC1 checkpoint format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Mapping, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DataFormatError

CHECKPOINT_MAGIC = b"FMC1"


@dataclass(frozen=True)
class ParamSpec:
    """Shape and init rule of one named parameter.

    ``kind`` is ``"weight"`` (Xavier-uniform), ``"bias"`` (zeros) or
    ``"embedding"`` (normal with variance 1/last-dim).
    """

    name: str
    shape: Tuple[int, ...]
    kind: str = "weight"


class ModelParams(Mapping[str, np.ndarray]):
    """Immutable snapshot of named float64 arrays in a fixed order."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: Dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            a = np.array(arr, dtype=np.float64)
            a.setflags(write=False)
            self._arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._arrays.items())
        return f"ModelParams({inner})"

    def bind(self, requires_grad: bool = True) -> Dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self._arrays.items()}

    def replace(self, **updates: np.ndarray) -> "ModelParams":
        merged = dict(self._arrays)
        for k, v in updates.items():
            if k not in merged:
                raise KeyError(k)
            merged[k] = v
        return ModelParams(merged)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self._arrays.values()]) if self else np.zeros(0)

    def num_values(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality, names and order included."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )


def _fans(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 3 and shape[-1] == 3:
        # conv kernel (C_out, C_in, k)
        c_out, c_in, k = shape
        return c_in * k, c_out * k
    if len(shape) == 3:
        # stacked per-modality matrices (M, fan_in, fan_out)
        return shape[1], shape[2]
    raise ContractError(f"cannot infer fan-in/fan-out for shape {shape}")


def init_params(layout: Sequence[ParamSpec], seed: int) -> ModelParams:
    if not layout:
        raise ContractError("init_params: empty parameter layout")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))
    arrays: Dict[str, np.ndarray] = {}
    for spec in layout:
        shape = tuple(int(s) for s in spec.shape)
        if spec.kind == "weight":
            fan_in, fan_out = _fans(shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[spec.name] = rng.uniform(-bound, bound, size=shape)
        elif spec.kind == "bias":
            arrays[spec.name] = np.zeros(shape)
        elif spec.kind == "embedding":
            arrays[spec.name] = rng.normal(0.0, np.sqrt(1.0 / shape[-1]), size=shape)
        else:
            raise ContractError(f"init_params: unknown kind {spec.kind!r} for {spec.name}")
    return ModelParams(arrays)


def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], lr: float) -> ModelParams:
    """theta <- theta - lr * grad, no momentum and no weight decay."""
    if lr < 0:
        raise ContractError(f"sgd_step: learning rate must be non-negative, got {lr}")
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"sgd_step: missing gradient for {', '.join(missing)}")
    return ModelParams({k: params[k] - lr * grads[k] for k in params})


# ---------------------------------------------------------------------------
# FMC1 binary checkpoint
#   magic "FMC1", u32 count, then per entry:
#   u32 name_len, name (utf-8), u32 ndim, u32 dims[ndim], f64 values (LE)
# ---------------------------------------------------------------------------


def params_to_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(blob: bytes) -> ModelParams:
    pos = 0

    def need(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataFormatError(f"truncated checkpoint: wanted {n} bytes", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if need(4) != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic", 0)
    (count,) = struct.unpack("<I", need(4))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(4))
        start = pos
        try:
            name = need(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError("parameter name is not valid utf-8", start) from None
        (ndim,) = struct.unpack("<I", need(4))
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(need(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise DataFormatError("trailing bytes after last parameter", pos)
    return ModelParams(arrays)


def save_params(params: ModelParams, path: Union[str, Path]) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: Union[str, Path]) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())

