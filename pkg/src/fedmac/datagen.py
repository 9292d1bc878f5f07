"""Synthetic multi-modal data, splitting, client partitioning and missingness.

A dataset is stored as three aligned arrays (features ``x`` of shape
(N, M, d_in), boolean ``presence`` of shape (N, M) and integer ``labels``);
:class:`ModalSample` is the per-instance view.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DataFormatError, StratificationError

DATASET_MAGIC = b"FMD1"
MASK_MAGIC = b"FMM1"


def derive_seed(*keys: int) -> int:
    """Stable 64-bit sub-seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]).generate_state(
        2, np.uint32
    )
    return int(state[0]) | (int(state[1]) << 32)


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ModalSample:
    modalities: np.ndarray  # (M, d_in)
    presence: np.ndarray  # (M,) bool
    label: int


@dataclass
class ModalDataset:
    x: np.ndarray
    presence: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.presence = np.asarray(self.presence, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 3:
            raise ContractError(f"dataset features must be (N, M, d_in), got {self.x.shape}")
        n, m, _ = self.x.shape
        if self.presence.shape != (n, m) or self.labels.shape != (n,):
            raise ContractError(
                f"dataset arrays disagree: x {self.x.shape}, presence {self.presence.shape}, "
                f"labels {self.labels.shape}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def num_modalities(self) -> int:
        return self.x.shape[1]

    @property
    def d_in(self) -> int:
        return self.x.shape[2]

    def __getitem__(self, i: int) -> ModalSample:
        return ModalSample(self.x[i], self.presence[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[ModalSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices: Sequence[int]) -> "ModalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ModalDataset(self.x[idx], self.presence[idx], self.labels[idx], self.num_classes)

    def equals(self, other: "ModalDataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.x.shape == other.x.shape
            and self.x.tobytes() == other.x.tobytes()
            and self.presence.tobytes() == other.presence.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )

    def content_order(self) -> np.ndarray:
        """Permutation sorting samples by a digest of their features.

        The key ignores labels and storage order, so batches formed in this
        order are the same however the set was shuffled.
        """
        keys = [
            hashlib.blake2b(self.x[i].tobytes() + self.presence[i].tobytes(), digest_size=16).digest()
            for i in range(len(self))
        ]
        return np.array(sorted(range(len(self)), key=lambda i: (keys[i], i)), dtype=np.int64)


@dataclass(frozen=True)
class MissingMatrix:
    bits: np.ndarray  # (N, M) uint8 of 0/1
    p_m: float
    p_s: float
    seed: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def missing_degree(self) -> float:
        return self.p_m * self.p_s


@dataclass(frozen=True)
class Partition:
    client_indices: Tuple[np.ndarray, ...]
    scheme: str
    alpha: Optional[float]
    seed: int

    def sizes(self) -> List[int]:
        return [len(ix) for ix in self.client_indices]


# ---------------------------------------------------------------------------
# generation and splitting
# ---------------------------------------------------------------------------


def synth_generate(
    num_samples: int,
    num_classes: int,
    num_modalities: int,
    d_in: int,
    noise_std: float,
    seed: int,
) -> ModalDataset:
    """Each modality is a random linear view ``A_m @ c_y`` of a class code plus noise."""
    if d_in < 1:
        raise ContractError(f"d_in must be >= 1, got {d_in}")
    if num_classes < 2 or num_modalities < 2:
        raise ContractError("need at least 2 classes and 2 modalities")
    if noise_std < 0:
        raise ContractError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(derive_seed(seed, 0x5EED))
    codes = rng.standard_normal((num_classes, d_in))
    mixing = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(num_modalities, d_in, d_in))
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    clean = np.einsum("mij,nj->nmi", mixing, codes[labels]) if num_samples else np.zeros(
        (0, num_modalities, d_in)
    )
    noise = rng.normal(0.0, 1.0, size=clean.shape) * noise_std
    x = clean + noise
    presence = np.ones((num_samples, num_modalities), dtype=bool)
    return ModalDataset(x, presence, labels, num_classes)


def split_server(
    dataset: ModalDataset, ratio: float, seed: int
) -> Tuple[ModalDataset, ModalDataset]:
    """Stratified split into (client pool, server test set).

    Per-class shares are allocated by largest remainder so the pool holds
    exactly round(ratio * N) samples.
    """
    if not 0 < ratio < 1:
        raise ContractError(f"split ratio must be in (0, 1), got {ratio}")
    classes, counts = np.unique(dataset.labels, return_counts=True)
    if np.any(counts < 2):
        bad = classes[counts < 2].tolist()
        raise StratificationError(f"classes {bad} have fewer than 2 samples")
    rng = np.random.default_rng(derive_seed(seed, 0x5B17))
    total = round_half_up(ratio * len(dataset))
    exact = counts * ratio
    take = np.floor(exact).astype(int)
    rest = total - take.sum()
    order = np.lexsort((classes, -(exact - take)))
    take[order[:rest]] += 1
    take = np.clip(take, 1, counts - 1)
    pool, test = [], []
    for c, k in zip(classes, take):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        pool.append(idx[:k])
        test.append(idx[k:])
    pool_idx = rng.permutation(np.concatenate(pool))
    test_idx = rng.permutation(np.concatenate(test))
    return dataset.subset(pool_idx), dataset.subset(test_idx)


def partition_iid(num_samples: int, num_clients: int, seed: int) -> Partition:
    if num_clients < 1 or num_clients > num_samples:
        raise ContractError(f"cannot split {num_samples} samples over {num_clients} clients")
    rng = np.random.default_rng(derive_seed(seed, 0x11D))
    perm = rng.permutation(num_samples)
    chunks = tuple(np.sort(c) for c in np.array_split(perm, num_clients))
    return Partition(chunks, "iid", None, seed)


def partition_dirichlet(
    labels: np.ndarray, num_clients: int, alpha: float, seed: int
) -> Partition:
    """Label-skew partition: each class is spread over clients by Dirichlet(alpha)."""
    labels = np.asarray(labels)
    if alpha <= 0:
        raise ContractError(f"dirichlet alpha must be positive, got {alpha}")
    if num_clients < 1 or num_clients > len(labels):
        raise ContractError(f"cannot split {len(labels)} samples over {num_clients} clients")
    rng = np.random.default_rng(derive_seed(seed, 0xD121))
    buckets: List[List[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        cuts = np.floor(np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    for k in range(num_clients):
        if not buckets[k]:
            donor = max(range(num_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    chunks = tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets)
    return Partition(chunks, "dirichlet", float(alpha), seed)


# ---------------------------------------------------------------------------
# missingness
# ---------------------------------------------------------------------------


def make_missing_matrix(n: int, m: int, p_m: float, p_s: float, seed: int) -> MissingMatrix:
    """Zero exactly round(p_m*M) random columns in exactly round(p_s*N) random rows."""
    if not (0 <= p_m <= 1 and 0 <= p_s <= 1):
        raise ContractError(f"p_m and p_s must be in [0, 1], got {p_m}, {p_s}")
    rng = np.random.default_rng(derive_seed(seed, 0x3A55))
    bits = np.ones((n, m), dtype=np.uint8)
    rows = rng.choice(n, size=round_half_up(p_s * n), replace=False) if n else np.zeros(0, int)
    per_row = round_half_up(p_m * m)
    if per_row and len(rows):
        # argsort of iid uniforms gives an independent uniform permutation per row
        cols = np.argsort(rng.random((len(rows), m)), axis=1)[:, :per_row]
        bits[rows[:, None], cols] = 0
    return MissingMatrix(bits, float(p_m), float(p_s), int(seed))


def apply_missing(dataset: ModalDataset, psi: MissingMatrix) -> ModalDataset:
    n, m = len(dataset), dataset.num_modalities
    if psi.bits.shape != (n, m):
        raise ContractError(f"missing matrix {psi.bits.shape} does not match dataset ({n}, {m})")
    keep = psi.bits.astype(bool)
    x = dataset.x * keep[:, :, None]
    return ModalDataset(x, dataset.presence & keep, dataset.labels.copy(), dataset.num_classes)


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------


def dataset_to_bytes(dataset: ModalDataset) -> bytes:
    n, m, d = dataset.x.shape
    header = DATASET_MAGIC + struct.pack("<4I", n, m, dataset.num_classes, d)
    rec = np.dtype([("label", "<u4"), ("presence", "u1", (m,)), ("x", "<f8", (m * d,))])
    body = np.empty(n, dtype=rec)
    body["label"] = dataset.labels
    body["presence"] = dataset.presence
    body["x"] = dataset.x.reshape(n, m * d)
    return header + body.tobytes()


def dataset_from_bytes(blob: bytes) -> ModalDataset:
    if len(blob) < 4 or blob[:4] != DATASET_MAGIC:
        raise DataFormatError("bad dataset magic", 0)
    if len(blob) < 20:
        raise DataFormatError("truncated dataset header", len(blob))
    n, m, c, d = struct.unpack_from("<4I", blob, 4)
    if c < 1 and n:
        raise DataFormatError("dataset declares zero classes", 12)
    rec = np.dtype([("label", "<u4"), ("presence", "u1", (m,)), ("x", "<f8", (m * d,))])
    expected = 20 + n * rec.itemsize
    if len(blob) < expected:
        offset = 20 + (len(blob) - 20) // rec.itemsize * rec.itemsize
        raise DataFormatError(f"truncated dataset: {n} records declared", offset)
    if len(blob) > expected:
        raise DataFormatError("trailing bytes after last record", expected)
    body = np.frombuffer(blob, dtype=rec, count=n, offset=20)
    presence = body["presence"]
    if np.any(presence > 1):
        i = int(np.argmax((presence > 1).any(axis=1)))
        raise DataFormatError("presence byte not 0/1", 20 + i * rec.itemsize + 4)
    labels = body["label"].astype(np.int64)
    if n and labels.max() >= c:
        i = int(np.argmax(labels >= c))
        raise DataFormatError(f"label outside [0, {c})", 20 + i * rec.itemsize)
    x = body["x"].astype(np.float64).reshape(n, m, d)
    return ModalDataset(x, presence.astype(bool), labels, int(c))


def save_dataset(dataset: ModalDataset, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path: Union[str, Path]) -> ModalDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def mask_to_bytes(psi: MissingMatrix) -> bytes:
    n, m = psi.bits.shape
    packed = np.packbits(psi.bits.reshape(-1).astype(np.uint8), bitorder="big")
    return (
        MASK_MAGIC
        + struct.pack("<2I", n, m)
        + packed.tobytes()
        + struct.pack("<2dQ", psi.p_m, psi.p_s, psi.seed & 0xFFFFFFFFFFFFFFFF)
    )


def mask_from_bytes(blob: bytes) -> MissingMatrix:
    if len(blob) < 4 or blob[:4] != MASK_MAGIC:
        raise DataFormatError("bad missing-matrix magic", 0)
    if len(blob) < 12:
        raise DataFormatError("truncated missing-matrix header", len(blob))
    n, m = struct.unpack_from("<2I", blob, 4)
    nbytes = (n * m + 7) // 8
    expected = 12 + nbytes + 24
    if len(blob) != expected:
        raise DataFormatError(
            f"missing-matrix size mismatch: expected {expected} bytes, got {len(blob)}",
            min(len(blob), expected),
        )
    bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, 12), count=n * m, bitorder="big")
    p_m, p_s, seed = struct.unpack_from("<2dQ", blob, 12 + nbytes)
    return MissingMatrix(bits.reshape(n, m).astype(np.uint8), p_m, p_s, int(seed))


def save_mask(psi: MissingMatrix, path: Union[str, Path]) -> None:
    Path(path).write_bytes(mask_to_bytes(psi))


def load_mask(path: Union[str, Path]) -> MissingMatrix:
    return mask_from_bytes(Path(path).read_bytes())
