"""Client local training, FedAvg aggregation, server evaluation and rounds."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .datagen import ModalDataset, derive_seed
from .errors import ContractError
from .model import ModelConfig, forward
from .params import ModelParams, sgd_step

METHODS = ("fedmac", "fedc", "fedma", "zero_impute", "fedprox_zero_impute")

_VARIANT = {
    "fedmac": "full",
    "fedma": "full",
    "fedc": "no_aggregation",
    "zero_impute": "zero_impute",
    "fedprox_zero_impute": "zero_impute",
}

# sub-seed stream tags
_SHUFFLE = 0x5F1E
_PARTICIPATION = 0x9A47


@dataclass(frozen=True)
class MethodConfig:
    method: str = "fedmac"
    lam: float = 0.1
    tau: float = 1.0
    norm_mode: str = "query"
    mu: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    lr: float = 0.01
    reduction: str = "mean"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.mu < 0 or self.epochs < 1 or self.batch_size < 1 or self.lam < 0 or self.tau <= 0:
            raise ContractError(f"invalid method config {self}")

    @property
    def variant(self) -> str:
        return _VARIANT[self.method]

    @property
    def effective_lambda(self) -> float:
        if self.method in ("fedma", "zero_impute", "fedprox_zero_impute"):
            return 0.0
        return self.lam

    @property
    def proximal(self) -> bool:
        return self.method == "fedprox_zero_impute"


@dataclass
class ClientState:
    client_id: int
    data: ModalDataset
    seed: int

    def __post_init__(self):
        if len(self.data) < 1:
            raise ContractError(f"client {self.client_id} has an empty dataset")

    @property
    def num_samples(self) -> int:
        return len(self.data)


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    task_loss: float
    shared_loss: float
    sim_loss: float
    total_loss: float
    client_samples: List[int] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class ServerState:
    params: ModelParams
    round: int
    test_set: ModalDataset
    missing_stats: Tuple[float, float] = (0.0, 0.0)
    history: List[RoundRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def batch_objective(
    P: Dict[str, Tensor],
    x: np.ndarray,
    presence: np.ndarray,
    labels: np.ndarray,
    model_cfg: ModelConfig,
    cfg: MethodConfig,
    anchor: Optional[ModelParams] = None,
) -> Tuple[Tensor, losses.LossBreakdown]:
    """Differentiable local loss for one mini-batch under ``cfg.method``."""
    model_cfg = replace(model_cfg, tau=cfg.tau, norm_mode=cfg.norm_mode)
    out = forward(x, presence, P, model_cfg, cfg.variant)
    task = losses.task_loss(out.logits, labels)
    lam = cfg.effective_lambda
    shared = sim = None
    if lam > 0 and out.reps is not None:
        reps = out.reps
        R_H = ad.cosine_matrix(reps.H_rows)
        shared = losses.contrastive_shared(
            losses.similarity_space(R_H, reps.instance, reps.modality, reps.is_embedding),
            cfg.tau,
            cfg.reduction,
        )
        sim = losses.contrastive_sim(
            losses.similarity_space(out.S_Z, reps.instance, reps.modality, reps.is_embedding),
            cfg.tau,
            cfg.reduction,
        )
    total = losses.total_loss(task, shared, sim, lam)
    prox_value = 0.0
    if cfg.proximal and cfg.mu > 0:
        if anchor is None:
            raise ContractError("fedprox objective needs the round's global parameters")
        prox = None
        for name, t in P.items():
            diff = t - anchor[name]
            term = ad.sum_(diff * diff)
            prox = term if prox is None else prox + term
        prox = prox * (cfg.mu / 2.0)
        prox_value = float(prox.data)
        total = total + prox
    breakdown = losses.LossBreakdown(
        task=float(task.data),
        shared=float(shared.data) if shared is not None else 0.0,
        sim=float(sim.data) if sim is not None else 0.0,
        total=float(total.data),
        lam=lam,
        tau=cfg.tau,
        prox=prox_value,
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def epoch_batches(n: int, batch_size: int, seed: int) -> List[np.ndarray]:
    """Shuffled mini-batch index lists; the last partial batch is kept."""
    perm = np.random.default_rng(seed).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def local_sgd(
    params: ModelParams,
    data: ModalDataset,
    model_cfg: ModelConfig,
    cfg: MethodConfig,
    epoch_seeds: Sequence[int],
    anchor: Optional[ModelParams] = None,
) -> Tuple[ModelParams, List[losses.LossBreakdown]]:
    """Mini-batch SGD, one epoch per entry of ``epoch_seeds``."""
    history = []
    for seed in epoch_seeds:
        for idx in epoch_batches(len(data), cfg.batch_size, seed):
            P = params.bind()
            loss, parts = batch_objective(
                P, data.x[idx], data.presence[idx], data.labels[idx], model_cfg, cfg, anchor
            )
            grads = ad.backward(loss, P.values())
            params = sgd_step(params, grads, cfg.lr)
            history.append(parts)
    return params, history


def client_epoch_seeds(experiment_seed: int, client_id: int, round_index: int, epochs: int) -> List[int]:
    base = derive_seed(experiment_seed, client_id, round_index, _SHUFFLE)
    return [derive_seed(base, e) for e in range(epochs)]


def client_local_train(
    global_params: ModelParams,
    client: ClientState,
    model_cfg: ModelConfig,
    cfg: MethodConfig,
    round_index: int,
) -> Tuple[ModelParams, int, List[losses.LossBreakdown]]:
    seeds = client_epoch_seeds(client.seed, client.client_id, round_index, cfg.epochs)
    anchor = global_params if cfg.proximal else None
    local, hist = local_sgd(global_params, client.data, model_cfg, cfg, seeds, anchor)
    return local, client.num_samples, hist


def train_centralized(
    params: ModelParams,
    data: ModalDataset,
    model_cfg: ModelConfig,
    cfg: MethodConfig,
    seed: int,
    rounds: int,
) -> ModelParams:
    """Plain SGD for rounds*E epochs, shuffled exactly like client 0 of a K=1 run."""
    for t in range(rounds):
        seeds = client_epoch_seeds(seed, 0, t, cfg.epochs)
        anchor = params if cfg.proximal else None
        params, _ = local_sgd(params, data, model_cfg, cfg, seeds, anchor)
    return params


def fedavg_aggregate(updates: Sequence[Tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count weighted mean of client parameters."""
    if not updates:
        raise ContractError("fedavg_aggregate: no client updates")
    first = updates[0][0]
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ContractError("fedavg_aggregate: total sample count must be positive")
    weights = [n / total for _, n in updates]
    out = {}
    for name in first:
        shape = first[name].shape
        for k, (p, _) in enumerate(updates):
            if name not in p or p[name].shape != shape:
                got = p[name].shape if name in p else "missing"
                raise ContractError(
                    f"fedavg_aggregate: parameter {name!r} of client {k} has shape {got}, "
                    f"client 0 has {shape}"
                )
        acc = np.zeros(shape)
        for w, (p, _) in zip(weights, updates):
            acc = acc + w * p[name]
        out[name] = acc
    return ModelParams(out)


# ---------------------------------------------------------------------------
# evaluation and rounds
# ---------------------------------------------------------------------------


def predict_logits(params: ModelParams, data: ModalDataset, model_cfg: ModelConfig, cfg: MethodConfig, batch_size: Optional[int] = None) -> np.ndarray:
    """Logits for every sample, batched in content-digest order."""
    if len(data) == 0:
        raise ContractError("evaluate: empty test set")
    bs = batch_size or cfg.batch_size
    model_cfg = replace(model_cfg, tau=cfg.tau, norm_mode=cfg.norm_mode)
    order = data.content_order()
    P = params.bind(requires_grad=False)
    out = np.zeros((len(data), model_cfg.num_classes))
    for start in range(0, len(order), bs):
        idx = order[start : start + bs]
        res = forward(data.x[idx], data.presence[idx], P, model_cfg, cfg.variant)
        out[idx] = res.logits.data
    return out


def evaluate(params: ModelParams, data: ModalDataset, model_cfg: ModelConfig, cfg: MethodConfig, batch_size: Optional[int] = None) -> Tuple[float, float]:
    """(accuracy, mean cross-entropy) on ``data``; argmax ties go to the lowest class."""
    logits = predict_logits(params, data, model_cfg, cfg, batch_size)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == data.labels))
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = float(np.mean(lse - shifted[np.arange(len(data)), data.labels]))
    return acc, nll


def participating_clients(num_clients: int, fraction: float, seed: int, round_index: int) -> List[int]:
    if fraction >= 1.0:
        return list(range(num_clients))
    count = max(1, int(round(fraction * num_clients)))
    rng = np.random.default_rng(derive_seed(seed, round_index, _PARTICIPATION))
    return sorted(rng.choice(num_clients, size=count, replace=False).tolist())


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    model_cfg: ModelConfig,
    cfg: MethodConfig,
    participation: float = 1.0,
    seed: int = 0,
    threads: int = 1,
    evaluate_now: bool = True,
    eval_batch_size: Optional[int] = None,
) -> Tuple[ServerState, RoundRecord]:
    """Broadcast, train participating clients, aggregate, evaluate.

    Client results are collected by client index so the outcome does not
    depend on thread scheduling.
    """
    if not clients:
        raise ContractError("run_round: no clients")
    started = time.perf_counter()
    t = server.round
    chosen = [clients[k] for k in participating_clients(len(clients), participation, seed, t)]

    def train(client: ClientState):
        return client_local_train(server.params, client, model_cfg, cfg, t)

    if threads > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(train, chosen))
    else:
        results = [train(c) for c in chosen]

    new_params = fedavg_aggregate([(p, n) for p, n, _ in results])
    parts = [b for _, _, hist in results for b in hist]
    acc, test_loss = (evaluate(new_params, server.test_set, model_cfg, cfg, eval_batch_size) if evaluate_now else (float("nan"), float("nan")))
    record = RoundRecord(
        round=t + 1,
        accuracy=acc,
        task_loss=_mean([b.task for b in parts]),
        shared_loss=_mean([b.shared for b in parts]),
        sim_loss=_mean([b.sim for b in parts]),
        total_loss=_mean([b.total for b in parts]),
        client_samples=[n for _, n, _ in results],
        seconds=time.perf_counter() - started,
    )
    new_server = ServerState(
        params=new_params,
        round=t + 1,
        test_set=server.test_set,
        missing_stats=server.missing_stats,
        history=server.history + [record],
    )
    return new_server, record


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else 0.0
