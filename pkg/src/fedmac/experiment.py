"""End-to-end experiment: data -> split -> partition -> masking -> rounds -> files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._runtime import tune_allocator
from .config import ExperimentConfig, MissingStats, config_to_dict
from .datagen import (
    ModalDataset,
    apply_missing,
    derive_seed,
    load_dataset,
    make_missing_matrix,
    partition_dirichlet,
    partition_iid,
    split_server,
    synth_generate,
)
from .errors import ContractError
from .federation import ClientState, RoundRecord, ServerState, evaluate, run_round
from .model import param_layout
from .params import ModelParams, init_params, save_params

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("round", "accuracy", "task_loss", "shared_loss", "sim_loss", "total_loss", "seconds")

# sub-seed stream tags
_DATA, _SPLIT, _PARTITION, _CLIENT_MASK, _SERVER_MASK, _INIT = 1, 2, 3, 4, 5, 6


@dataclass
class Setup:
    clients: List[ClientState]
    test_set: ModalDataset
    params: ModelParams


@dataclass
class ExperimentResult:
    history: List[RoundRecord]
    params: ModelParams
    metrics_csv: Optional[Path] = None
    metrics_jsonl: Optional[Path] = None
    checkpoint: Optional[Path] = None

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].accuracy


def build_dataset(cfg: ExperimentConfig) -> ModalDataset:
    d = cfg.data
    if d.source == "file":
        return load_dataset(d.path)
    return synth_generate(d.N, d.C, d.M, d.d_in, d.noise_std, derive_seed(cfg.run.seed, _DATA))


def mask_dataset(data: ModalDataset, stats: MissingStats, seed: int) -> ModalDataset:
    psi = make_missing_matrix(len(data), data.num_modalities, stats.p_m, stats.p_s, seed)
    return apply_missing(data, psi)


def setup(cfg: ExperimentConfig) -> Setup:
    seed = cfg.run.seed
    dataset = build_dataset(cfg)
    pool, test = split_server(dataset, cfg.data.split_ratio, derive_seed(seed, _SPLIT))
    f = cfg.federation
    if f.scheme == "dirichlet":
        part = partition_dirichlet(pool.labels, f.K, f.dirichlet_alpha, derive_seed(seed, _PARTITION))
    else:
        part = partition_iid(len(pool), f.K, derive_seed(seed, _PARTITION))
    clients = []
    for k, idx in enumerate(part.client_indices):
        local = mask_dataset(pool.subset(idx), cfg.missing.client, derive_seed(seed, _CLIENT_MASK, k))
        if cfg.missing.min_present_modalities > 0:
            keep = local.presence.sum(axis=1) >= cfg.missing.min_present_modalities
            local = local.subset(np.flatnonzero(keep))
        if len(local) == 0:
            raise ContractError(f"client {k} has no samples left after filtering")
        clients.append(ClientState(k, local, seed))
    test = mask_dataset(test, cfg.missing.server, derive_seed(seed, _SERVER_MASK))
    model_cfg = cfg.model_config(dataset.num_modalities, dataset.d_in, dataset.num_classes)
    params = init_params(param_layout(model_cfg), derive_seed(seed, _INIT))
    return Setup(clients, test, params)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run T communication rounds and (optionally) write metrics and the final checkpoint."""
    tune_allocator()
    s = setup(cfg)
    model_cfg = cfg.model_config(s.test_set.num_modalities, s.test_set.d_in, s.test_set.num_classes)
    method_cfg = cfg.method_config()
    f = cfg.federation
    eval_bs = f.eval_batch_size or f.B
    server = ServerState(s.params, 0, s.test_set, (cfg.missing.server.p_m, cfg.missing.server.p_s))

    started = time.perf_counter()
    acc0, _ = evaluate(server.params, s.test_set, model_cfg, method_cfg, eval_bs)
    nan = float("nan")
    history = [RoundRecord(0, acc0, nan, nan, nan, nan, [c.num_samples for c in s.clients], 0.0)]
    for t in range(f.T):
        last = t + 1 == f.T
        server, record = run_round(
            server,
            s.clients,
            model_cfg,
            method_cfg,
            participation=f.participation,
            seed=cfg.run.seed,
            threads=cfg.run.threads,
            evaluate_now=last or (t + 1) % f.eval_interval == 0,
            eval_batch_size=eval_bs,
        )
        record.seconds = time.perf_counter() - started
        history.append(record)
        log.info("round %d acc=%.4f loss=%.4f", record.round, record.accuracy, record.total_loss)

    result = ExperimentResult(history, server.params)
    if write:
        out = Path(cfg.run.output)
        out.mkdir(parents=True, exist_ok=True)
        result.metrics_csv = out / "metrics.csv"
        result.metrics_jsonl = out / "metrics.jsonl"
        result.checkpoint = out / "final.fmc"
        result.metrics_csv.write_text(metrics_csv(history, cfg.run.timing))
        result.metrics_jsonl.write_text(metrics_jsonl(history, cfg, cfg.run.timing))
        save_params(server.params, result.checkpoint)
    return result


def _num(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def metrics_csv(history: Sequence[RoundRecord], timing: bool = False) -> str:
    """CSV text; ``seconds`` is wall-clock only when ``timing`` is on, else 0.0."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in history:
        secs = r.seconds if timing else 0.0
        w.writerow([r.round, _num(r.accuracy), _num(r.task_loss), _num(r.shared_loss), _num(r.sim_loss), _num(r.total_loss), _num(secs)])
    return buf.getvalue()


def _json_num(x: float):
    return None if math.isnan(x) else float(x)


def metrics_jsonl(history: Sequence[RoundRecord], cfg: ExperimentConfig, timing: bool = False) -> str:
    lines = [json.dumps({"type": "config", "config": config_to_dict(cfg)}, sort_keys=True)]
    for r in history:
        lines.append(
            json.dumps(
                {
                    "type": "round",
                    "round": r.round,
                    "accuracy": _json_num(r.accuracy),
                    "task_loss": _json_num(r.task_loss),
                    "shared_loss": _json_num(r.shared_loss),
                    "sim_loss": _json_num(r.sim_loss),
                    "total_loss": _json_num(r.total_loss),
                    "client_samples": r.client_samples,
                    "seconds": r.seconds if timing else 0.0,
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n"


def sweep(
    cfg: ExperimentConfig,
    settings: Sequence[Tuple[float, float]],
    methods: Sequence[str],
    write_runs: bool = True,
) -> List[dict]:
    """One run per (method, (p_m, p_s)); client and server share the statistics."""
    if not settings:
        raise ContractError("sweep: empty missing-statistics axis")
    if not methods:
        raise ContractError("sweep: no methods")
    rows = []
    base_out = Path(cfg.run.output)
    for p_m, p_s in settings:
        stats = MissingStats(float(p_m), float(p_s))
        for method in methods:
            run_dir = base_out / f"{method}_pm{p_m:g}_ps{p_s:g}"
            run_cfg = replace(
                cfg,
                missing=replace(cfg.missing, client=stats, server=stats),
                method=replace(cfg.method, name=method),
                run=replace(cfg.run, output=str(run_dir)),
            )
            res = run_experiment(run_cfg, write=write_runs)
            rows.append(
                {
                    "method": method,
                    "p_m": float(p_m),
                    "p_s": float(p_s),
                    "lambda": run_cfg.method_config().effective_lambda,
                    "final_accuracy": res.final_accuracy,
                    "rounds": run_cfg.federation.T,
                }
            )
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("method", "p_m", "p_s", "lambda", "final_accuracy", "rounds")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
    return buf.getvalue()
