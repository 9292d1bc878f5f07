"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .errors import ContractError, DeterminismError
from .params import ModelParams

Closure = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    epsilon: float = 1e-6

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self):
        for name, err in self.max_rel_error.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            yield f"{name:<24s} max_rel_err={err:.3e} {flag}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def grad_check(
    closure: Closure,
    params: ModelParams,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare backward() against (f(θ+ε) - f(θ-ε)) / 2ε for every entry.

    ``closure`` receives a name -> Tensor mapping and must return a scalar
    loss built from those tensors. Only parameters the loss actually depends
    on are reported, unless ``names`` restricts the set further.
    """
    if epsilon <= 0:
        raise ContractError(f"grad_check: epsilon must be positive, got {epsilon}")
    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)
    if len(params) == 0:
        return report

    def value(p: ModelParams) -> float:
        return float(closure(p.bind(requires_grad=False)).data)

    first, second = value(params), value(params)
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise DeterminismError(f"grad_check: closure not deterministic ({first!r} vs {second!r})")

    bound = params.bind(requires_grad=True)
    grads = backward(closure(bound))
    check = [n for n in params if n in grads and (names is None or n in names)]

    for name in check:
        base = np.array(params[name])
        numeric = np.empty_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[j] += epsilon
            up = value(params.replace(**{name: bumped.reshape(base.shape)}))
            bumped[j] -= 2 * epsilon
            down = value(params.replace(**{name: bumped.reshape(base.shape)}))
            flat[j] = (up - down) / (2 * epsilon)
        err = relative_error(np.asarray(grads[name]), numeric)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report


@dataclass(frozen=True)
class TinyProblem:
    """Settings for the end-to-end check of the complete training objective."""

    method: str = "fedmac"
    num_modalities: int = 3
    d_in: int = 4
    d_h: int = 8
    num_classes: int = 3
    batch_size: int = 4
    lam: float = 0.1
    tau: float = 1.0
    norm_mode: str = "query"
    p_m: float = 0.5
    p_s: float = 0.5
    seed: int = 0
    # zero biases put the ReLU pre-activations of zero-filled slots exactly on
    # the kink, where finite differences are meaningless; jitter moves off it
    jitter: float = 0.05


def check_objective(problem: TinyProblem = TinyProblem(), epsilon: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Gradient-check the local objective of ``problem.method`` on one random batch.

    Parameters the method's graph never touches (e.g. the fusion gate for
    ``fedc``) are left out of the report.
    """
    # local imports: federation pulls in the model, which this module does not otherwise need
    from .datagen import apply_missing, derive_seed, make_missing_matrix, synth_generate
    from .federation import MethodConfig, batch_objective
    from .model import ModelConfig, param_layout
    from .params import init_params

    pr = problem
    data = synth_generate(pr.batch_size, pr.num_classes, pr.num_modalities, pr.d_in, 0.3, derive_seed(pr.seed, 1))
    psi = make_missing_matrix(pr.batch_size, pr.num_modalities, pr.p_m, pr.p_s, derive_seed(pr.seed, 2))
    data = apply_missing(data, psi)
    model_cfg = ModelConfig(pr.num_modalities, pr.d_in, pr.d_h, pr.num_classes, tau=pr.tau, norm_mode=pr.norm_mode)
    method_cfg = MethodConfig(pr.method, lam=pr.lam, tau=pr.tau, norm_mode=pr.norm_mode, batch_size=pr.batch_size)
    params = init_params(param_layout(model_cfg), derive_seed(pr.seed, 3))
    if pr.jitter > 0:
        rng = np.random.default_rng(derive_seed(pr.seed, 5))
        params = ModelParams({k: v + pr.jitter * rng.standard_normal(v.shape) for k, v in params.items()})
    anchor = None
    if method_cfg.proximal:
        # anchor away from the evaluation point so the proximal gradient is non-zero
        anchor = init_params(param_layout(model_cfg), derive_seed(pr.seed, 4))

    def closure(P):
        loss, _ = batch_objective(P, data.x, data.presence, data.labels, model_cfg, method_cfg, anchor)
        return loss

    return grad_check(closure, params, epsilon=epsilon, tolerance=tolerance)
