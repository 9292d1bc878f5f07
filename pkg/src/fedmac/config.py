"""Experiment configuration: INI-style sectioned files, strict validation.

Example::

    [run]
    seed = 0
    output = runs/demo

    [federation]
    K = 8
    T = 60

    [missing.client]
    p_m = 0.8
    p_s = 0.5

Unknown sections or keys are rejected. ``preset = published`` in ``[run]`` swaps
the desk-scale defaults for the published experiment settings; explicit keys
still win.
"""

from __future__ import annotations

import configparser
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .errors import ConfigError
from .federation import METHODS, MethodConfig
from .losses import REDUCTIONS, default_lambda
from .model import NORM_MODES, ModelConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output: str = "runs/default"
    threads: int = 1
    preset: str = "desk"
    timing: bool = False


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    path: str = ""
    N: int = 1000
    C: int = 5
    M: int = 12
    d_in: int = 16
    noise_std: float = 0.3
    split_ratio: float = 0.8


@dataclass(frozen=True)
class FederationSection:
    K: int = 8
    T: int = 60
    E: int = 3
    B: int = 32
    lr: float = 0.01
    participation: float = 1.0
    scheme: str = "iid"
    dirichlet_alpha: float = 0.9
    eval_interval: int = 1
    eval_batch_size: int = 0  # 0 -> same as B


@dataclass(frozen=True)
class MissingStats:
    p_m: float = 0.8
    p_s: float = 0.5


@dataclass(frozen=True)
class MissingSection:
    min_present_modalities: int = 0
    client: MissingStats = field(default_factory=MissingStats)
    server: MissingStats = field(default_factory=MissingStats)


@dataclass(frozen=True)
class MethodSection:
    name: str = "fedmac"
    # None means "pick from the client missing degree"
    lam: Optional[float] = None
    tau: float = 1.0
    norm_mode: str = "query"
    mu: float = 0.01
    reduction: str = "mean"
    embedding_sources: bool = True


@dataclass(frozen=True)
class ModelSection:
    d_h: int = 16
    per_modality_extractor: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    federation: FederationSection = field(default_factory=FederationSection)
    missing: MissingSection = field(default_factory=MissingSection)
    method: MethodSection = field(default_factory=MethodSection)
    model: ModelSection = field(default_factory=ModelSection)

    @property
    def lam(self) -> float:
        if self.method.lam is not None:
            return self.method.lam
        return default_lambda(self.missing.client.p_m, self.missing.client.p_s)

    def model_config(self, num_modalities: Optional[int] = None, d_in: Optional[int] = None, num_classes: Optional[int] = None) -> ModelConfig:
        return ModelConfig(
            num_modalities=num_modalities or self.data.M,
            d_in=d_in or self.data.d_in,
            d_h=self.model.d_h,
            num_classes=num_classes or self.data.C,
            per_modality_extractor=self.model.per_modality_extractor,
            tau=self.method.tau,
            norm_mode=self.method.norm_mode,
            embedding_sources=self.method.embedding_sources,
        )

    def method_config(self) -> MethodConfig:
        return MethodConfig(
            method=self.method.name,
            lam=self.lam,
            tau=self.method.tau,
            norm_mode=self.method.norm_mode,
            mu=self.method.mu,
            epochs=self.federation.E,
            batch_size=self.federation.B,
            lr=self.federation.lr,
            reduction=self.method.reduction,
        )


# external key -> dataclass field, where they differ
_ALIASES = {("method", "lambda"): "lam"}
_REVERSE_ALIASES = {(s, f): k for (s, k), f in _ALIASES.items()}


def published_overrides(scheme: str = "iid") -> Dict[str, Dict[str, Any]]:
    """Published experiment settings (32 clients, 1000 rounds, d_h = 128, ...)."""
    return {
        "federation": {"K": 32, "T": 1000, "E": 3, "B": 32, "lr": 0.008 if scheme == "dirichlet" else 0.01},
        "model": {"d_h": 128},
        "method": {"tau": 1.0, "lambda": None},
        "data": {"M": 12, "C": 5},
    }


def _coerce(path: str, raw: Any, typ: Any) -> Any:
    optional = typ == Optional[float]
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("auto", "none", "")):
        if optional:
            return None
        if typ is str and raw is not None:
            return raw
        raise ConfigError(path, "a value is required")
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError(raw)
            return int(str(raw).strip()) if isinstance(raw, str) else int(raw)
        if typ is float or optional:
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw)
        if typ is str:
            return str(raw).strip()
    except ValueError:
        name = "number" if typ in (int, float) or optional else typ.__name__
        raise ConfigError(path, f"cannot parse {raw!r} as {name}") from None
    raise ConfigError(path, f"unsupported field type {typ}")


def _build(cls, section: str, values: Mapping[str, Any]):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, raw in values.items():
        fname = _ALIASES.get((section, key), key)
        path = f"{section}.{key}" if section else key
        if fname not in known:
            raise ConfigError(path, "unknown key")
        kwargs[fname] = raw
    resolved = {}
    hints = _type_hints(cls)
    for fname, raw in kwargs.items():
        path = f"{section}.{_REVERSE_ALIASES.get((section, fname), fname)}"
        resolved[fname] = _coerce(path, raw, hints[fname])
    return cls(**resolved)


def _type_hints(cls):
    return typing.get_type_hints(cls)


_SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "federation": FederationSection,
    "method": MethodSection,
    "model": ModelSection,
}


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Build and validate from ``{"section": {"key": value}}``; missing sub-sections get defaults.

    ``missing`` may hold nested ``client``/``server`` dicts, and dotted
    section names (``"missing.client"``) are accepted as well.
    """
    sections: Dict[str, Dict[str, Any]] = {}
    for name, body in raw.items():
        if not isinstance(body, Mapping):
            raise ConfigError(name, "expected a section of key/value pairs")
        if name == "missing":
            flat = {}
            for k, v in body.items():
                if k in ("client", "server"):
                    if not isinstance(v, Mapping):
                        raise ConfigError(f"missing.{k}", "expected a section of key/value pairs")
                    sections.setdefault(f"missing.{k}", {}).update(v)
                else:
                    flat[k] = v
            sections.setdefault("missing", {}).update(flat)
        else:
            sections.setdefault(name, {}).update(body)

    allowed = set(_SECTIONS) | {"missing", "missing.client", "missing.server"}
    for name in sections:
        if name not in allowed:
            raise ConfigError(name, "unknown section")

    run_raw = sections.get("run", {})
    preset = str(run_raw.get("preset", "desk")).strip()
    if preset not in ("desk", "published"):
        raise ConfigError("run.preset", f"expected 'desk' or 'published', got {preset!r}")
    if preset == "published":
        scheme = str(sections.get("federation", {}).get("scheme", "iid")).strip()
        for sec, defaults in published_overrides(scheme).items():
            merged = dict(defaults)
            merged.update(sections.get(sec, {}))
            sections[sec] = merged

    built = {name: _build(cls, name, sections.get(name, {})) for name, cls in _SECTIONS.items()}
    missing = MissingSection(
        min_present_modalities=_build(_MinPresent, "missing", sections.get("missing", {})).min_present_modalities,
        client=_build(MissingStats, "missing.client", sections.get("missing.client", {})),
        server=_build(MissingStats, "missing.server", sections.get("missing.server", {})),
    )
    cfg = ExperimentConfig(missing=missing, **built)
    validate(cfg)
    return cfg


@dataclass(frozen=True)
class _MinPresent:
    min_present_modalities: int = 0


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _prob(value: float, path: str) -> None:
    _check(0.0 <= value <= 1.0, path, f"must be in [0, 1], got {value}")


def validate(cfg: ExperimentConfig) -> None:
    d, f, m, me, mo, r = cfg.data, cfg.federation, cfg.missing, cfg.method, cfg.model, cfg.run
    _check(r.threads >= 1, "run.threads", "must be >= 1")
    _check(d.source in ("synthetic", "file"), "data.source", "must be 'synthetic' or 'file'")
    _check(d.source != "file" or bool(d.path), "data.path", "required when data.source = file")
    for key in ("N", "C", "M", "d_in"):
        _check(getattr(d, key) >= 1, f"data.{key}", "must be >= 1")
    _check(d.C >= 2, "data.C", "need at least 2 classes")
    _check(d.M >= 2, "data.M", "need at least 2 modalities")
    _check(d.noise_std >= 0, "data.noise_std", "must be >= 0")
    _check(0 < d.split_ratio < 1, "data.split_ratio", "must be in (0, 1)")
    for key in ("K", "E", "B", "eval_interval"):
        _check(getattr(f, key) >= 1, f"federation.{key}", "must be >= 1")
    _check(f.T >= 0, "federation.T", "must be >= 0")
    _check(f.eval_batch_size >= 0, "federation.eval_batch_size", "must be >= 0")
    _check(f.lr > 0, "federation.lr", "must be > 0")
    _prob(f.participation, "federation.participation")
    _check(f.participation > 0, "federation.participation", "must be > 0")
    _check(f.scheme in ("iid", "dirichlet"), "federation.scheme", "must be 'iid' or 'dirichlet'")
    _check(f.dirichlet_alpha > 0, "federation.dirichlet_alpha", "must be > 0")
    _prob(m.client.p_m, "missing.client.p_m")
    _prob(m.client.p_s, "missing.client.p_s")
    _prob(m.server.p_m, "missing.server.p_m")
    _prob(m.server.p_s, "missing.server.p_s")
    _check(0 <= m.min_present_modalities <= d.M, "missing.min_present_modalities", "must be in [0, M]")
    _check(me.name in METHODS, "method.name", f"must be one of {', '.join(METHODS)}")
    _check(me.lam is None or me.lam >= 0, "method.lambda", "must be >= 0")
    _check(me.tau > 0, "method.tau", "must be > 0")
    _check(me.mu >= 0, "method.mu", "must be >= 0")
    _check(me.norm_mode in NORM_MODES, "method.norm_mode", f"must be one of {NORM_MODES}")
    _check(me.reduction in REDUCTIONS, "method.reduction", f"must be one of {REDUCTIONS}")
    _check(mo.d_h >= 1, "model.d_h", "must be >= 1")
    _check(cfg.data.N >= 2 * cfg.data.C, "data.N", "need at least two samples per class")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"cannot read {p}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (K, T, N, ...)
    try:
        parser.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError("config", f"syntax error: {exc}") from None
    raw = {name: dict(parser.items(name)) for name in parser.sections()}
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Resolved configuration (lambda made explicit) in the nested file layout."""
    out: Dict[str, Any] = {}
    for name in ("run", "data", "federation", "method", "model"):
        body = asdict(getattr(cfg, name))
        if name == "method":
            body.pop("lam")
            body = {"name": body.pop("name"), "lambda": cfg.lam, **body}
        out[name] = body
    out["missing"] = {
        "min_present_modalities": cfg.missing.min_present_modalities,
        "client": asdict(cfg.missing.client),
        "server": asdict(cfg.missing.server),
    }
    return out


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, output: Optional[str] = None, threads: Optional[int] = None) -> ExperimentConfig:
    run = cfg.run
    if seed is not None:
        run = replace(run, seed=seed)
    if output is not None:
        run = replace(run, output=output)
    if threads is not None:
        run = replace(run, threads=threads)
    out = replace(cfg, run=run)
    validate(out)
    return out


def dump_ini(cfg: ExperimentConfig) -> str:
    """Render a config back to the sectioned text format."""
    lines = []
    d = config_to_dict(cfg)
    missing = d.pop("missing")
    for name, body in d.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in body.items())
        lines.append("")
    lines.append("[missing]")
    lines.append(f"min_present_modalities = {missing['min_present_modalities']}")
    lines.append("")
    for side in ("client", "server"):
        lines.append(f"[missing.{side}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in missing[side].items())
        lines.append("")
    return "\n".join(lines)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
