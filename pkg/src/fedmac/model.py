"""FedMAC client network.

Pipeline per mini-batch of B instances with M modalities:

    x --shared extractor--> h_hat --imputation--> H (B, M, d_h)
    [H; embeddings] --per-modality MLP--> Z ((B+1)*M, d_h)
    S_Z = cos(Z, Z);  H_tilde = attention(S_Z) @ [H; embeddings]
    alpha = conv_gate(H || H_tilde);  g = alpha*H + (1-alpha)*H_tilde
    logits = decoder(concat_m g)

Rows of Z (and of the stacked feature matrix) are instance-major: row
``i*M + m`` is modality m of instance i, and the last M rows are the
imputation embeddings treated as one extra pseudo-instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .params import ParamSpec

NORM_MODES = ("query", "literal")
VARIANTS = ("full", "no_aggregation", "zero_impute")
FUSION_CHANNELS = (2, 4, 4, 1)


@dataclass(frozen=True)
class ModelConfig:
    num_modalities: int
    d_in: int
    d_h: int
    num_classes: int
    per_modality_extractor: bool = False
    tau: float = 1.0
    norm_mode: str = "query"
    # whether embedding pseudo-rows may act as aggregation sources for real rows
    embedding_sources: bool = True

    @property
    def extractor_hidden(self) -> int:
        return self.d_h

    @property
    def projection_hidden(self) -> int:
        # 2*d_h lets a ReLU MLP represent the identity exactly: relu(h) - relu(-h)
        return 2 * self.d_h


def param_layout(cfg: ModelConfig) -> List[ParamSpec]:
    m, d_in, d_h, hid, phid = (
        cfg.num_modalities,
        cfg.d_in,
        cfg.d_h,
        cfg.extractor_hidden,
        cfg.projection_hidden,
    )
    lead = (m,) if cfg.per_modality_extractor else ()
    bias_lead = (m, 1) if cfg.per_modality_extractor else ()
    layout = [
        ParamSpec("extractor.w1", lead + (d_in, hid)),
        ParamSpec("extractor.b1", bias_lead + (hid,), "bias"),
        ParamSpec("extractor.w2", lead + (hid, d_h)),
        ParamSpec("extractor.b2", bias_lead + (d_h,), "bias"),
        ParamSpec("embeddings", (m, d_h), "embedding"),
        ParamSpec("proj.w1", (m, d_h, phid)),
        ParamSpec("proj.b1", (m, 1, phid), "bias"),
        ParamSpec("proj.w2", (m, phid, d_h)),
        ParamSpec("proj.b2", (m, 1, d_h), "bias"),
    ]
    for k in range(3):
        c_in, c_out = FUSION_CHANNELS[k], FUSION_CHANNELS[k + 1]
        layout.append(ParamSpec(f"fusion.conv{k + 1}.w", (c_out, c_in, 3)))
        layout.append(ParamSpec(f"fusion.conv{k + 1}.b", (c_out,), "bias"))
    layout.append(ParamSpec("decoder.w", (m * d_h, cfg.num_classes)))
    layout.append(ParamSpec("decoder.b", (cfg.num_classes,), "bias"))
    return layout


# ---------------------------------------------------------------------------
# intermediate containers
# ---------------------------------------------------------------------------


@dataclass
class SpaceSharedFeatures:
    H: Tensor  # (B, M, d_h)
    source_mask: np.ndarray  # (B, M) True where the row came from real data


@dataclass
class ModalityWiseReps:
    Z: Tensor  # ((B+1)*M, d_h)
    H_rows: Tensor  # ((B+1)*M, d_h) features the Z rows were projected from
    instance: np.ndarray  # row -> instance id (B for the embedding pseudo-instance)
    modality: np.ndarray  # row -> modality id
    batch_size: int

    @property
    def is_embedding(self) -> np.ndarray:
        return self.instance == self.batch_size


@dataclass
class FusionOutput:
    alpha: Tensor  # (B, M, d_h)
    G: Tensor  # (B, M*d_h)


@dataclass
class AggregationOutput:
    H_tilde: Tensor  # (B, M, d_h)
    weights: Tensor  # (B*M, (B+1)*M); row t sums to 1


@dataclass
class ForwardOutput:
    logits: Tensor
    shared: SpaceSharedFeatures
    reps: Optional[ModalityWiseReps]
    S_Z: Optional[Tensor]
    aggregation: Optional[AggregationOutput]
    fusion: Optional[FusionOutput]


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------


def extract_shared(x, P: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Two-layer ReLU perceptron applied to every modality vector.

    ``x`` is (..., d_in); with ``per_modality_extractor`` it must be
    (B, M, d_in) so each modality can use its own weights.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != cfg.d_in:
        raise DimensionError(f"extract_shared: expected last dim {cfg.d_in}, got {x.shape}")
    if not cfg.per_modality_extractor:
        lead = x.shape[:-1]
        flat = x.reshape(-1, cfg.d_in)
        hidden = ad.relu(flat @ P["extractor.w1"] + P["extractor.b1"])
        out = hidden @ P["extractor.w2"] + P["extractor.b2"]
        return out.reshape(lead + (cfg.d_h,))
    if x.data.ndim != 3 or x.shape[1] != cfg.num_modalities:
        raise DimensionError(f"extract_shared: per-modality extractor needs (B, M, d_in), got {x.shape}")
    xt = ad.transpose(x, (1, 0, 2))
    hidden = ad.relu(xt @ P["extractor.w1"] + P["extractor.b1"])
    out = hidden @ P["extractor.w2"] + P["extractor.b2"]
    return ad.transpose(out, (1, 0, 2))


def impute(x, presence, P: Mapping[str, Tensor], cfg: ModelConfig, use_embeddings: bool = True) -> SpaceSharedFeatures:
    """Extract present modalities and fill absent ones with their embedding e^m.

    With ``use_embeddings=False`` absent slots keep the extractor's output on
    the zeroed input (plain zero imputation).
    """
    presence = np.asarray(presence, dtype=bool)
    if presence.ndim != 2 or presence.shape[0] == 0:
        raise ContractError("impute: batch must be non-empty")
    h_hat = extract_shared(x, P, cfg)
    if not use_embeddings:
        return SpaceSharedFeatures(h_hat, presence)
    keep = presence[:, :, None].astype(np.float64)
    H = h_hat * keep + ad.reshape(P["embeddings"], (1, cfg.num_modalities, cfg.d_h)) * (1.0 - keep)
    return SpaceSharedFeatures(H, presence)


def project_modality(H: Tensor, P: Mapping[str, Tensor], cfg: ModelConfig) -> ModalityWiseReps:
    """Per-modality one-hidden-layer MLP over all rows plus the embedding pseudo-instance."""
    b, m, d_h = H.shape
    emb = ad.reshape(P["embeddings"], (1, m, d_h))
    stacked = ad.concat([H, emb], axis=0)  # (B+1, M, d_h)
    by_mod = ad.transpose(stacked, (1, 0, 2))  # (M, B+1, d_h)
    hidden = ad.relu(by_mod @ P["proj.w1"] + P["proj.b1"])
    z = hidden @ P["proj.w2"] + P["proj.b2"]
    rows = (b + 1) * m
    Z = ad.transpose(z, (1, 0, 2)).reshape(rows, d_h)
    H_rows = stacked.reshape(rows, d_h)
    r = np.arange(rows)
    return ModalityWiseReps(Z, H_rows, r // m, r % m, b)


def similarity_matrix(Z: Tensor) -> Tensor:
    return ad.cosine_matrix(Z)


def aggregation_exclusions(batch_size: int, m: int, embedding_sources: bool = True) -> np.ndarray:
    """Boolean (B*M, (B+1)*M) mask of sources a target row may NOT attend to."""
    targets = batch_size * m
    rows = (batch_size + 1) * m
    excl = np.zeros((targets, rows), dtype=bool)
    excl[np.arange(targets), np.arange(targets)] = True
    if not embedding_sources:
        excl[:, targets:] = True
    return excl


def cross_modal_aggregate(
    reps: ModalityWiseReps,
    S_Z: Tensor,
    tau: float = 1.0,
    norm_mode: str = "query",
    embedding_sources: bool = True,
) -> AggregationOutput:
    """Rebuild every real (instance, modality) feature from all other rows.

    ``query`` normalises each target's weights over its own similarities
    (standard attention). ``literal`` divides each source term by that
    source's own partition sum over the rows other than the target, then
    renormalises per target.
    """
    if tau <= 0:
        raise ContractError(f"cross_modal_aggregate: tau must be positive, got {tau}")
    if norm_mode not in NORM_MODES:
        raise ContractError(f"unknown norm_mode {norm_mode!r}")
    b = reps.batch_size
    m = reps.Z.shape[0] // (b + 1)
    targets = b * m
    excl = aggregation_exclusions(b, m, embedding_sources)
    logits = S_Z[:targets]
    if norm_mode == "literal":
        # exp((S-1)/tau) keeps the exponent <= 0; the constant cancels after renormalising
        e = ad.exp((S_Z - 1.0) * (1.0 / tau))
        partition = ad.reshape(ad.sum_(e, axis=1), (1, -1))
        others = partition - e[:targets]  # [t, s] = sum_{s'' != t} e[s, s''] (e symmetric)
        logits = logits * (1.0 / tau) - ad.log(others)
        weights = ad.softmax(logits, 1.0, exclude=excl)
    else:
        weights = ad.softmax(logits, tau, exclude=excl)
    H_tilde = (weights @ reps.H_rows).reshape(b, m, -1)
    return AggregationOutput(H_tilde, weights)


def global_fusion(H: Tensor, H_tilde: Tensor, P: Mapping[str, Tensor]) -> FusionOutput:
    """Gate between each feature and its reconstruction with a 3-layer conv net."""
    b, m, d_h = H.shape
    if H_tilde.shape != H.shape:
        raise DimensionError(f"global_fusion: H {H.shape} vs H_tilde {H_tilde.shape}")
    n = b * m
    channels = ad.concat([H.reshape(n, 1, d_h), H_tilde.reshape(n, 1, d_h)], axis=1)
    a = ad.relu(ad.conv1d(channels, P["fusion.conv1.w"], P["fusion.conv1.b"]))
    a = ad.relu(ad.conv1d(a, P["fusion.conv2.w"], P["fusion.conv2.b"]))
    alpha = ad.sigmoid(ad.conv1d(a, P["fusion.conv3.w"], P["fusion.conv3.b"])).reshape(b, m, d_h)
    g = H_tilde + alpha * (H - H_tilde)
    return FusionOutput(alpha, g.reshape(b, m * d_h))


def decode(G: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    if G.shape[-1] != P["decoder.w"].shape[0]:
        raise DimensionError(f"decode: G has width {G.shape[-1]}, decoder expects {P['decoder.w'].shape[0]}")
    return G @ P["decoder.w"] + P["decoder.b"]


def forward(x, presence, P: Mapping[str, Tensor], cfg: ModelConfig, variant: str = "full") -> ForwardOutput:
    """Run the client network on one batch.

    ``variant`` selects the architecture: ``full`` (FedMAC), ``no_aggregation``
    (decoder reads the imputed features directly but Z is still produced for
    the contrastive term) or ``zero_impute`` (no embeddings, no projection).
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown model variant {variant!r}")
    shared = impute(x, presence, P, cfg, use_embeddings=variant != "zero_impute")
    b = shared.H.shape[0]
    if variant == "zero_impute":
        logits = decode(shared.H.reshape(b, -1), P)
        return ForwardOutput(logits, shared, None, None, None, None)
    reps = project_modality(shared.H, P, cfg)
    S_Z = similarity_matrix(reps.Z)
    if variant == "no_aggregation":
        logits = decode(shared.H.reshape(b, -1), P)
        return ForwardOutput(logits, shared, reps, S_Z, None, None)
    agg = cross_modal_aggregate(reps, S_Z, cfg.tau, cfg.norm_mode, cfg.embedding_sources)
    fusion = global_fusion(shared.H, agg.H_tilde, P)
    logits = decode(fusion.G, P)
    return ForwardOutput(logits, shared, reps, S_Z, agg, fusion)
