"""
Primary component matching.

Coarse image features are the fine features pushed through batch PCA:
decompose (covariance eigendecomposition across the batch), keep the top-k
components, reconstruct, re-normalize. The coarse features are aligned with
short captions while the fine ones are aligned with long captions.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

import numerics as nx
from numerics import ContractViolation, Tensor, sym_eig

logger = logging.getLogger(__name__)

ALT_STRATEGIES = ("undistinguished", "mixed_length", "bounded")


@dataclass(frozen=True)
class LossConfig:
    alpha_loss: float = 0.1
    k_components: int = 32
    symmetric: bool = True
    temperature_clamp_max: float = 100.0
    bounded_beta: float = 1.0
    mixed_rate: float = 0.1
    mixed_seed: int = 0

    def validate(self) -> "LossConfig":
        if self.k_components < 1:
            raise ContractViolation("k_components must be >= 1")
        if self.alpha_loss < 0 or self.bounded_beta < 0:
            raise ContractViolation("loss weights must be >= 0")
        if not 0.0 <= self.mixed_rate <= 1.0:
            raise ContractViolation("mixed_rate must lie in [0, 1]")
        if self.temperature_clamp_max < 1.0:
            raise ContractViolation("temperature_clamp_max must be >= 1")
        return self


@dataclass(frozen=True)
class FeatureBatch:
    features: np.ndarray
    normalized: bool = True

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "FeatureBatch":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw / np.linalg.norm(raw, axis=1, keepdims=True), True)


@dataclass(frozen=True)
class ComponentDecomposition:
    mean: np.ndarray          # (d,)
    components: np.ndarray    # (d, m), orthonormal columns
    importances: np.ndarray   # (m,), descending
    projections: np.ndarray   # (n, m)

    @property
    def m(self) -> int:
        return self.components.shape[1]


@dataclass
class LossTerms:
    total: Tensor
    fine: float = 0.0
    coarse: float = 0.0
    penalty: float = 0.0
    logit_scale: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return {"total": self.total.item(), "fine": self.fine, "coarse": self.coarse,
                "penalty": self.penalty, "logit_scale": self.logit_scale}


def _features(batch) -> np.ndarray:
    if isinstance(batch, FeatureBatch):
        return batch.features
    if isinstance(batch, Tensor):
        return batch.value
    return np.asarray(batch)


def decompose(batch) -> ComponentDecomposition:
    """Batch PCA: mean, covariance eigenvectors/values (descending) and per-sample coordinates.

    Keeps m = min(d, n - 1) components, the most a centered batch of n rows can carry.
    """
    x = np.asarray(_features(batch), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractViolation(f"decompose needs at least 2 rows, got shape {x.shape}")
    n, d = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / (n - 1)
    eig = sym_eig(0.5 * (covariance + covariance.T))
    m = min(d, n - 1)
    components = eig.eigenvectors[:, :m]
    importances = np.maximum(eig.eigenvalues[:m], 0.0)
    return ComponentDecomposition(mean, components, importances, centered @ components)


def filter_components(dec: ComponentDecomposition, k: int) -> ComponentDecomposition:
    """Keep the k most important components (saturating at m)."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    k_eff = min(k, dec.m)
    return ComponentDecomposition(dec.mean, dec.components[:, :k_eff],
                                  dec.importances[:k_eff], dec.projections[:, :k_eff])


def reconstruct(dec: ComponentDecomposition, normalize: bool = True) -> FeatureBatch:
    features = dec.projections @ dec.components.T + dec.mean[None, :]
    if not normalize:
        return FeatureBatch(features, normalized=False)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return FeatureBatch(features / np.maximum(norms, 1e-12), normalized=True)


def primary_component_extract(batch: Tensor, k: int,
                              decomposition: Optional[ComponentDecomposition] = None) -> Tensor:
    """Rank-k PCA reconstruction of a batch, re-normalized row-wise.

    The mean and component basis are constants of the backward pass; gradients
    reach `batch` only through the projections. Pass `decomposition` to reuse a
    basis computed elsewhere.
    """
    dec = filter_components(decomposition if decomposition is not None else decompose(batch.value), k)
    tape = batch.tape
    mean = tape.constant(dec.mean[None, :])
    basis = tape.constant(dec.components)
    projections = (batch - mean) @ basis
    return nx.l2_normalize(projections @ basis.T + mean)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _require_normalized(t: Tensor, what: str) -> None:
    tol = 1e-6 if t.value.dtype == np.float64 else 1e-5
    norms = np.linalg.norm(t.value.astype(np.float64), axis=-1)
    if t.value.ndim != 2 or not np.all(np.abs(norms - 1.0) <= tol):
        raise ContractViolation(f"{what} must be a batch of unit-norm rows")


def logit_scale(t: Tensor, cfg: LossConfig) -> Tensor:
    """exp(t) clamped to [1, temperature_clamp_max]."""
    return nx.exp_clamped(t, 0.0, math.log(cfg.temperature_clamp_max))


def contrastive_loss(img: Tensor, txt: Tensor, t: Tensor, cfg: Optional[LossConfig] = None) -> Tensor:
    """Cross-entropy over scaled cosine logits with matched pairs on the diagonal."""
    cfg = cfg or LossConfig()
    _require_normalized(img, "image features")
    _require_normalized(txt, "text features")
    if img.shape[0] != txt.shape[0]:
        raise ContractViolation(f"batch size mismatch: {img.shape[0]} images vs {txt.shape[0]} texts")
    labels = np.arange(img.shape[0])
    logits = (img @ txt.T) * logit_scale(t, cfg)
    loss = nx.cross_entropy(logits, labels)
    if cfg.symmetric:
        loss = nx.scale(loss + nx.cross_entropy(logits.T, labels), 0.5)
    return loss


def _check_same_n(*batches: Tensor) -> None:
    sizes = {b.shape[0] for b in batches}
    if len(sizes) != 1:
        raise ContractViolation(f"batches differ in size: {sorted(sizes)}")
    if sizes.pop() < 2:
        raise ContractViolation("the dual loss needs at least 2 pairs")


def dual_loss(i_fine: Tensor, t_long: Tensor, t_short: Tensor, cfg: LossConfig, t: Tensor,
              decomposition: Optional[ComponentDecomposition] = None) -> LossTerms:
    """loss_fine(I_fine, T_long) + alpha * loss_coarse(PCE(I_fine), T_short)."""
    cfg = cfg.validate()
    _check_same_n(i_fine, t_long, t_short)
    fine = contrastive_loss(i_fine, t_long, t, cfg)
    if cfg.alpha_loss == 0:
        return LossTerms(fine, fine=fine.item(), logit_scale=logit_scale(t, cfg).item())
    i_coarse = primary_component_extract(i_fine, cfg.k_components, decomposition)
    coarse = contrastive_loss(i_coarse, t_short, t, cfg)
    total = fine + nx.scale(coarse, cfg.alpha_loss)
    return LossTerms(total, fine=fine.item(), coarse=coarse.item(),
                     logit_scale=logit_scale(t, cfg).item())


def long_only_loss(i_fine: Tensor, t_long: Tensor, cfg: LossConfig, t: Tensor) -> LossTerms:
    fine = contrastive_loss(i_fine, t_long, t, cfg)
    return LossTerms(fine, fine=fine.item(), logit_scale=logit_scale(t, cfg).item())


def mixed_length_mask(n: int, rate: float, seed: int) -> np.ndarray:
    """Rows whose long caption is replaced by the short one: round(rate * n) of them, seeded."""
    mask = np.zeros(n, dtype=bool)
    count = int(round(rate * n))
    if count:
        mask[np.random.default_rng(seed).choice(n, size=count, replace=False)] = True
    return mask


def alt_strategy_loss(
    variant: str,
    i_fine: Tensor,
    t: Tensor,
    cfg: LossConfig,
    t_long: Optional[Tensor] = None,
    t_short: Optional[Tensor] = None,
    t_mixed: Optional[Tensor] = None,
    t_short_frozen: Optional[Tensor] = None,
) -> LossTerms:
    """The three alternative ways of keeping short-text ability.

    undistinguished: fine image features aligned with both long and short texts.
    mixed_length:    one contrastive term on a batch where some long captions were
                     swapped for short ones (`t_mixed`, see mixed_length_mask).
    bounded:         long-text contrastive loss plus beta * SmoothL1 between
                     current and frozen-reference short-text features.
    """
    cfg = cfg.validate()
    scale_value = logit_scale(t, cfg).item()
    if variant == "undistinguished":
        if t_long is None or t_short is None:
            raise ContractViolation("undistinguished needs long and short text features")
        fine = contrastive_loss(i_fine, t_long, t, cfg)
        coarse = contrastive_loss(i_fine, t_short, t, cfg)
        total = fine + nx.scale(coarse, cfg.alpha_loss)
        return LossTerms(total, fine=fine.item(), coarse=coarse.item(), logit_scale=scale_value)
    if variant == "mixed_length":
        if t_mixed is None:
            raise ContractViolation("mixed_length needs the mixed text features")
        fine = contrastive_loss(i_fine, t_mixed, t, cfg)
        return LossTerms(fine, fine=fine.item(), logit_scale=scale_value)
    if variant == "bounded":
        if t_short_frozen is None:
            raise ContractViolation("bounded needs short-text features from a frozen reference encoder")
        if t_long is None or t_short is None:
            raise ContractViolation("bounded needs long and short text features")
        fine = contrastive_loss(i_fine, t_long, t, cfg)
        penalty = nx.smooth_l1(t_short, t_short_frozen)
        total = fine + nx.scale(penalty, cfg.bounded_beta)
        return LossTerms(total, fine=fine.item(), penalty=penalty.item(), logit_scale=scale_value)
    raise ContractViolation(f"unknown strategy {variant!r}; expected one of {ALT_STRATEGIES}")
