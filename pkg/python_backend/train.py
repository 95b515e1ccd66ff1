"""
Training loop for every experiment variant.

Variants and what each optimizes (I = image features, T = text features):

    short_baseline   contrastive(I, T_short)                       any positional origin
    direct_ft        contrastive(I, T_long)                        linearly stretched table
    kps_only         contrastive(I, T_long)                        KPS table
    pcm_only         dual loss (fine on long, PCE on short)        linearly stretched table
    kps_pcm          dual loss                                     KPS table
    undistinguished  contrastive(I, T_long) + a * contrastive(I, T_short)   KPS table
    mixed_length     contrastive(I, T_mixed)                       KPS table
    bounded          contrastive(I, T_long) + b * SmoothL1(T_short, frozen T_short)   KPS table
"""
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import numerics as nx
from numerics import ContractViolation, GradTape
from data_synth import DatasetRecord, TokenSequence, Vocabulary, split_words, tokenize
from encoders import DualEncoder, bind, encode_texts, image_features, pad_batch, text_features
from pe_stretch import StretchSpec, stretch_model
from pcm import LossConfig, LossTerms, alt_strategy_loss, dual_loss, long_only_loss, mixed_length_mask
from checkpoint_io import Checkpoint, checkpoint_digest

logger = logging.getLogger(__name__)

VARIANTS = (
    "short_baseline", "direct_ft", "pcm_only", "kps_only", "kps_pcm",
    "undistinguished", "mixed_length", "bounded",
)
REQUIRED_ORIGIN = {
    "direct_ft": "linear",
    "pcm_only": "linear",
    "kps_only": "kps",
    "kps_pcm": "kps",
    "undistinguished": "kps",
    "mixed_length": "kps",
    "bounded": "kps",
}
DEFAULT_STRETCH = {
    "linear": StretchSpec("linear", 3.0),
    "kps": StretchSpec("kps", 4.0, 20),
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 6
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    warmup_iters: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "kps_pcm"
    grad_clip: Optional[float] = 1.0
    workers: int = 2

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be >= 2 for a contrastive batch")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ContractViolation("learning_rate and adam_eps must be > 0")
        if self.weight_decay < 0 or self.warmup_iters < 0:
            raise ContractViolation("weight_decay and warmup_iters must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ContractViolation("adam betas must lie in (0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractViolation("grad_clip must be > 0 (or None to disable)")
        if self.workers < 1:
            raise ContractViolation("workers must be >= 1")
        return self


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    total: float
    fine: float
    coarse: float
    penalty: float
    learning_rate: float
    logit_scale: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    steps: int
    total: float
    fine: float
    coarse: float
    penalty: float
    learning_rate: float
    logit_scale: float
    wall_time: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epochs: List[EpochRecord]
    steps: List[StepRecord]

    def epoch_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.epochs])

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(s) for s in self.steps])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def warmup_factor(step: int, warmup_iters: int) -> float:
    if warmup_iters <= 0:
        return 1.0
    return min(1.0, step / warmup_iters)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
               cfg: TrainConfig, step: int) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One AdamW update with decoupled weight decay and linear warmup; inputs are not mutated."""
    if step < 1:
        raise ContractViolation(f"optimizer step must be >= 1, got {step}")
    lr = cfg.learning_rate * warmup_factor(step, cfg.warmup_iters)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractViolation(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name, np.zeros(p.shape)).astype(np.float64)
        v = state.v.get(name, np.zeros(p.shape)).astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        value = p.astype(np.float64)
        value = value - lr * cfg.weight_decay * value
        value = value - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_params[name] = value.astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, AdamState(new_m, new_v)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / (norm + 1e-12)
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    images: np.ndarray
    long_tokens: Optional[List[TokenSequence]] = None
    short_tokens: Optional[List[TokenSequence]] = None
    mixed_tokens: Optional[List[TokenSequence]] = None


def shuffled_order(n: int, rng: np.random.Generator) -> np.ndarray:
    """Fisher-Yates permutation of range(n)"""
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def batch_indices(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # a single leftover pair carries no contrastive signal
    return [b for b in batches if len(b) >= 2]


class BatchAssembler:
    """Tokenizes the captions each variant needs, and only those."""

    def __init__(self, records: Sequence[DatasetRecord], vocab: Vocabulary, context_len: int,
                 variant: str, loss: LossConfig):
        self.records = records
        self.vocab = vocab
        self.context_len = context_len
        self.variant = variant
        self.loss = loss

    def _tokens(self, texts: Sequence[str]) -> List[TokenSequence]:
        return [tokenize(text, self.vocab, self.context_len) for text in texts]

    def __call__(self, job: Tuple[int, np.ndarray]) -> TrainBatch:
        step, idx = job
        rows = [self.records[i] for i in idx]
        batch = TrainBatch(np.stack([np.asarray(r.image, dtype=np.float32) for r in rows]))
        if self.variant == "short_baseline":
            batch.short_tokens = self._tokens([r.short_text for r in rows])
        elif self.variant == "mixed_length":
            mask = mixed_length_mask(len(rows), self.loss.mixed_rate, self.loss.mixed_seed + step)
            texts = [r.short_text if swap else r.long_text for r, swap in zip(rows, mask)]
            batch.mixed_tokens = self._tokens(texts)
        elif self.variant in ("direct_ft", "kps_only"):
            batch.long_tokens = self._tokens([r.long_text for r in rows])
        else:
            batch.long_tokens = self._tokens([r.long_text for r in rows])
            batch.short_tokens = self._tokens([r.short_text for r in rows])
        return batch


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def check_variant(config: TrainConfig, model: DualEncoder, records: Sequence[DatasetRecord]) -> None:
    """Refuse runs that could only fail (or silently truncate) once training started."""
    if len(records) < 2:
        raise ContractViolation(f"training needs at least 2 records, got {len(records)}")
    origin = REQUIRED_ORIGIN.get(config.variant)
    if origin is not None and model.config.positional_origin != origin:
        raise ContractViolation(
            f"variant {config.variant} needs a {origin}-stretched positional table, "
            f"model has origin {model.config.positional_origin!r}"
        )
    kinds = ["short"] if config.variant == "short_baseline" else ["long"]
    if config.variant in ("mixed_length", "undistinguished", "bounded", "pcm_only", "kps_pcm"):
        kinds.append("short")
    for kind in kinds:
        longest = max(len(split_words(getattr(r, f"{kind}_text"))) for r in records)
        if longest + 2 > model.config.context_len:
            raise ContractViolation(
                f"{kind} captions need {longest + 2} token slots, the model's context is {model.config.context_len}"
            )


def config_hash(config: TrainConfig, loss: LossConfig) -> str:
    train_fields = asdict(config)
    # thread count never changes the result
    train_fields.pop("workers")
    payload = json.dumps({"train": train_fields, "loss": asdict(loss)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _loss_terms(config: TrainConfig, loss_cfg: LossConfig, tape: GradTape, p, model: DualEncoder,
                batch: TrainBatch, frozen: Optional[DualEncoder]) -> LossTerms:
    cfg = model.config
    images = image_features(tape, p, cfg, batch.images)
    t = p["logit_scale"]
    variant = config.variant

    def encode(seqs):
        return text_features(tape, p, cfg, pad_batch(seqs)) if seqs is not None else None

    if variant == "short_baseline":
        return long_only_loss(images, encode(batch.short_tokens), loss_cfg, t)
    if variant in ("direct_ft", "kps_only"):
        return long_only_loss(images, encode(batch.long_tokens), loss_cfg, t)
    if variant in ("pcm_only", "kps_pcm"):
        return dual_loss(images, encode(batch.long_tokens), encode(batch.short_tokens), loss_cfg, t)
    frozen_short = None
    if variant == "bounded":
        frozen_short = tape.constant(encode_texts(frozen, batch.short_tokens, dtype=tape.dtype))
    return alt_strategy_loss(
        variant, images, t, loss_cfg,
        t_long=encode(batch.long_tokens), t_short=encode(batch.short_tokens),
        t_mixed=encode(batch.mixed_tokens), t_short_frozen=frozen_short,
    )


def train(config: TrainConfig, model_init: DualEncoder, dataset: Sequence[DatasetRecord],
          vocab: Vocabulary, loss_config: Optional[LossConfig] = None) -> TrainResult:
    """Optimize a copy of `model_init` on `dataset`; returns the final checkpoint and the logs."""
    config = config.validate()
    loss_cfg = (loss_config or LossConfig()).validate()
    check_variant(config, model_init, dataset)

    model = model_init.copy()
    frozen = model_init.copy() if config.variant == "bounded" else None
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    assembler = BatchAssembler(dataset, vocab, model.config.context_len, config.variant, loss_cfg)

    steps: List[StepRecord] = []
    epochs: List[EpochRecord] = []
    step = 0
    logger.info("Training %s: %d records, batch %d, %d epochs, context %d",
                config.variant, len(dataset), config.batch_size, config.epochs, model.config.context_len)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            jobs = [(step + i + 1, idx) for i, idx in
                    enumerate(batch_indices(shuffled_order(len(dataset), rng), config.batch_size))]
            epoch_steps: List[StepRecord] = []
            # map() yields in submission order regardless of which worker finishes first
            for batch in pool.map(assembler, jobs):
                step += 1
                tape = GradTape(nx.TRAIN_DTYPE)
                p = bind(tape, model)
                terms = _loss_terms(config, loss_cfg, tape, p, model, batch, frozen)
                grads, _ = clip_gradients(nx.backward(tape, terms.total), config.grad_clip)
                params, state = adamw_step(model.params, grads, state, config, step)
                model = DualEncoder(model.config, params)
                record = StepRecord(
                    step=step, epoch=epoch, total=terms.total.item(), fine=terms.fine,
                    coarse=terms.coarse, penalty=terms.penalty,
                    learning_rate=config.learning_rate * warmup_factor(step, config.warmup_iters),
                    logit_scale=terms.logit_scale,
                )
                epoch_steps.append(record)

            frame = pd.DataFrame([asdict(s) for s in epoch_steps])
            summary = EpochRecord(
                epoch=epoch, steps=len(epoch_steps),
                total=float(frame["total"].mean()), fine=float(frame["fine"].mean()),
                coarse=float(frame["coarse"].mean()), penalty=float(frame["penalty"].mean()),
                learning_rate=epoch_steps[-1].learning_rate, logit_scale=epoch_steps[-1].logit_scale,
                wall_time=time.perf_counter() - started,
            )
            steps.extend(epoch_steps)
            epochs.append(summary)
            logger.info(
                "epoch %d/%d: loss %.4f (fine %.4f, coarse %.4f, penalty %.4f) lr %.2e scale %.2f in %.1fs",
                epoch, config.epochs, summary.total, summary.fine, summary.coarse, summary.penalty,
                summary.learning_rate, summary.logit_scale, summary.wall_time,
            )

    checkpoint = Checkpoint(model, state.m, state.v, step=step, config_hash=config_hash(config, loss_cfg))
    return TrainResult(checkpoint, epochs, steps)


def prepare_model(variant: str, base: DualEncoder,
                  stretch: Optional[Dict[str, StretchSpec]] = None) -> DualEncoder:
    """Stretch a pretrained model the way `variant` expects to receive it."""
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}")
    origin = REQUIRED_ORIGIN.get(variant)
    if origin is None:
        return base.copy()
    if base.config.positional_origin == origin:
        return base.copy()
    if base.config.positional_origin != "base":
        raise ContractViolation(
            f"variant {variant!r} stretches the base table, model is already {base.config.positional_origin!r}"
        )
    spec = (stretch or DEFAULT_STRETCH).get(origin, DEFAULT_STRETCH[origin])
    return stretch_model(base, spec)


def final_digest(result: TrainResult) -> str:
    return checkpoint_digest(result.checkpoint)
