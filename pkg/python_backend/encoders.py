"""
Toy dual encoder.

Text side: token + absolute positional embeddings, pre-LN transformer blocks
with bidirectional attention over non-padding keys, pooling at the EOT
position, linear projection. Image side: per-cell linear input, learned cell
positions, the same blocks, mean pooling, projection. Both sides emit
unit-norm embeddings.
"""
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from numerics import ContractViolation, GradTape, Tensor
from data_synth import PAD, TokenSequence

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE_INIT = math.log(1 / 0.07)
POSITIONAL_ORIGINS = ("base", "linear", "kps")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int = 77
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_embed: int = 64
    image_grid: int = 4
    image_channels: int = 16
    mlp_ratio: int = 4
    init_seed: int = 0
    embed_init_std: float = 0.02
    temperature_init: float = DEFAULT_TEMPERATURE_INIT
    positional_origin: str = "base"

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ContractViolation(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.context_len < 3:
            raise ContractViolation("context_len must be >= 3")
        if self.d_embed < 8:
            raise ContractViolation("d_embed must be >= 8")
        if self.vocab_size < 5:
            raise ContractViolation("vocab_size must cover the reserved tokens plus at least one word")
        if self.positional_origin not in POSITIONAL_ORIGINS:
            raise ContractViolation(f"positional_origin must be one of {POSITIONAL_ORIGINS}")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @property
    def image_cells(self) -> int:
        return self.image_grid * self.image_grid


@dataclass(frozen=True)
class PositionalTable:
    table: np.ndarray
    trainable: bool = True

    @property
    def rows(self) -> int:
        return self.table.shape[0]


class DualEncoder:
    """Model parameters (an ordered name -> array dict) plus their config."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        self.config = config.validate()
        self.params = params
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ContractViolation("parameter names do not match the model layout")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ContractViolation(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def positional(self) -> PositionalTable:
        return PositionalTable(self.params["text.positional"])

    @property
    def temperature(self) -> float:
        return float(self.params["logit_scale"].reshape(-1)[0])

    def with_positional(self, table: PositionalTable, origin: str) -> "DualEncoder":
        """New model whose text context length follows the given table."""
        config = replace(self.config, context_len=table.rows, positional_origin=origin)
        params = {k: (table.table.astype(v.dtype) if k == "text.positional" else v.copy())
                  for k, v in self.params.items()}
        return DualEncoder(config, params)


def _block_shapes(prefix: str, d: int, hidden: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.gamma"] = (d,)
        shapes[f"{prefix}.{ln}.beta"] = (d,)
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.attn.{proj}.bias"] = (d,)
    shapes[f"{prefix}.mlp.fc.weight"] = (d, hidden)
    shapes[f"{prefix}.mlp.fc.bias"] = (hidden,)
    shapes[f"{prefix}.mlp.proj.weight"] = (hidden, d)
    shapes[f"{prefix}.mlp.proj.bias"] = (d,)
    return shapes


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, hidden = config.d_model, config.d_model * config.mlp_ratio
    shapes: Dict[str, Tuple[int, ...]] = {
        "text.token_embedding": (config.vocab_size, d),
        "text.positional": (config.context_len, d),
    }
    for i in range(config.n_layers):
        shapes.update(_block_shapes(f"text.block{i}", d, hidden))
    shapes["text.ln_final.gamma"] = (d,)
    shapes["text.ln_final.beta"] = (d,)
    shapes["text.projection"] = (d, config.d_embed)

    shapes["image.input.weight"] = (config.image_channels, d)
    shapes["image.input.bias"] = (d,)
    shapes["image.positional"] = (config.image_cells, d)
    for i in range(config.n_layers):
        shapes.update(_block_shapes(f"image.block{i}", d, hidden))
    shapes["image.ln_final.gamma"] = (d,)
    shapes["image.ln_final.beta"] = (d,)
    shapes["image.projection"] = (d, config.d_embed)

    shapes["logit_scale"] = (1, 1)
    return shapes


def init_model(config: ModelConfig, dtype=nx.TRAIN_DTYPE) -> DualEncoder:
    """Seeded init: N(0, embed_init_std) for embeddings, N(0, 1/fan_in) for weights."""
    config = config.validate()
    rng = np.random.default_rng(config.init_seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "logit_scale":
            value = np.full(shape, config.temperature_init)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            value = np.zeros(shape)
        elif "embedding" in name or "positional" in name:
            value = rng.normal(0.0, config.embed_init_std, shape)
        else:
            value = rng.normal(0.0, shape[0] ** -0.5, shape)
        params[name] = value.astype(dtype)
    logger.debug("Initialized dual encoder with %d tensors", len(params))
    return DualEncoder(config, params)


def bind(tape: GradTape, model: DualEncoder, trainable: bool = True,
         prefix: str = "") -> Dict[str, Tensor]:
    """Put every parameter on the tape, as leaves when `trainable`, else as constants."""
    if trainable:
        return {name: tape.leaf(prefix + name, value) for name, value in model.params.items()}
    return {name: tape.constant(value) for name, value in model.params.items()}


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenBatch:
    ids: np.ndarray      # (B, T) padded with PAD
    lengths: np.ndarray  # (B,) occupied slots including BOS and EOT

    @property
    def eot_positions(self) -> np.ndarray:
        return self.lengths - 1


def pad_batch(sequences: Sequence[TokenSequence]) -> TokenBatch:
    if not sequences:
        raise ContractViolation("cannot build an empty token batch")
    lengths = np.array([s.length for s in sequences], dtype=np.int64)
    ids = np.full((len(sequences), int(lengths.max())), PAD, dtype=np.int64)
    for i, seq in enumerate(sequences):
        ids[i, : seq.length] = seq.ids
    return TokenBatch(ids, lengths)


def _linear(x: Tensor, p: Dict[str, Tensor], name: str) -> Tensor:
    return x @ p[f"{name}.weight"] + p[f"{name}.bias"]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return nx.permute(nx.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _attention(x: Tensor, p: Dict[str, Tensor], prefix: str, n_heads: int,
               key_bias: Optional[np.ndarray]) -> Tensor:
    b, t, d = x.shape
    q = _split_heads(_linear(x, p, f"{prefix}.attn.q"), n_heads)
    k = _split_heads(_linear(x, p, f"{prefix}.attn.k"), n_heads)
    v = _split_heads(_linear(x, p, f"{prefix}.attn.v"), n_heads)
    scores = nx.scale(q @ k.T, 1.0 / math.sqrt(d // n_heads))
    weights = nx.softmax(scores, bias=key_bias)
    merged = nx.reshape(nx.permute(weights @ v, (0, 2, 1, 3)), (b, t, d))
    return _linear(merged, p, f"{prefix}.attn.o")


def _block(x: Tensor, p: Dict[str, Tensor], prefix: str, n_heads: int,
           key_bias: Optional[np.ndarray]) -> Tensor:
    h = nx.layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    x = x + _attention(h, p, prefix, n_heads, key_bias)
    h = nx.layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    h = _linear(nx.gelu(_linear(h, p, f"{prefix}.mlp.fc")), p, f"{prefix}.mlp.proj")
    return x + h


def text_features(tape: GradTape, p: Dict[str, Tensor], config: ModelConfig,
                  batch: TokenBatch) -> Tensor:
    """(B, d_embed) unit-norm text embeddings pooled at EOT."""
    b, t = batch.ids.shape
    if t > config.context_len:
        raise ContractViolation(
            f"token sequence of length {t} exceeds the context length {config.context_len}"
        )
    x = nx.gather(p["text.token_embedding"], batch.ids) + nx.gather(p["text.positional"], np.arange(t))
    keep = np.arange(t)[None, :] < batch.lengths[:, None]
    key_bias = np.where(keep, 0.0, nx.MASK_BIAS).reshape(b, 1, 1, t)
    for i in range(config.n_layers):
        x = _block(x, p, f"text.block{i}", config.n_heads, key_bias)
    x = nx.layer_norm(x, p["text.ln_final.gamma"], p["text.ln_final.beta"])
    pooled = nx.pick_positions(x, batch.eot_positions)
    return nx.l2_normalize(pooled @ p["text.projection"])


def image_features(tape: GradTape, p: Dict[str, Tensor], config: ModelConfig,
                   images: np.ndarray) -> Tensor:
    """(B, d_embed) unit-norm image embeddings, mean-pooled over grid cells."""
    images = np.asarray(images)
    expected = (config.image_cells, config.image_channels)
    if images.ndim != 3 or images.shape[1:] != expected:
        raise ContractViolation(f"image batch must have shape (B, {expected[0]}, {expected[1]}), got {images.shape}")
    x = _linear(tape.constant(images), p, "image.input") + p["image.positional"]
    for i in range(config.n_layers):
        x = _block(x, p, f"image.block{i}", config.n_heads, None)
    x = nx.layer_norm(x, p["image.ln_final.gamma"], p["image.ln_final.beta"])
    return nx.l2_normalize(nx.mean(x, axis=1) @ p["image.projection"])


# ---------------------------------------------------------------------------
# Inference helpers (frozen model, no gradients recorded)
# ---------------------------------------------------------------------------

def encode_text(model: DualEncoder, tokens: TokenSequence, dtype=nx.TRAIN_DTYPE) -> np.ndarray:
    if tokens.length > model.config.context_len:
        raise ContractViolation(
            f"token sequence of length {tokens.length} exceeds the context length {model.config.context_len}"
        )
    return encode_texts(model, [tokens], dtype=dtype)[0]


def encode_image(model: DualEncoder, image: np.ndarray, dtype=nx.TRAIN_DTYPE) -> np.ndarray:
    return encode_images(model, [image], dtype=dtype)[0]


def encode_texts(model: DualEncoder, sequences: Sequence[TokenSequence],
                 batch_size: int = 128, dtype=nx.TRAIN_DTYPE) -> np.ndarray:
    chunks: List[np.ndarray] = []
    for start in range(0, len(sequences), batch_size):
        tape = GradTape(dtype)
        p = bind(tape, model, trainable=False)
        batch = pad_batch(sequences[start:start + batch_size])
        chunks.append(text_features(tape, p, model.config, batch).value)
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.config.d_embed), dtype)


def encode_images(model: DualEncoder, images: Sequence[np.ndarray],
                  batch_size: int = 128, dtype=nx.TRAIN_DTYPE) -> np.ndarray:
    chunks: List[np.ndarray] = []
    for start in range(0, len(images), batch_size):
        tape = GradTape(dtype)
        p = bind(tape, model, trainable=False)
        block = np.stack([np.asarray(im) for im in images[start:start + batch_size]])
        chunks.append(image_features(tape, p, model.config, block).value)
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.config.d_embed), dtype)
