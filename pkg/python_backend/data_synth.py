"""
Synthetic (image, long caption, short caption) corpus.

Scenes are lists of attributes (color, object, grid position, salience). The
"image" is a g*g grid of feature vectors where every attribute paints its cell
and the neighbouring cells, scaled by salience. Scenes come in sibling groups
that share their primary attributes and differ only in the tail, so telling
siblings apart needs the parts of the long caption the short one leaves out.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from numerics import ContractViolation, LabError

logger = logging.getLogger(__name__)

PAD, BOS, EOT, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eot>", "<unk>")

OBJECTS = [
    "car", "dog", "cat", "tree", "bench", "lamp", "bicycle", "bus",
    "house", "bird", "boat", "clock", "flower", "chair", "table", "window",
    "door", "sign", "truck", "horse", "umbrella", "kite", "bottle", "cup",
]
COLORS = [
    "red", "blue", "green", "yellow", "black", "white",
    "orange", "purple", "brown", "gray", "pink", "silver",
]
ROWS = ["top", "upper", "lower", "bottom"]
COLUMNS = ["left", "inner-left", "inner-right", "right"]
FILLER = [
    "a", "an", "the", "photo", "picture", "image", "of", "and", "in", "with",
    "scene", "showing", "there", "is", "this", "my", "good", "close-up", "bright",
    "dark", "cropped", "small", "large", "rendering", "view",
]

# toy stand-ins for the usual prompt-ensemble templates
PROMPT_TEMPLATES = [
    "a photo of a {}",
    "a picture of a {}",
    "a scene with a {}",
    "an image showing a {}",
    "a close-up photo of a {}",
    "a bright photo of a {}",
    "a dark photo of the {}",
    "a cropped view of a {}",
]

SALIENCE_DECAY = 0.9
SIGNIFICANT_DIGITS = 9
DATASET_FIELDS = ("id", "long", "short", "image")


class DatasetFormatError(LabError):
    """A dataset file line could not be parsed."""


@dataclass(frozen=True)
class SynthConfig:
    n_attributes: int = 6
    primary_count: int = 2
    sibling_group: int = 4
    grid: int = 4
    channels: int = 16
    noise: float = 0.05
    neighbor_weight: float = 0.5
    world_seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_attributes < 1:
            raise ContractViolation("n_attributes must be >= 1")
        if self.primary_count < 1 or self.primary_count > self.n_attributes:
            raise ContractViolation(
                f"primary_count ({self.primary_count}) must be in [1, n_attributes={self.n_attributes}]"
            )
        if self.n_attributes > min(len(OBJECTS), self.grid * self.grid):
            raise ContractViolation("more attributes than distinct objects or grid cells")
        if self.grid > len(ROWS) or self.grid < 1:
            raise ContractViolation(f"grid must be between 1 and {len(ROWS)}")
        if self.sibling_group < 1:
            raise ContractViolation("sibling_group must be >= 1")
        return self


@dataclass(frozen=True)
class Attribute:
    object: str
    color: str
    row: int
    col: int
    salience: float

    @property
    def position(self) -> str:
        return f"{ROWS[self.row]} {COLUMNS[self.col]}"


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    attributes: Tuple[Attribute, ...]
    primary_count: int
    group_id: int = 0


@dataclass(frozen=True)
class CaptionPair:
    long_text: str
    short_text: str


@dataclass(frozen=True)
class DatasetRecord:
    """The persisted unit of a dataset file."""
    scene_id: int
    long_text: str
    short_text: str
    image: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.long_text == other.long_text
                and self.short_text == other.short_text
                and self.image.shape == other.image.shape
                and bool(np.array_equal(self.image, other.image)))


@dataclass(frozen=True)
class SyntheticSample:
    scene: SceneSpec
    captions: CaptionPair
    image: np.ndarray

    def as_record(self) -> DatasetRecord:
        return DatasetRecord(self.scene.scene_id, self.captions.long_text,
                             self.captions.short_text, self.image)


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    tokens: List[str]
    index: Dict[str, int] = field(init=False)
    _warned: Set[str] = field(default_factory=set, init=False, repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractViolation("vocabulary tokens must be unique")
        clash = set(self.tokens) & set(RESERVED_TOKENS)
        if clash:
            raise ContractViolation(f"reserved tokens in vocabulary: {sorted(clash)}")
        self.index = {tok: i + len(RESERVED_TOKENS) for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + len(RESERVED_TOKENS)

    def id_of(self, token: str) -> int:
        token_id = self.index.get(token)
        if token_id is None:
            if token not in self._warned:
                self._warned.add(token)
                logger.warning("token %r not in vocabulary, mapped to <unk>", token)
            return UNK
        return token_id


def build_vocabulary() -> Vocabulary:
    """The closed vocabulary of every caption and prompt the generator can emit."""
    words: List[str] = []
    for group in (FILLER, COLORS, OBJECTS, ROWS, COLUMNS):
        for word in group:
            if word not in words:
                words.append(word)
    return Vocabulary(words)


def write_vocabulary(path, vocab: Vocabulary) -> None:
    Path(path).write_text("".join(f"{tok}\n" for tok in vocab.tokens), encoding="utf-8")


def read_vocabulary(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary(lines)


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)


def split_words(text: str) -> List[str]:
    return text.split()


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """BOS + word ids + EOT; words beyond max_len - 2 are dropped, EOT is always kept."""
    if max_len < 3:
        raise ContractViolation(f"max_len must be >= 3, got {max_len}")
    words = split_words(text)[: max_len - 2]
    return TokenSequence((BOS, *(vocab.id_of(w) for w in words), EOT))


def truncate_words(text: str, n_words: int) -> str:
    return " ".join(split_words(text)[:n_words])


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _world_features(config: SynthConfig) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Fixed per-token feature vectors shared by every dataset of one world seed."""
    rng = np.random.default_rng(config.world_seed)
    objects = {name: rng.normal(0.0, 1.0, config.channels) for name in OBJECTS}
    colors = {name: rng.normal(0.0, 0.7, config.channels) for name in COLORS}
    return objects, colors


def _quantize(values: np.ndarray) -> np.ndarray:
    """Round to the dataset file's precision so files round-trip exactly."""
    flat = [float(f"{v:.{SIGNIFICANT_DIGITS}g}") for v in values.reshape(-1)]
    return np.array(flat, dtype=np.float64).reshape(values.shape)


def render_captions(scene: SceneSpec) -> CaptionPair:
    """Long caption mentions every attribute with its position; short one only the primaries."""
    long_parts = [f"a {a.color} {a.object} in the {a.position}" for a in scene.attributes]
    short_parts = [f"a {a.color} {a.object}" for a in scene.attributes[: scene.primary_count]]
    return CaptionPair(
        long_text="a photo of " + " and ".join(long_parts),
        short_text="a photo of " + " and ".join(short_parts),
    )


def render_image(scene: SceneSpec, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """(g*g, channels) feature grid, row-major over cells."""
    objects, colors = _world_features(config)
    g = config.grid
    grid = np.zeros((g, g, config.channels))
    for a in scene.attributes:
        feature = a.salience * (objects[a.object] + colors[a.color])
        grid[a.row, a.col] += feature
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = a.row + dr, a.col + dc
            if 0 <= r < g and 0 <= c < g:
                grid[r, c] += config.neighbor_weight * feature
    if config.noise > 0:
        grid += rng.normal(0.0, config.noise, grid.shape)
    return _quantize(grid.reshape(g * g, config.channels))


def _sample_attributes(rng: np.random.Generator, config: SynthConfig, count: int,
                       start: int, taken_objects: Sequence[str],
                       taken_cells: Sequence[Tuple[int, int]]) -> List[Attribute]:
    objects = [o for o in OBJECTS if o not in taken_objects]
    cells = [(r, c) for r in range(config.grid) for c in range(config.grid)
             if (r, c) not in taken_cells]
    picked_objects = rng.choice(len(objects), size=count, replace=False)
    picked_cells = rng.choice(len(cells), size=count, replace=False)
    picked_colors = rng.integers(0, len(COLORS), size=count)
    out = []
    for i in range(count):
        row, col = cells[int(picked_cells[i])]
        out.append(Attribute(
            object=objects[int(picked_objects[i])],
            color=COLORS[int(picked_colors[i])],
            row=row, col=col,
            salience=SALIENCE_DECAY ** (start + i),
        ))
    return out


def generate_dataset(seed: int, n_scenes: int, config: Optional[SynthConfig] = None) -> List[SyntheticSample]:
    """Deterministic corpus of `n_scenes` scenes laid out in sibling groups."""
    config = (config or SynthConfig()).validate()
    if n_scenes < 1:
        raise ContractViolation("n_scenes must be >= 1")

    rng = np.random.default_rng(seed)
    samples: List[SyntheticSample] = []
    group_id = 0
    while len(samples) < n_scenes:
        primary = _sample_attributes(rng, config, config.primary_count, 0, (), ())
        seen_tails: Set[Tuple[Attribute, ...]] = set()
        for _ in range(min(config.sibling_group, n_scenes - len(samples))):
            tail: Tuple[Attribute, ...] = ()
            n_tail = config.n_attributes - config.primary_count
            for _attempt in range(16):
                tail = tuple(_sample_attributes(
                    rng, config, n_tail, config.primary_count,
                    [a.object for a in primary], [(a.row, a.col) for a in primary],
                ))
                if tail not in seen_tails:
                    break
            seen_tails.add(tail)
            scene = SceneSpec(
                scene_id=len(samples),
                attributes=tuple(primary) + tail,
                primary_count=config.primary_count,
                group_id=group_id,
            )
            samples.append(SyntheticSample(scene, render_captions(scene), render_image(scene, config, rng)))
        group_id += 1

    logger.info("Generated %d scenes in %d sibling groups (seed=%d)", len(samples), group_id, seed)
    return samples


def generate_classification_set(
    seed: int,
    n_per_class: int,
    n_classes: int = 8,
    config: Optional[SynthConfig] = None,
) -> Tuple[List[np.ndarray], List[int], List[str]]:
    """Images whose most salient attribute is one of `n_classes` color-object classes."""
    config = (config or SynthConfig()).validate()
    if n_classes > len(OBJECTS):
        raise ContractViolation(f"at most {len(OBJECTS)} classes are available")
    rng = np.random.default_rng(seed)
    objects = rng.choice(len(OBJECTS), size=n_classes, replace=False)
    colors = rng.integers(0, len(COLORS), size=n_classes)
    class_names = [f"{COLORS[int(c)]} {OBJECTS[int(o)]}" for c, o in zip(colors, objects)]

    images: List[np.ndarray] = []
    labels: List[int] = []
    for label in range(n_classes):
        head_object, head_color = OBJECTS[int(objects[label])], COLORS[int(colors[label])]
        for _ in range(n_per_class):
            row, col = (int(v) for v in rng.integers(0, config.grid, size=2))
            head = Attribute(head_object, head_color, row, col, 1.0)
            tail = _sample_attributes(rng, config, config.n_attributes - 1, 1, [head_object], [(row, col)])
            scene = SceneSpec(len(images), (head, *tail), primary_count=1)
            images.append(render_image(scene, config, rng))
            labels.append(label)
    return images, labels, class_names


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def _format_float(value: float) -> str:
    return f"{value:.{SIGNIFICANT_DIGITS}g}"


def _format_record(record: DatasetRecord) -> str:
    rows = ", ".join("[" + ", ".join(_format_float(v) for v in row) + "]" for row in record.image)
    return (f'{{"id": {int(record.scene_id)}, "long": {json.dumps(record.long_text)}, '
            f'"short": {json.dumps(record.short_text)}, "image": [{rows}]}}')


def write_dataset(path, records: Iterable[DatasetRecord]) -> int:
    lines = [_format_record(r) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return len(lines)


def _parse_record(line: str, line_number: int) -> DatasetRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"line {line_number}: invalid JSON ({e.msg})") from e
    if not isinstance(obj, dict) or tuple(obj.keys()) != DATASET_FIELDS:
        raise DatasetFormatError(f"line {line_number}: expected fields {list(DATASET_FIELDS)} in order")
    if not isinstance(obj["id"], int) or not isinstance(obj["long"], str) or not isinstance(obj["short"], str):
        raise DatasetFormatError(f"line {line_number}: wrong field types")
    try:
        image = np.array(obj["image"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(f"line {line_number}: image is not a rectangular float grid") from e
    if image.ndim != 2 or not np.all(np.isfinite(image)):
        raise DatasetFormatError(f"line {line_number}: image must be a 2-D finite grid")
    return DatasetRecord(obj["id"], obj["long"], obj["short"], image)


def read_dataset(path) -> List[DatasetRecord]:
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [_parse_record(line, i + 1) for i, line in enumerate(lines)]


def with_attribute(scene: SceneSpec, index: int, **changes) -> SceneSpec:
    """Copy of a scene with one attribute's fields replaced."""
    attributes = list(scene.attributes)
    attributes[index] = replace(attributes[index], **changes)
    return replace(scene, attributes=tuple(attributes))
