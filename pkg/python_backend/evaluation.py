"""
Retrieval recall, prompt-ensembled zero-shot classification and the
effective-length probe. Rankings sort by descending cosine; equal scores go to
the lower gallery index.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from numerics import ContractViolation
from data_synth import DatasetRecord, Vocabulary, split_words, tokenize, truncate_words
from encoders import DualEncoder, encode_images, encode_texts

logger = logging.getLogger(__name__)

DIRECTIONS = ("image_to_text", "text_to_image")
DEFAULT_KS = (1, 5, 10)
DEFAULT_PROBE_LENGTHS = (5, 10, 15, 20, 30, 40, 60, "full")
_NORM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    ks: List[int]
    recalls: List[float]
    n_queries: int

    def recall(self, k: int) -> float:
        return self.recalls[self.ks.index(k)]

    def to_dict(self) -> Dict:
        return {"direction": self.direction, "ks": list(self.ks),
                "recalls": [float(r) for r in self.recalls], "n": self.n_queries}


@dataclass(frozen=True)
class LengthProbeCurve:
    lengths: List[int]
    r_at_1: List[float]
    tag: str = ""

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"length": self.lengths, "r_at_1": self.r_at_1})

    def gain(self, start: int, end: int) -> float:
        """R@1 difference between two probed lengths"""
        return self.r_at_1[self.lengths.index(end)] - self.r_at_1[self.lengths.index(start)]


def _check_rows_normalized(embs: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(embs.astype(np.float64), axis=1)
    if norms.size and not np.all(np.abs(norms - 1.0) <= _NORM_TOLERANCE):
        raise ContractViolation(f"{what} rows must be L2-normalized")


def match_ranks(similarity: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's target in its row, best first, ties to the lower index."""
    order = np.argsort(-similarity, axis=1, kind="stable")
    targets = np.asarray(targets)
    return np.argmax(order == targets[:, None], axis=1)


def recall_at_k(img_embs: np.ndarray, txt_embs: np.ndarray,
                ks: Sequence[int] = DEFAULT_KS) -> Dict[str, RetrievalReport]:
    """Recall@K in both directions for matched (image i, text i) pairs."""
    img = np.asarray(img_embs, dtype=np.float64)
    txt = np.asarray(txt_embs, dtype=np.float64)
    if img.shape[0] != txt.shape[0]:
        raise ContractViolation(f"count mismatch: {img.shape[0]} images vs {txt.shape[0]} texts")
    if list(ks) != sorted(ks) or any(k < 1 for k in ks):
        raise ContractViolation("ks must be positive and sorted ascending")
    _check_rows_normalized(img, "image embedding")
    _check_rows_normalized(txt, "text embedding")

    n = img.shape[0]
    targets = np.arange(n)
    similarity = img @ txt.T
    reports = {}
    for direction, sim in (("image_to_text", similarity), ("text_to_image", similarity.T)):
        ranks = match_ranks(sim, targets)
        recalls = [float(np.mean(ranks < k)) if n else 0.0 for k in ks]
        reports[direction] = RetrievalReport(direction, list(ks), recalls, n)
    return reports


def evaluate_retrieval(model: DualEncoder, records: Sequence[DatasetRecord], vocab: Vocabulary,
                       kinds: Sequence[str] = ("long", "short"),
                       ks: Sequence[int] = DEFAULT_KS) -> Dict[str, Dict[str, RetrievalReport]]:
    """Retrieval reports keyed by caption kind, then direction."""
    images = encode_images(model, [r.image for r in records])
    out = {}
    for kind in kinds:
        texts = [getattr(r, f"{kind}_text") for r in records]
        tokens = [tokenize(t, vocab, model.config.context_len) for t in texts]
        out[kind] = recall_at_k(images, encode_texts(model, tokens), ks)
        logger.info("%s-caption retrieval: T2I R@1 %.3f, I2T R@1 %.3f", kind,
                    out[kind]["text_to_image"].recalls[0], out[kind]["image_to_text"].recalls[0])
    return out


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------

def class_embeddings(model: DualEncoder, class_names: Sequence[str], templates: Sequence[str],
                     vocab: Vocabulary) -> np.ndarray:
    """Per class: mean of the template-filled caption embeddings, re-normalized."""
    prompts = [template.format(name) for name in class_names for template in templates]
    tokens = [tokenize(p, vocab, model.config.context_len) for p in prompts]
    embs = encode_texts(model, tokens).astype(np.float64)
    embs = embs.reshape(len(class_names), len(templates), -1).mean(axis=1)
    return embs / np.linalg.norm(embs, axis=1, keepdims=True)


def predict_classes(image_embs: np.ndarray, class_embs: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lower class index on ties
    return np.argmax(np.asarray(image_embs, dtype=np.float64) @ class_embs.T, axis=1)


def zero_shot_classify(model: DualEncoder, images: Sequence[np.ndarray], labels: Sequence[int],
                       class_names: Sequence[str], templates: Sequence[str],
                       vocab: Vocabulary) -> float:
    """Top-1 accuracy of prompt-ensembled zero-shot classification."""
    if not templates:
        raise ContractViolation("zero-shot classification needs at least one template")
    if not class_names:
        raise ContractViolation("zero-shot classification needs at least one class")
    if len(images) != len(labels):
        raise ContractViolation(f"{len(images)} images but {len(labels)} labels")
    if len(class_names) == 1:
        return 1.0
    for name in class_names:
        missing = [w for w in split_words(name) if w not in vocab.index]
        if missing:
            logger.info("Class %r has out-of-vocabulary words %s; they map to <unk>", name, missing)
    classes = class_embeddings(model, class_names, templates, vocab)
    predictions = predict_classes(encode_images(model, list(images)), classes)
    accuracy = float(np.mean(predictions == np.asarray(labels))) if len(labels) else 0.0
    logger.info("Zero-shot accuracy %.3f over %d images, %d classes, %d templates",
                accuracy, len(labels), len(class_names), len(templates))
    return accuracy


# ---------------------------------------------------------------------------
# Effective-length probe
# ---------------------------------------------------------------------------

def resolve_probe_lengths(grid: Sequence[Union[int, str]], records: Sequence[DatasetRecord]) -> List[int]:
    """Numeric grid points below the longest caption, followed by that longest length."""
    full = max(len(split_words(r.long_text)) for r in records)
    lengths = sorted({int(m) for m in grid if m != "full" and int(m) < full})
    return lengths + [full]


def effective_length_probe(model: DualEncoder, records: Sequence[DatasetRecord],
                           lengths: Sequence[int], vocab: Vocabulary,
                           tag: str = "", image_embs: Optional[np.ndarray] = None) -> LengthProbeCurve:
    """Text-to-image R@1 with long captions truncated to each of `lengths` words."""
    if not records:
        raise ContractViolation("the probe needs a non-empty evaluation set")
    lengths = [int(m) for m in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or not lengths or lengths[0] < 1:
        raise ContractViolation(f"probe lengths must be positive and strictly ascending, got {lengths}")
    context = model.config.context_len
    if lengths[-1] + 2 > context:
        raise ContractViolation(f"probe length {lengths[-1]} needs {lengths[-1] + 2} slots, context is {context}")

    if image_embs is None:
        image_embs = encode_images(model, [r.image for r in records])
    r_at_1 = []
    for m in lengths:
        tokens = [tokenize(truncate_words(r.long_text, m), vocab, context) for r in records]
        report = recall_at_k(image_embs, encode_texts(model, tokens), ks=(1,))["text_to_image"]
        r_at_1.append(report.recalls[0])
        logger.debug("probe %s m=%d: R@1 %.3f", tag, m, report.recalls[0])
    logger.info("Length probe %s: %s", tag or "(untagged)",
                ", ".join(f"{m}:{r:.3f}" for m, r in zip(lengths, r_at_1)))
    return LengthProbeCurve(lengths, r_at_1, tag)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def retrieval_payload(reports: Dict[str, Dict[str, RetrievalReport]]) -> Dict:
    return {kind: [reports[kind][d].to_dict() for d in DIRECTIONS] for kind in reports}


def write_probe_csv(path, curve: LengthProbeCurve) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.to_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path
