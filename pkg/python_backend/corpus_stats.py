import pandas as pd
import numpy as np
from typing import Dict, List, Any, Sequence

from data_synth import DatasetRecord, split_words


def caption_length_frame(records: Sequence[DatasetRecord]) -> pd.DataFrame:
    """One row per record with long/short caption word counts"""
    return pd.DataFrame({
        "id": [r.scene_id for r in records],
        "long_tokens": [len(split_words(r.long_text)) for r in records],
        "short_tokens": [len(split_words(r.short_text)) for r in records],
    })


def calculate_statistics(records: Sequence[DatasetRecord]) -> Dict[str, Any]:
    """Summary statistics of caption token counts"""

    df = caption_length_frame(records)
    if df.empty:
        return {"statistics": [], "summary": "Empty dataset", "records": 0}

    stats_list = []
    for col in ("long_tokens", "short_tokens"):
        series = df[col]
        stats_list.append({
            "column": col,
            "mean": float(series.mean()),
            "median": float(series.median()),
            "std": float(series.std()) if len(series) > 1 else 0.0,
            "min": int(series.min()),
            "max": int(series.max()),
            "count": int(series.count()),
            "q25": float(series.quantile(0.25)),
            "q75": float(series.quantile(0.75))
        })

    return {
        "statistics": stats_list,
        "records": int(len(df)),
        "imageShape": list(np.asarray(records[0].image).shape)
    }


def max_caption_tokens(records: Sequence[DatasetRecord], kind: str = "long") -> int:
    """Longest caption (in words) of the given kind"""
    if kind not in ("long", "short"):
        raise ValueError(f"Unsupported caption kind: {kind}")
    df = caption_length_frame(records)
    return int(df[f"{kind}_tokens"].max()) if not df.empty else 0


def first_mention_positions(text: str, words: List[str]) -> Dict[str, int]:
    """Word index of the first mention of each requested word (-1 if absent)"""
    tokens = split_words(text)
    return {w: tokens.index(w) if w in tokens else -1 for w in words}
