import pandas as pd
import plotly.graph_objects as go
import plotly.express as px
from pathlib import Path
from typing import Dict, Any, Sequence

from evaluation import LengthProbeCurve

PROBE_DIV_ID = "length-probe"
ABLATION_DIV_ID = "ablation-recall"


def _style(fig: go.Figure) -> go.Figure:
    fig.update_layout(
        template='plotly_white',
        font=dict(family='Inter, sans-serif'),
        title_x=0.5
    )
    return fig


def create_probe_plot(curves: Sequence[LengthProbeCurve], knee: int = 20) -> go.Figure:
    """R@1 against caption length, one line per model"""

    if not curves:
        raise ValueError("At least one probe curve is required")

    frames = []
    for curve in curves:
        df = curve.to_frame()
        df['model'] = curve.tag or 'model'
        frames.append(df)
    df = pd.concat(frames, ignore_index=True)

    fig = px.line(df, x='length', y='r_at_1', color='model', markers=True,
                  title='Text-to-image R@1 vs. caption length',
                  labels={'length': 'Caption length (words)', 'r_at_1': 'R@1'})
    # where short-caption pretraining stops seeing positions
    fig.add_vline(x=knee, line_dash='dash', line_color='gray')
    fig.update_yaxes(range=[0, 1.05])
    return _style(fig)


def create_ablation_plot(table: Sequence[Dict[str, Any]]) -> go.Figure:
    """Grouped bars of short/long caption R@1 per variant"""

    if not table:
        raise ValueError("Ablation table is empty")

    df = pd.DataFrame(table)
    missing = {'variant', 'short_r1', 'long_r1'} - set(df.columns)
    if missing:
        raise ValueError(f"Ablation rows missing columns: {sorted(missing)}")

    long_df = df.melt(id_vars='variant', value_vars=['short_r1', 'long_r1'],
                      var_name='captions', value_name='r_at_1')
    long_df['captions'] = long_df['captions'].map({'short_r1': 'short', 'long_r1': 'long'})
    fig = px.bar(long_df, x='variant', y='r_at_1', color='captions', barmode='group',
                 title='Text-to-image R@1 per training variant',
                 labels={'r_at_1': 'R@1', 'variant': 'Variant'})
    fig.update_yaxes(range=[0, 1.05])
    return _style(fig)


def write_figure(fig: go.Figure, path, div_id: str) -> Path:
    """Self-contained HTML with a fixed div id so reruns write identical files"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs=True, full_html=True, div_id=div_id,
                   config={"responsive": True, "displayModeBar": True})
    return path

