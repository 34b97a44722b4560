"""Text-token-conditioned attention and token-to-node activation maps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .encoders import multi_head_attention
from .numeric import DimensionError, Graph, Tensor


@dataclass
class AttentionStack:
    a_ttca: np.ndarray  # (S, M+1), last column = null token
    a_loc: np.ndarray  # (M, N)
    a_composed: np.ndarray  # (S, N)

    @classmethod
    def build(cls, a_ttca, a_loc) -> "AttentionStack":
        a_ttca, a_loc = np.asarray(a_ttca), np.asarray(a_loc)
        return cls(a_ttca, a_loc, compose_maps(a_ttca, a_loc))

    @property
    def null_mass(self) -> np.ndarray:
        return self.a_ttca[..., -1]


def ttca_forward(g: Graph, t_loc, v_loc, heads: int):
    """Text tokens attend over local image tokens plus a learnable null token.

    Leading axes broadcast, so ``t_loc[None]`` (1, B, S, E) against ``v_loc[:, None]``
    (B, 1, M, E) gives every (image i, text j) pair at once.
    Returns v_ttca (..., S, E) and the head-averaged weights (..., S, M+1).
    """
    return multi_head_attention(g, "ttca", nm.tensor(t_loc), nm.tensor(v_loc), heads,
                                kv_extra=g["ttca.null"])


def pairwise_ttca(g: Graph, t_loc: Tensor, v_loc: Tensor, heads: int):
    """All pairs: result[i, j] is image i conditioned on the text of subject j."""
    b_t, b_v = t_loc.shape[0], v_loc.shape[0]
    t = nm.reshape(t_loc, (1, b_t) + t_loc.shape[1:])
    v = nm.reshape(v_loc, (b_v, 1) + v_loc.shape[1:])
    return ttca_forward(g, t, v, heads)


def compose_maps(a_ttca, a_loc) -> np.ndarray:
    """Token-node map: TTCA weights on the real clusters (null column dropped) times a_loc."""
    a_ttca, a_loc = np.asarray(a_ttca), np.asarray(a_loc)
    if a_ttca.shape[-1] != a_loc.shape[-2] + 1:
        raise DimensionError(
            f"a_ttca has {a_ttca.shape[-1]} columns, expected M+1 = {a_loc.shape[-2] + 1}")
    return np.matmul(a_ttca[..., :-1], a_loc)


def activation_map(a_composed, s: int) -> np.ndarray:
    a_composed = np.asarray(a_composed)
    if not 0 <= s < a_composed.shape[-2]:
        raise IndexError(f"token index {s} outside [0, {a_composed.shape[-2]})")
    return a_composed[..., s, :].copy()


def export_map(values, path, fmt: str = "csv") -> None:
    values = np.asarray(values, dtype=np.float64).ravel()
    path = Path(path)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["node_index", "weight"])
                for i, v in enumerate(values):
                    w.writerow([i, format(float(v), ".17g")])
        elif fmt == "svg":
            path.write_text(heatmap_svg(values))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write map to {path}: {exc}") from exc


def read_map_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[1]) for r in rows])


def _color(frac: float) -> str:
    # white -> dark red
    r = 255 - int(round(frac * 75))
    gb = 255 - int(round(frac * 255))
    return f"#{r:02x}{gb:02x}{gb:02x}"


def heatmap_svg(values, cell: int = 16, height: int = 24) -> str:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    width = cell * len(values)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 20}">']
    for i, v in enumerate(values):
        frac = (v - lo) / span if span > 0 else 0.0
        parts.append(f'<rect class="cell" x="{i * cell}" y="0" width="{cell}" height="{height}" '
                     f'fill="{_color(frac)}"><title>node {i}: {v:.6g}</title></rect>')
    parts.append(f'<text x="0" y="{height + 15}" font-size="10">min {lo:.6g}</text>')
    parts.append(f'<text x="{max(width - 80, 60)}" y="{height + 15}" font-size="10">'
                 f'max {hi:.6g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
