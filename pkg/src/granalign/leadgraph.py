"""Binary lead graphs: connection pairs to masks, per-layer mask assembly, SEP handling.

A lead graph is a square 0/1 matrix over token positions that multiplies
into the attention matrix, restricting which connections an encoder layer
may use. Single-modality graphs come from index-pair lists; the combined
image+question masks differ per encoder layer:

  layer 1: question self-attention only
  layer 2: cross-modal attention only
  layer 3: within-modality structure plus full cross-modal attention
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

Pair = tuple[int, int]


@dataclass
class LeadGraph:
    """Square binary mask over token positions."""

    matrix: np.ndarray
    has_sep: bool = field(default=False, compare=False)

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"lead graph must be square, got shape {m.shape}")
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("lead graph entries must be 0 or 1")
        self.matrix = m

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def pairs_to_matrix(pairs: Sequence[Pair], n: int) -> LeadGraph:
    """Set cell (src, dst) to 1 for every pair; duplicates are harmless."""
    m = np.zeros((n, n))
    for src, dst in pairs:
        if not (0 <= src < n and 0 <= dst < n):
            raise ValueError(f"pair ({src}, {dst}) out of range for {n} tokens")
        m[src, dst] = 1.0
    return LeadGraph(m)


def full_graph(n: int) -> LeadGraph:
    return LeadGraph(np.ones((n, n)))


def layer_masks(g_img: LeadGraph, g_q: LeadGraph) -> tuple[LeadGraph, LeadGraph, LeadGraph]:
    """The three combined masks, image block first, question block second."""
    ni, nq = g_img.size, g_q.size
    n = ni + nq

    m1 = np.zeros((n, n))
    m1[ni:, ni:] = 1.0

    m2 = np.zeros((n, n))
    m2[:ni, ni:] = 1.0
    m2[ni:, :ni] = 1.0

    m3 = np.ones((n, n))
    m3[:ni, :ni] = g_img.matrix
    m3[ni:, ni:] = g_q.matrix

    return LeadGraph(m1), LeadGraph(m2), LeadGraph(m3)


def mask_for_layer(masks: tuple[LeadGraph, LeadGraph, LeadGraph], layer: int) -> LeadGraph:
    """Mask for 0-based ``layer``; layers past the third reuse the third mask."""
    return masks[min(layer, 2)]


def append_sep_mask(g_img: LeadGraph, connect_all: bool = True) -> LeadGraph:
    """Grow an image mask by one trailing SEP position.

    With ``connect_all`` the SEP row and column are all ones, so SEP can act
    as an image-side summary position; otherwise SEP only attends to itself.
    """
    assert not g_img.has_sep, "SEP already appended to this lead graph"
    ni = g_img.size
    m = np.zeros((ni + 1, ni + 1))
    m[:ni, :ni] = g_img.matrix
    if connect_all:
        m[ni, :] = 1.0
        m[:, ni] = 1.0
    else:
        m[ni, ni] = 1.0
    return LeadGraph(m, has_sep=True)


def append_sep(tokens_img: ad.Tensor, g_img: LeadGraph, sep: ad.Tensor,
               connect_all: bool = True) -> tuple[ad.Tensor, LeadGraph]:
    """Append the learned SEP row after the image tokens and grow the mask."""
    if sep.data.ndim != 1:
        raise ValueError(f"SEP vector must be 1-D, got shape {sep.data.shape}")
    ni = g_img.size
    if tokens_img.data.shape[0] != ni:
        raise ValueError(f"token count {tokens_img.data.shape[0]} does not match mask size {ni}")
    out_tokens = ad.concat_rows([tokens_img, ad.reshape(sep, (1, sep.data.shape[0]))])
    return out_tokens, append_sep_mask(g_img, connect_all)


def format_grid(g: LeadGraph) -> str:
    """Render as lines of space-separated 0/1 digits (golden-file friendly)."""
    return "\n".join(" ".join(str(int(v)) for v in row) for row in g.matrix)


def parse_grid(text: str) -> LeadGraph:
    rows = [[float(v) for v in line.split()] for line in text.strip().splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    return LeadGraph(np.array(rows))
