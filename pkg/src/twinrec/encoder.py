"""Twin sequence encoder: depthwise convolution + positional self-attention.

The convolution branch captures local transitions with one length-L kernel
per channel (O(LD) parameters per head, centred window, zero padding). The
attention branch adds learnable position embeddings and applies scaled
dot-product self-attention (O(3D^2) per head). With H heads per branch the
outputs are concatenated along the feature axis into a (T, 2HD) matrix,
convolution heads first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, zeros


@dataclass
class ConvHead:
    kernels: Tensor  # (L, D): one length-L kernel per channel

    @property
    def window(self):
        return self.kernels.data.shape[0]


@dataclass
class AttnHead:
    w_q: Tensor  # (D, D)
    w_k: Tensor  # (D, D)
    w_v: Tensor  # (D, D)


@dataclass
class PositionTable:
    table: Tensor  # (T_max, D); row t serves position t only

    @property
    def max_len(self):
        return self.table.data.shape[0]


def conv_branch(h, head):
    """Depthwise 1-D convolution, centred window, zero padding at the ends."""
    t, d = h.data.shape
    length = head.window
    half = length // 2
    out = None
    for j in range(length):
        offset = j - half  # output row i reads input row i + offset
        lo, hi = max(0, offset), t + min(0, offset)
        if lo >= hi:
            continue
        seg = h[lo:hi] * head.kernels[j:j + 1, :]
        top, bottom = max(0, -offset), max(0, offset)
        parts = []
        if top:
            parts.append(zeros((top, d)))
        parts.append(seg)
        if bottom:
            parts.append(zeros((bottom, d)))
        shifted = concat(parts, axis=0) if len(parts) > 1 else seg
        out = shifted if out is None else out + shifted
    return out


def attn_branch(h, positions, head, n_heads, valid_mask=None):
    """Position-aware scaled dot-product self-attention for one head.

    No causal mask: the encoder is bidirectional and leakage is prevented
    by how training samples are constructed. Padded positions, when given
    via ``valid_mask``, are excluded as attention targets.

    Returns (output (T, D), attention weights (T, T)).
    """
    t, d = h.data.shape
    if t > positions.max_len:
        raise ValueError(f"sequence length {t} exceeds position table {positions.max_len}")
    ht = h + positions.table[:t]
    q = ht @ head.w_q.transpose()
    k = ht @ head.w_k.transpose()
    v = ht @ head.w_v.transpose()
    scale = 1.0 / math.sqrt(d / n_heads)
    logits = (q @ k.transpose()) * scale
    mask = None
    if valid_mask is not None:
        mask = np.broadcast_to(np.asarray(valid_mask, dtype=bool)[None, :], (t, t))
    weights = logits.softmax(axis=1, mask=mask)
    return weights @ v, weights


def twin_forward(h, conv_heads, attn_heads, positions, valid_mask=None):
    """Run all heads and concatenate along features: conv heads first.

    Returns (output (T, 2HD), list of per-head attention weight tensors).
    """
    outputs = [conv_branch(h, head) for head in conv_heads]
    attn_weights = []
    for head in attn_heads:
        out, weights = attn_branch(h, positions, head, len(attn_heads), valid_mask)
        outputs.append(out)
        attn_weights.append(weights)
    widths = {o.data.shape[1] for o in outputs}
    if len(widths) != 1:
        raise ValueError(f"mismatched head output widths {sorted(widths)}")
    return concat(outputs, axis=1), attn_weights


def count_branch_params(n_heads, window, dim):
    """Parameter counts: twin encoder H(LD + 3D^2) vs plain 2H-head attention 6HD^2."""
    if n_heads < 1 or window < 1 or dim < 1:
        raise ValueError("head count, window and dim must be positive")
    twin = n_heads * (window * dim + 3 * dim * dim)
    plain = 6 * n_heads * dim * dim
    return twin, plain
