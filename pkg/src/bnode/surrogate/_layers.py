"""Shared plumbing: MLPs whose first layer is split by input block.

Every network in the model family consumes a concatenation such as
``[state, control, parameter]``.  Instead of concatenating at every solver
stage, the first weight matrix is cut into row blocks.  The blocks for inputs
that are fixed over an output interval are folded into a precomputed
"context" added to the bias, so a right-hand-side call costs one matmul per
layer.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import diffcore as dc
from ..diffcore import DiffValue, MlpParams

ZERO_WIDTH = None


def mlp_sizes(n_in: int, n_out: int, hidden: int, n_layers: int) -> list[int]:
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    return [n_in] + [hidden] * (n_layers - 1) + [n_out]


def row_blocks(mlp: MlpParams, widths: Sequence[int]) -> list[DiffValue | None]:
    """Slice the first weight matrix into consecutive row blocks (``None`` for width 0)."""
    if sum(widths) != mlp.in_features:
        raise ValueError(f"blocks of widths {list(widths)} do not cover {mlp.in_features} inputs")
    W0 = mlp.weights[0]
    out, start = [], 0
    for w in widths:
        out.append(W0[start:start + w] if w else None)
        start += w
    return out


def context(mlp: MlpParams, parts: Sequence[tuple[DiffValue | None, DiffValue | None]]) -> DiffValue:
    """``b0 + sum(x_k @ W_k)`` over the fixed input blocks.

    A part is ``(x, W)``; either may be ``None`` for an absent group.  ``x``
    may be ``(B, T+1, k)`` (time-varying) or ``(B, k)`` (static); static parts
    are given a singleton time axis when a time-varying part exists.
    """
    terms = [(x, w) for x, w in parts if x is not None and w is not None]
    timed = any(x.ndim == 3 for x, _ in terms)
    ctx: DiffValue = mlp.biases[0]
    for x, w in terms:
        term = dc.matmul(x, w)
        if timed and x.ndim == 2:
            term = dc.reshape(term, (term.shape[0], 1, term.shape[1]))
        ctx = ctx + term
    return ctx


def interval_contexts(ctx: DiffValue, n_steps: int) -> list[DiffValue]:
    """Split a context into the value held on each output interval."""
    if ctx.ndim == 3:
        return [ctx[:, i] for i in range(n_steps)]
    return [ctx] * n_steps


def forward_with_context(mlp: MlpParams, x, w_x: DiffValue, ctx) -> DiffValue:
    """Run the MLP where the first layer is ``x @ w_x + ctx``."""
    last = mlp.n_layers - 1
    h = dc.dense(x, w_x, ctx, mlp.activation if last > 0 else "identity")
    for k in range(1, mlp.n_layers):
        h = dc.dense(h, mlp.weights[k], mlp.biases[k], mlp.activation if k < last else "identity")
    return h


def apply_mask(x: DiffValue, mask: np.ndarray | None, fill: float = 0.0) -> DiffValue:
    """Pin masked channels (mask 0) to ``fill``; no node when nothing is masked."""
    if mask is None or mask.all():
        return x
    if fill == 0.0:
        return x * mask
    return x * mask + fill * (1.0 - mask)
