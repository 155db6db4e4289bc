"""Keypoint-supervised soft attention over a 7x7 grid of feature cells.

All functions accept either a single example (``h_prev`` of shape ``(d,)``,
a ``FeatureBlock`` or an ``(N, D)`` tensor) or a batch (``(B, d)`` and
``(B, N, D)``). Results keep the caller's batching.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

PROJ_DIM = 32


@dataclass
class FeatureBlock:
    cells: Tensor  # (H, W, D)
    frame_index: int = 0

    def __post_init__(self):
        if self.cells.ndim != 3:
            raise DimensionError(f"feature block must be H x W x D, got {self.cells.shape}")

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0] * self.cells.shape[1]


@dataclass
class AttentionParams:
    v: Tensor  # (1, 32)
    A_h: Tensor  # (32, d)
    A_c: Tensor  # (32, D)
    b: Tensor  # (32,)
    w_res: Tensor  # (1,)
    A_H: Tensor | None = None  # (32, d), only with more than one tier

    @classmethod
    def init(cls, rng: np.random.Generator, D: int, d: int, tier_context: bool = False, scale: float = 0.1):
        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)

        return cls(
            v=u(1, PROJ_DIM),
            A_h=u(PROJ_DIM, d),
            A_c=u(PROJ_DIM, D),
            b=u(PROJ_DIM),
            w_res=Tensor(np.zeros(1), requires_grad=True),
            A_H=u(PROJ_DIM, d) if tier_context else None,
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("v", "A_h", "A_c", "b", "w_res", "A_H"):
            t = getattr(self, name)
            if t is not None:
                yield name, t


def _cells(block) -> Tensor:
    """FeatureBlock -> (N, D); raw tensors are taken as (N, D) or (B, N, D)."""
    if isinstance(block, FeatureBlock):
        H, W, D = block.cells.shape
        return block.cells.reshape(H * W, D)
    return block


def score(h_prev, block, params: AttentionParams, tier_context=None) -> Tensor:
    """Unnormalized attention logits, one per cell.

    logit_k = v . tanh(A_h h_prev + A_H tier_context + A_c C_k + b)
    """
    C = _cells(block)
    single = C.ndim == 2
    if single:
        C = C.reshape(1, *C.shape)
        h_prev = h_prev.reshape(1, -1)
        if tier_context is not None:
            tier_context = tier_context.reshape(1, -1)
    B, N, D = C.shape
    if params.A_c.shape[1] != D:
        raise DimensionError(f"A_c expects {params.A_c.shape[1]} channels, block has {D}")
    if h_prev.shape != (B, params.A_h.shape[1]):
        raise DimensionError(f"h_prev shape {h_prev.shape} does not match A_h {params.A_h.shape}")
    P = params.A_c.shape[0]
    query = h_prev @ params.A_h.T
    if tier_context is not None:
        if params.A_H is None:
            raise ConfigurationError("tier context given but attention has no A_H weights")
        query = query + tier_context @ params.A_H.T
    query = query + tc.broadcast_to(params.b, (B, P))
    keys = (C.reshape(B * N, D) @ params.A_c.T).reshape(B, N, P)
    hidden = tc.tanh(keys + tc.broadcast_to(query.reshape(B, 1, P), (B, N, P)))
    logits = (hidden.reshape(B * N, P) @ params.v.T).reshape(B, N)
    return logits.reshape(N) if single else logits


def mask(scores) -> Tensor:
    """Spatial softmax over cells (last axis)."""
    return tc.softmax(scores, axis=-1)


def uniform_mask(n_cells: int = 49, batch: int | None = None) -> Tensor:
    shape = (n_cells,) if batch is None else (batch, n_cells)
    return Tensor(np.full(shape, 1.0 / n_cells))


def pool(block, weights, w_res) -> Tensor:
    """Attention pooling with a residual link: sum_k (weights_k + w_res) C_k."""
    C = _cells(block)
    shifted = weights + w_res
    if C.ndim == 2:
        return shifted @ C
    B, N, D = C.shape
    return (shifted.reshape(B, 1, N) @ C).reshape(B, D)
