"""LSTM cell and the hierarchical segment LSTM temporal module.

The hierarchy splits the T sampled frames into segments of ``node_size``
frames. Every tier except the last runs one fresh LSTM per segment over the
spatially mean-pooled frame features, concatenated with the segment outputs
of all earlier tiers. The last tier runs a single LSTM across the whole clip
on attention-pooled features; its attention logits also see the sum of the
earlier tiers' outputs for the enclosing segment. The last hidden state is the
clip representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import attention as att
from . import tensor as tc
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

GATE_ORDER = ("i", "f", "o", "g")


@dataclass
class LstmParams:
    W: Tensor  # (d + D_in, 4d); rows for h first, then x
    bias: Tensor  # (4d,)

    @property
    def hidden_size(self) -> int:
        return self.bias.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[0] - self.hidden_size

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden_size: int, scale: float | None = None):
        if scale is None:
            scale = 1.0 / np.sqrt(hidden_size)
        W = rng.uniform(-scale, scale, size=(hidden_size + input_size, 4 * hidden_size))
        return cls(Tensor(W, requires_grad=True), Tensor(np.zeros(4 * hidden_size), requires_grad=True))


@dataclass(frozen=True)
class HsLstmConfig:
    tiers: int = 2
    node_size: int = 4
    frames_per_gif: int = 8

    def __post_init__(self):
        if self.tiers < 1 or self.node_size < 1 or self.frames_per_gif < 1:
            raise ConfigurationError("tiers, node_size and frames_per_gif must be positive")
        if self.frames_per_gif % self.node_size:
            raise ConfigurationError(
                f"frames_per_gif={self.frames_per_gif} not divisible by node_size={self.node_size}"
            )

    @property
    def n_segments(self) -> int:
        return self.frames_per_gif // self.node_size

    def tier_input_size(self, tier: int, D: int, d: int) -> int:
        """Input width of 0-based ``tier``: frame features plus one slot per earlier tier."""
        return D + tier * d


@dataclass
class SegmentRepresentation:
    tier: int  # 1-based
    segment_index: int
    vector: Tensor


def lstm_step(x, state, params: LstmParams):
    """One LSTM update. ``x`` is (D_in,) or (B, D_in); returns (h', c')."""
    h, c = state
    d = params.hidden_size
    if x.shape[-1] != params.input_size or h.shape[-1] != d or c.shape != h.shape:
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} incompatible with W {params.W.shape}"
        )
    z = tc.concat([h, x], axis=-1) @ params.W
    bias = params.bias if z.ndim == 1 else tc.broadcast_to(params.bias, z.shape)
    z = z + bias
    i = tc.sigmoid(z[..., :d])
    f = tc.sigmoid(z[..., d : 2 * d])
    o = tc.sigmoid(z[..., 2 * d : 3 * d])
    g = tc.tanh(z[..., 3 * d :])
    c_new = f * c + i * g
    h_new = o * tc.tanh(c_new)
    return h_new, c_new


def _zero_state(batch: int | None, d: int):
    shape = (d,) if batch is None else (batch, d)
    return tc.zeros(shape), tc.zeros(shape)


def _prepare(blocks, supervision):
    cells = [att._cells(b) for b in blocks]
    if not cells:
        raise ConfigurationError("no frames given")
    if supervision is not None and len(supervision) != len(cells):
        raise ConfigurationError(f"{len(cells)} frames but {len(supervision)} supervision heatmaps")
    batch = None if cells[0].ndim == 2 else cells[0].shape[0]
    return cells, batch


def _attend(h, C, attention: att.AttentionParams, context, mode: str, batch):
    if mode == "uniform":
        weights = att.uniform_mask(C.shape[-2], batch)
    elif mode == "keypoint":
        weights = att.mask(att.score(h, C, attention, context))
    else:
        raise ConfigurationError(f"unknown attention mode {mode!r}")
    return weights, att.pool(C, weights, attention.w_res)


def hs_forward(
    blocks: Sequence,
    attention: att.AttentionParams,
    tiers: Sequence[LstmParams],
    cfg: HsLstmConfig,
    supervision=None,
    mode: str = "keypoint",
    trace: list | None = None,
):
    """Run the hierarchy over ``blocks``; returns (clip representation, masks).

    ``trace``, when given, receives one SegmentRepresentation per
    (tier, segment) pair, the last tier reporting its state at segment ends.
    """
    cells, batch = _prepare(blocks, supervision)
    T = len(cells)
    if T != cfg.frames_per_gif:
        raise ConfigurationError(f"got {T} frames, config expects {cfg.frames_per_gif}")
    if len(tiers) != cfg.tiers:
        raise ConfigurationError(f"{len(tiers)} tier parameter sets for {cfg.tiers} tiers")
    ns = cfg.node_size
    d = tiers[-1].hidden_size

    prior: list[list[Tensor]] = [[] for _ in range(cfg.n_segments)]
    if cfg.tiers > 1:
        pooled = [tc.mean(C, axis=-2) for C in cells]
        for level, params in enumerate(tiers[:-1]):
            outputs = []
            for s in range(cfg.n_segments):
                h, c = _zero_state(batch, d)
                for t in range(s * ns, (s + 1) * ns):
                    x = tc.concat([pooled[t], *prior[s]], axis=-1)
                    h, c = lstm_step(x, (h, c), params)
                outputs.append(h)
                if trace is not None:
                    trace.append(SegmentRepresentation(level + 1, s, h))
            for s, h_seg in enumerate(outputs):
                prior[s].append(h_seg)

    params = tiers[-1]
    h, c = _zero_state(batch, d)
    masks = []
    for t, C in enumerate(cells):
        s = t // ns
        context = None
        if prior[s]:
            context = prior[s][0]
            for rep in prior[s][1:]:
                context = context + rep
        weights, x = _attend(h, C, attention, context, mode, batch)
        masks.append(weights)
        x = tc.concat([x, *prior[s]], axis=-1)
        h, c = lstm_step(x, (h, c), params)
        if trace is not None and (t + 1) % ns == 0:
            trace.append(SegmentRepresentation(cfg.tiers, s, h))
    return h, masks


def plain_lstm_forward(
    blocks: Sequence,
    attention: att.AttentionParams,
    params: LstmParams,
    supervision=None,
    mode: str = "keypoint",
):
    """Single LSTM layer over attention-pooled frames."""
    cells, batch = _prepare(blocks, supervision)
    h, c = _zero_state(batch, params.hidden_size)
    masks = []
    for C in cells:
        weights, x = _attend(h, C, attention, None, mode, batch)
        masks.append(weights)
        h, c = lstm_step(x, (h, c), params)
    return h, masks
