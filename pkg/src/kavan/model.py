"""Full network: toy encoder, attention + temporal module, and output heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tc
from .attention import AttentionParams
from .data import GRID, N_EMOTIONS, EncoderParams, encode_patches, patch_side
from .errors import ConfigurationError
from .losses import N_CLASSES
from .recurrent import HsLstmConfig, LstmParams, hs_forward, plain_lstm_forward
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    temporal: str = "hs_lstm"  # or "plain_lstm"
    attention: str = "keypoint"  # or "uniform"
    tiers: int = 2
    node_size: int = 4
    frames: int = 8
    D: int = 64
    d: int = 64
    inputs: str = "frames"  # or "features"

    def __post_init__(self):
        if self.temporal not in ("hs_lstm", "plain_lstm"):
            raise ConfigurationError(f"unknown temporal module {self.temporal!r}")
        if self.attention not in ("keypoint", "uniform"):
            raise ConfigurationError(f"unknown attention mode {self.attention!r}")
        if self.inputs not in ("frames", "features"):
            raise ConfigurationError(f"unknown input kind {self.inputs!r}")
        if self.D < 1 or self.d < 1:
            raise ConfigurationError("D and d must be positive")
        self.hs_config()

    def hs_config(self) -> HsLstmConfig:
        if self.temporal == "plain_lstm":
            return HsLstmConfig(1, self.frames, self.frames)
        return HsLstmConfig(self.tiers, self.node_size, self.frames)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KavanParams:
    attention: AttentionParams
    tiers: list[LstmParams]
    W_reg: Tensor  # (d, 17)
    b_reg: Tensor
    W_cls: Tensor  # (d, 4)
    b_cls: Tensor
    encoder: EncoderParams | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "KavanParams":
        rng = np.random.default_rng(seed)
        hs = cfg.hs_config()
        encoder = EncoderParams.init(rng, cfg.D) if cfg.inputs == "frames" else None
        attention = AttentionParams.init(rng, cfg.D, cfg.d, tier_context=hs.tiers > 1)
        tiers = [LstmParams.init(rng, hs.tier_input_size(k, cfg.D, cfg.d), cfg.d) for k in range(hs.tiers)]
        s = 1.0 / np.sqrt(cfg.d)
        return cls(
            attention=attention,
            tiers=tiers,
            W_reg=Tensor(rng.uniform(-s, s, (cfg.d, N_EMOTIONS)), requires_grad=True),
            b_reg=Tensor(np.zeros(N_EMOTIONS), requires_grad=True),
            W_cls=Tensor(rng.uniform(-s, s, (cfg.d, N_CLASSES)), requires_grad=True),
            b_cls=Tensor(np.zeros(N_CLASSES), requires_grad=True),
            encoder=encoder,
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        if self.encoder is not None:
            yield "encoder.W", self.encoder.W
            yield "encoder.bias", self.encoder.bias
        for name, t in self.attention.named():
            yield f"attention.{name}", t
        for k, tier in enumerate(self.tiers):
            yield f"tier{k}.W", tier.W
            yield f"tier{k}.bias", tier.bias
        yield "head.W_reg", self.W_reg
        yield "head.b_reg", self.b_reg
        yield "head.W_cls", self.W_cls
        yield "head.b_cls", self.b_cls

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def to_dict(self) -> dict:
        return {name: t.to_dict() for name, t in self.named_parameters()}

    def load_dict(self, payload: dict) -> None:
        for name, t in self.named_parameters():
            if name not in payload:
                raise ConfigurationError(f"parameter {name} missing from file")
            loaded = Tensor.from_dict(payload[name])
            if loaded.shape != t.shape:
                raise ConfigurationError(f"parameter {name}: shape {loaded.shape} != {t.shape}")
            t.data = loaded.data


@dataclass
class ModelOutput:
    intensities: Tensor  # (B, 17)
    logits: Tensor  # (B, 4)
    masks: list[Tensor]  # T x (B, 49)
    representation: Tensor  # (B, d)
    segments: list = field(default_factory=list)


def feature_blocks(params: KavanParams, cfg: ModelConfig, inputs: np.ndarray) -> list[Tensor]:
    """Per-frame (B, 49, D) blocks from patches (B, T, 49, P) or features (B, T, 49, D)."""
    B, T, N = inputs.shape[:3]
    if T != cfg.frames or N != GRID * GRID:
        raise ConfigurationError(f"inputs shaped {inputs.shape}, expected (B, {cfg.frames}, 49, ...)")
    if cfg.inputs == "features":
        if inputs.shape[3] != cfg.D:
            raise ConfigurationError(f"features have {inputs.shape[3]} channels, config says {cfg.D}")
        return [Tensor(inputs[:, t]) for t in range(T)]
    if inputs.shape[3] != patch_side() ** 2:
        raise ConfigurationError(f"patches have {inputs.shape[3]} pixels, expected {patch_side() ** 2}")
    enc = encode_patches(inputs.reshape(B * T * N, -1), params.encoder).reshape(B, T, N, cfg.D)
    return [enc[:, t] for t in range(T)]


def forward(params: KavanParams, cfg: ModelConfig, inputs: np.ndarray, trace: bool = False) -> ModelOutput:
    blocks = feature_blocks(params, cfg, inputs)
    segments: list = [] if trace else None
    if cfg.temporal == "plain_lstm":
        rep, masks = plain_lstm_forward(blocks, params.attention, params.tiers[0], mode=cfg.attention)
    else:
        rep, masks = hs_forward(blocks, params.attention, params.tiers, cfg.hs_config(), mode=cfg.attention, trace=segments)
    z = rep @ params.W_reg
    pred = tc.tanh(z + tc.broadcast_to(params.b_reg, z.shape))
    logits = rep @ params.W_cls
    logits = logits + tc.broadcast_to(params.b_cls, logits.shape)
    return ModelOutput(pred, logits, masks, rep, segments or [])
