"""Samples, emotion taxonomy, frame sampling, synthetic data and the toy encoder."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as tc
from .attention import FeatureBlock
from .errors import ContractError, ConfigurationError, DimensionError
from .heatmap import Keypoint, bin_edges
from .tensor import Tensor

FORMAT_VERSION = 1
N_EMOTIONS = 17
IMAGE_SIZE = 64
GRID = 7


# ---------------------------------------------------------------------------
# taxonomy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmotionTaxonomy:
    names: tuple[str, ...]
    quadrant_names: tuple[str, ...]
    quadrant_of: tuple[int, ...]  # per emotion index

    def __post_init__(self):
        if len(self.names) != len(self.quadrant_of):
            raise ConfigurationError("every emotion needs exactly one quadrant")
        if len(self.quadrant_names) != 4:
            raise ConfigurationError("taxonomy needs four quadrants")
        used = set(self.quadrant_of)
        if used != set(range(4)):
            raise ConfigurationError(f"quadrants without emotions: {sorted(set(range(4)) - used)}")

    @classmethod
    def from_dict(cls, payload: dict) -> "EmotionTaxonomy":
        quads = tuple(payload["quadrants"])
        names = tuple(payload["emotions"])
        try:
            quadrant_of = tuple(quads.index(payload["emotions"][n]) for n in names)
        except ValueError as exc:
            raise ConfigurationError(f"emotion mapped to an unknown quadrant: {exc}") from None
        return cls(names, quads, quadrant_of)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "quadrants": list(self.quadrant_names),
            "emotions": {n: self.quadrant_names[q] for n, q in zip(self.names, self.quadrant_of)},
        }

    @classmethod
    def load(cls, path=None) -> "EmotionTaxonomy":
        if path is None:
            text = resources.files("kavan").joinpath("taxonomy.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def emotions_in(self, quadrant: int) -> list[int]:
        return [i for i, q in enumerate(self.quadrant_of) if q == quadrant]


def default_taxonomy() -> EmotionTaxonomy:
    return EmotionTaxonomy.load()


def derive_category(intensities, taxonomy: EmotionTaxonomy) -> int:
    """Quadrant of the strongest emotion; ties resolve to the lowest index."""
    values = np.asarray(intensities.data if isinstance(intensities, Tensor) else intensities)
    return taxonomy.quadrant_of[int(np.argmax(values))]


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 8
    mode: str = "center"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if self.mode not in ("random", "center"):
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")


def sample_frames(n_frames: int, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> list[int]:
    """One frame index per equal-length segment.

    Segment s covers [floor(s*n/T), floor((s+1)*n/T)). Clips shorter than T
    frames use every frame once and then repeat the last one.
    """
    if n_frames <= 0:
        raise ContractError(f"n_frames must be positive, got {n_frames}")
    T = cfg.T
    if n_frames < T:
        return list(range(n_frames)) + [n_frames - 1] * (T - n_frames)
    if cfg.mode == "random" and rng is None:
        rng = np.random.default_rng(cfg.seed)
    out = []
    for s in range(T):
        lo, hi = (s * n_frames) // T, ((s + 1) * n_frames) // T
        if cfg.mode == "center":
            out.append((lo + hi - 1) // 2)
        else:
            out.append(int(rng.integers(lo, hi)))
    return out


# ---------------------------------------------------------------------------
# samples and (de)serialization
# ---------------------------------------------------------------------------


@dataclass
class GifSample:
    id: str
    intensities: np.ndarray
    keypoints: list[list[Keypoint]]
    frames: np.ndarray | None = None  # (n, 64, 64) greyscale in [0, 1]
    features: np.ndarray | None = None  # (n, 7, 7, D) precomputed
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if (self.frames is None) == (self.features is None):
            raise ContractError(f"sample {self.id}: exactly one of frames/features is required")
        n = self.n_frames
        if n == 0:
            raise ContractError(f"sample {self.id}: no frames")
        if len(self.keypoints) != n:
            raise ContractError(f"sample {self.id}: {len(self.keypoints)} keypoint frames for {n} frames")

    @property
    def n_frames(self) -> int:
        arr = self.frames if self.frames is not None else self.features
        return int(arr.shape[0])

    def to_dict(self) -> dict:
        d = {
            "format": FORMAT_VERSION,
            "id": self.id,
            "intensities": self.intensities.tolist(),
            "keypoints": [[kp.to_dict() for kp in frame] for frame in self.keypoints],
        }
        if self.frames is not None:
            d["frames"] = self.frames.tolist()
        else:
            d["features"] = {"shape": list(self.features.shape), "data": self.features.reshape(-1).tolist()}
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GifSample":
        if d.get("format") != FORMAT_VERSION:
            raise ContractError(f"unsupported sample format {d.get('format')!r}")
        frames = features = None
        if "frames" in d:
            frames = np.asarray(d["frames"], dtype=np.float64)
            if frames.ndim != 3:
                raise DimensionError(f"frames must be n x H x W, got {frames.shape}")
        elif "features" in d:
            features = np.asarray(d["features"]["data"], dtype=np.float64).reshape(d["features"]["shape"])
        return cls(
            id=str(d["id"]),
            intensities=np.asarray(d["intensities"], dtype=np.float64),
            keypoints=[[Keypoint.from_dict(k) for k in frame] for frame in d["keypoints"]],
            frames=frames,
            features=features,
            meta=d.get("meta", {}),
        )


def save_dataset(samples: Iterable[GifSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()))
            fh.write("\n")


def load_dataset(path) -> list[GifSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(GifSample.from_dict(json.loads(line)))
    return out


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


# ---------------------------------------------------------------------------
# toy encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    W: Tensor  # (patch_pixels, D)
    bias: Tensor  # (D,)

    @classmethod
    def init(cls, rng: np.random.Generator, D: int, image_size: int = IMAGE_SIZE, scale: float = 0.1):
        p = patch_side(image_size) ** 2
        return cls(
            Tensor(rng.uniform(-scale, scale, size=(p, D)), requires_grad=True),
            Tensor(np.zeros(D), requires_grad=True),
        )


def patch_side(image_size: int = IMAGE_SIZE) -> int:
    return int(np.diff(bin_edges(image_size, GRID)).max())


_PATCH_INDEX: dict[int, np.ndarray] = {}


def _patch_index(image_size: int) -> np.ndarray:
    """Gather table (49, side*side) into a flattened image with a trailing zero pad."""
    if image_size not in _PATCH_INDEX:
        edges = bin_edges(image_size, GRID)
        side = patch_side(image_size)
        pad = image_size * image_size
        table = np.full((GRID * GRID, side * side), pad, dtype=np.int64)
        for i in range(GRID):
            for j in range(GRID):
                rows = np.arange(edges[i], edges[i + 1])
                cols = np.arange(edges[j], edges[j + 1])
                idx = np.full((side, side), pad, dtype=np.int64)
                idx[: rows.size, : cols.size] = rows[:, None] * image_size + cols[None, :]
                table[i * GRID + j] = idx.reshape(-1)
        _PATCH_INDEX[image_size] = table
    return _PATCH_INDEX[image_size]


def extract_patches(frames: np.ndarray) -> np.ndarray:
    """(..., S, S) images -> (..., 49, side*side) bin patches, zero-padded to the largest bin."""
    frames = np.asarray(frames, dtype=np.float64)
    S = frames.shape[-1]
    if frames.shape[-2] != S or S < GRID:
        raise DimensionError(f"frames must be square with side >= {GRID}, got {frames.shape}")
    lead = frames.shape[:-2]
    flat = frames.reshape(-1, S * S)
    padded = np.concatenate([flat, np.zeros((flat.shape[0], 1))], axis=1)
    out = padded[:, _patch_index(S)]
    return out.reshape(*lead, GRID * GRID, -1)


def encode_patches(patches, params: EncoderParams) -> Tensor:
    """tanh(patches @ W + bias) for patches of shape (M, P)."""
    patches = tc.as_tensor(patches)
    z = patches @ params.W
    return tc.tanh(z + tc.broadcast_to(params.bias, z.shape))


def encode(frame, params: EncoderParams, frame_index: int = 0) -> FeatureBlock:
    """Toy backbone: shared affine + tanh over each of the 7x7 bins."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.min() < 0 or frame.max() > 1:
        raise ContractError("frame pixels must lie in [0, 1]")
    cells = encode_patches(extract_patches(frame), params)
    return FeatureBlock(cells.reshape(GRID, GRID, -1), frame_index)


# ---------------------------------------------------------------------------
# synthetic planted-face data
# ---------------------------------------------------------------------------

PROTOTYPE_SEED = 1729
QUADRANT_FACE_CENTERS = ((20.0, 20.0), (20.0, 44.0), (44.0, 20.0), (44.0, 44.0))


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    min_frames: int = 8
    max_frames: int = 12
    keypoints_per_face: int = 10
    missing_rate: float = 0.0
    label_jitter: float = 0.03
    distractors: int = 2
    background: float = 0.3
    pixel_noise: float = 0.05
    level_noise: float = 0.01  # per-frame jitter of the face brightness


def emotion_prototypes(taxonomy: EmotionTaxonomy) -> np.ndarray:
    """(17, 17) intensity prototypes: row e ranks e first, then its quadrant."""
    rng = np.random.default_rng(PROTOTYPE_SEED)
    K = len(taxonomy.names)
    levels = np.linspace(-0.9, 0.9, K)
    protos = np.zeros((K, K))
    for e in range(K):
        same = [j for j in rng.permutation(K) if j != e and taxonomy.quadrant_of[j] == taxonomy.quadrant_of[e]]
        other = [j for j in rng.permutation(K) if taxonomy.quadrant_of[j] != taxonomy.quadrant_of[e]]
        ranking = [e, *same, *other]
        protos[e, ranking] = levels[::-1]
    return protos


def face_levels(emotion: int) -> tuple[float, float]:
    """Face brightness in the first and second half of the clip."""
    a, b = divmod(emotion, 4)
    return 0.55 + 0.1 * a, 0.6 + 0.1 * b


def _face_keypoints(rng, cy, cx, sigma, n, size) -> list[Keypoint]:
    n_lips = max(1, n * 3 // 10)
    n_ring = n - n_lips
    pts = []
    for k in range(n_ring):
        ang = 2 * np.pi * k / n_ring
        pts.append((cy + 0.8 * sigma * np.sin(ang), cx + 0.8 * sigma * np.cos(ang), "other"))
    for k in range(n_lips):
        off = (k - (n_lips - 1) / 2) * 0.3 * sigma
        pts.append((cy + 0.5 * sigma, cx + off, "lips"))
    out = []
    for y, x, group in pts:
        y += rng.normal(0, 0.25)
        x += rng.normal(0, 0.25)
        out.append(Keypoint(x / (size - 1), y / (size - 1), 1.0, group))
    return out


def _stripes(h, w, level):
    rows = np.where(np.arange(h) % 2 == 0, 0.2, -0.2)
    return np.clip(level + np.repeat(rows[:, None], w, axis=1), 0, 1)


def generate_synthetic(n: int, cfg: SyntheticConfig = SyntheticConfig(), taxonomy: EmotionTaxonomy | None = None):
    """Planted-face clips whose face brightness encodes the dominant emotion.

    The face is a bright Gaussian blob whose position is biased toward a
    quadrant-specific region; striped distractor patches of random brightness
    share the frame. A keypoint cluster is planted on the face.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    taxonomy = taxonomy or default_taxonomy()
    protos = emotion_prototypes(taxonomy)
    rng = np.random.default_rng(cfg.seed)
    S = IMAGE_SIZE
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    samples = []
    for i in range(n):
        quadrant = int(rng.integers(4))
        emotion = int(rng.choice(taxonomy.emotions_in(quadrant)))
        intensities = protos[emotion] + rng.uniform(-cfg.label_jitter, cfg.label_jitter, N_EMOTIONS)
        n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        base = np.asarray(QUADRANT_FACE_CENTERS[quadrant])
        cy, cx = np.clip(base + rng.normal(0, 6.0, 2), 12, S - 13)
        sigma = float(rng.uniform(4.0, 7.0))
        first, second = face_levels(emotion)
        boxes = []
        for _ in range(cfg.distractors):
            for _attempt in range(50):
                h, w = rng.integers(10, 17, 2)
                y0, x0 = rng.integers(0, S - h), rng.integers(0, S - w)
                if np.hypot(y0 + h / 2 - cy, x0 + w / 2 - cx) > 2.5 * sigma + 8:
                    break
            boxes.append((int(y0), int(x0), int(h), int(w)))
        frames = np.empty((n_frames, S, S))
        kps, faces = [], []
        for t in range(n_frames):
            cy_t, cx_t = cy + rng.normal(0, 0.7), cx + rng.normal(0, 0.7)
            level = (first if t < n_frames // 2 else second) + rng.normal(0, cfg.level_noise)
            img = cfg.background + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise, (S, S))
            blob = np.exp(-((yy - cy_t) ** 2 + (xx - cx_t) ** 2) / (2 * sigma * sigma))
            img = img + (level - cfg.background) * blob
            for y0, x0, h, w in boxes:
                img[y0 : y0 + h, x0 : x0 + w] = _stripes(h, w, rng.uniform(0.5, 0.95))
            frames[t] = np.clip(img, 0.0, 1.0)
            faces.append([float(cy_t), float(cx_t), sigma])
            if rng.random() < cfg.missing_rate:
                kps.append([])
            else:
                kps.append(_face_keypoints(rng, cy_t, cx_t, sigma, cfg.keypoints_per_face, S))
        samples.append(
            GifSample(
                id=f"syn-{cfg.seed}-{i:05d}",
                intensities=intensities,
                keypoints=kps,
                frames=frames,
                meta={"emotion": emotion, "faces": faces},
            )
        )
    return samples
