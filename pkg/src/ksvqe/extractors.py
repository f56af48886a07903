"""Frozen semantic/distortion feature extractors and the trainable adapters on top of them."""

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .fragments import FragmentGrid, VideoTensor


class UndefinedLossError(ValueError):
    pass


# ---------------------------------------------------------------------------
# keyframes
# ---------------------------------------------------------------------------


def select_keyframes(video, n_keyframes: int) -> np.ndarray:
    """First frame of each of ``n_keyframes`` equal (floor-partitioned) temporal segments."""
    t = video.num_frames if isinstance(video, VideoTensor) else int(video)
    if n_keyframes < 1:
        raise ValueError("n_keyframes must be >= 1")
    if n_keyframes > t:
        raise ValueError(f"cannot pick {n_keyframes} keyframes from {t} frames")
    return (np.arange(n_keyframes) * t) // n_keyframes


def nearest_keyframe(num_frames: int, keyframes) -> np.ndarray:
    """For every frame, the ordinal of the closest keyframe (ties go to the earlier one)."""
    keyframes = np.asarray(keyframes)
    dist = np.abs(np.arange(num_frames)[:, None] - keyframes[None, :])
    return dist.argmin(axis=1)


def resize_frames(frames: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Area-resample (n, H, W, C) frames to ``size``."""
    if isinstance(size, int):
        size = (size, size)
    x = torch.as_tensor(np.ascontiguousarray(frames), dtype=torch.float64).permute(0, 3, 1, 2)
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=size, mode="area")
    return x.permute(0, 2, 3, 1).numpy()


# ---------------------------------------------------------------------------
# semantic extractor
# ---------------------------------------------------------------------------


@dataclass
class SemanticTokens:
    """Class and patch tokens of the last two extractor layers.

    cls: (2, N_t, C_c); patches: (2, N_t, N, C_c); layer 0 is the second-to-last layer.
    """

    cls: np.ndarray
    patches: np.ndarray
    keyframe_indices: np.ndarray

    def __post_init__(self):
        if self.cls.shape[-1] != self.patches.shape[-1]:
            raise ValueError("class and patch token widths differ")
        if self.cls.shape[:2] != self.patches.shape[:2]:
            raise ValueError("class and patch tokens disagree on layers/keyframes")

    @property
    def num_patches(self) -> int:
        return self.patches.shape[2]

    @property
    def width(self) -> int:
        return self.patches.shape[-1]


def _name_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def toy_projection(name: str, d_in: int, d_out: int) -> np.ndarray:
    """Fixed random matrix seeded from a hash of ``name``; scaled to unit-variance outputs."""
    rng = np.random.default_rng(_name_seed(name))
    return rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)


class ToySemanticExtractor(nn.Module):
    """Dependency-free stand-in for a ViT image encoder.

    Layer L-1 tokens are a fixed linear map of centred patch pixels; layer L applies
    ``tanh`` after a second fixed map. The class token of each layer is the mean patch token.
    """

    def __init__(self, width=32, patch_size=4, grid_side=9, channels=3, name="toy-semantic"):
        super().__init__()
        self.width = width
        self.patch_size = patch_size
        self.grid_side = grid_side
        self.channels = channels
        d_in = patch_size * patch_size * channels
        tag = f"{name}:{width}:{patch_size}:{channels}"
        self.embed = nn.Parameter(torch.from_numpy(toy_projection(tag + ":l1", d_in, width)), requires_grad=False)
        self.mix = nn.Parameter(torch.from_numpy(toy_projection(tag + ":l2", width, width)), requires_grad=False)

    @property
    def native_size(self) -> int:
        return self.grid_side * self.patch_size

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        # (n, H, W, C) -> (n, N, p*p*C), patches in row-major order
        n, h, w, c = frames.shape
        p = self.patch_size
        x = frames.reshape(n, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, (h // p) * (w // p), p * p * c)

    @torch.no_grad()
    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self.patchify(frames.to(self.embed.dtype)) - 0.5
        t1 = x @ self.embed
        t2 = torch.tanh(t1 @ self.mix)
        return torch.stack([t1, t2])  # (2, n, N, C)


class HFClipSemanticExtractor(nn.Module):
    """Adapter around a ``transformers`` CLIPVisionModel exposing its last two layers."""

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, vision_model):
        super().__init__()
        self.model = vision_model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        cfg = vision_model.config
        self.native_size = cfg.image_size
        self.patch_size = cfg.patch_size
        self.grid_side = cfg.image_size // cfg.patch_size
        self.width = cfg.hidden_size
        self.channels = cfg.num_channels

    @torch.no_grad()
    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = next(self.model.parameters()).dtype
        mean = torch.tensor(self.MEAN, dtype=dtype)
        std = torch.tensor(self.STD, dtype=dtype)
        x = ((frames.to(dtype) - mean) / std).permute(0, 3, 1, 2)
        out = self.model(pixel_values=x, output_hidden_states=True)
        hidden = torch.stack(out.hidden_states[-2:])  # (2, n, 1 + N, C)
        return hidden


def extract_semantic(extractor, frames, keyframe_indices=None) -> SemanticTokens:
    """Run a frozen extractor on keyframes already resized to its native resolution."""
    frames = np.asarray(frames)
    size = extractor.native_size
    if frames.ndim != 4 or frames.shape[1:3] != (size, size) or frames.shape[3] != extractor.channels:
        raise ValueError(
            f"extractor expects (n, {size}, {size}, {extractor.channels}) frames, got {frames.shape}"
        )
    out = extractor(torch.as_tensor(frames))
    if isinstance(extractor, HFClipSemanticExtractor):
        cls, patches = out[:, :, 0], out[:, :, 1:]
    else:
        patches = out
        cls = patches.mean(dim=2)
    if keyframe_indices is None:
        keyframe_indices = np.arange(frames.shape[0])
    return SemanticTokens(cls.double().numpy(), patches.double().numpy(), np.asarray(keyframe_indices))


def semantic_for_video(extractor, video: VideoTensor, n_keyframes: int) -> SemanticTokens:
    kf = select_keyframes(video, n_keyframes)
    frames = resize_frames(video.frames[kf], extractor.native_size)
    return extract_semantic(extractor, frames, kf)


# ---------------------------------------------------------------------------
# distortion extractor
# ---------------------------------------------------------------------------


@dataclass
class DistortionFeatures:
    features: np.ndarray  # (N, C_d)
    pattern_label: str | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("distortion features must be finite")


class ToyDistortionExtractor(nn.Module):
    """Per-fragment degradation statistics (variance, gradient, Laplacian, temporal and block
    energies, colour moments), signed-square-rooted and zero-padded to ``width``."""

    def __init__(self, width=128, fragment_size=(32, 32), block=8):
        super().__init__()
        if width < len(kernels.FRAGMENT_STAT_NAMES):
            raise ValueError(f"width must be at least {len(kernels.FRAGMENT_STAT_NAMES)}")
        self.width = width
        self.fragment_size = tuple(fragment_size)
        self.block = block

    def forward(self, fragments: np.ndarray) -> np.ndarray:
        stats = kernels.fragment_stats(fragments, self.block)
        feats = np.zeros((stats.shape[0], self.width))
        feats[:, : stats.shape[1]] = np.sign(stats) * np.sqrt(np.abs(stats))
        return feats


def extract_distortion(extractor, fg: FragmentGrid, pattern_label=None) -> DistortionFeatures:
    if (fg.grid.fragment_h, fg.grid.fragment_w) != tuple(extractor.fragment_size):
        raise ValueError(
            f"extractor expects {extractor.fragment_size} fragments, got "
            f"{(fg.grid.fragment_h, fg.grid.fragment_w)}"
        )
    return DistortionFeatures(extractor(fg.flat()), pattern_label)


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdapterSpec:
    widths: tuple = (768, 192, 768)
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"bad adapter widths {self.widths}")
        if self.residual and self.widths[0] != self.widths[-1]:
            raise ValueError("a residual adapter needs equal input and output widths")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


class Adapter(nn.Module):
    """Bottleneck MLP with GELU between layers.

    Residual adapters zero-initialise their last layer so they start as the identity.
    """

    def __init__(self, spec: AdapterSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(spec.widths[:-1], spec.widths[1:]))
        if spec.residual:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x):
        if x.shape[-1] != self.spec.in_width:
            raise ValueError(f"adapter expects width {self.spec.in_width}, got {x.shape[-1]}")
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = F.gelu(h)
        return x + h if self.spec.residual else h


def quality_adapt(adapter: Adapter, cls):
    """Q_c = f(CLS)."""
    return adapter(torch.as_tensor(cls))


def distortion_adapt(adapter: Adapter, features):
    """F_d^a = f_d(F_d), applied per fragment."""
    if isinstance(features, DistortionFeatures):
        features = features.features
    return adapter(torch.as_tensor(features))


# ---------------------------------------------------------------------------
# contrastive objective
# ---------------------------------------------------------------------------


def distortion_contrastive_loss(features, labels, temperature=0.1):
    """Supervised contrastive loss with cosine similarities; same label = positive pair.

    Each anchor contributes ``-mean_p log softmax_{a != i}(s_ia / tau)[p]`` over its positives;
    anchors without positives are skipped.
    """
    features = torch.as_tensor(features)
    labels = list(labels)
    if features.shape[0] != len(labels):
        raise ValueError("one label per feature row is required")
    codes = {lab: i for i, lab in enumerate(dict.fromkeys(labels))}
    if len(codes) < 2:
        raise UndefinedLossError("contrastive loss needs at least two distinct patterns in the batch")
    y = torch.tensor([codes[lab] for lab in labels])
    z = F.normalize(features, dim=-1, eps=1e-12)
    sim = z @ z.T / temperature
    b = sim.shape[0]
    eye = torch.eye(b, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos = (y[:, None] == y[None, :]) & ~eye
    n_pos = pos.sum(dim=1)
    has = n_pos > 0
    if not bool(has.any()):
        raise UndefinedLossError("no anchor in the batch has a positive")
    per_anchor = -(log_prob.masked_fill(~pos, 0.0).sum(dim=1)[has] / n_pos[has])
    return per_anchor.mean()


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
