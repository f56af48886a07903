"""The assembled evaluator: region selection, fragment gathering, modulated backbone."""

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import qrs
from .qrs import DEFAULT_SIGMA
from .backbone import Backbone, BackboneSpec, desk_backbone, paper_backbone
from .extractors import Adapter, AdapterSpec, nearest_keyframe
from .modulation import CAM_KIND, DAM_KIND, ablation_variant


@dataclass(frozen=True)
class ModelConfig:
    qrs: bool = True
    cam: bool = True
    dam: bool = True
    cam_kind: str = CAM_KIND
    dam_kind: str = DAM_KIND
    grid_side: int = 9  # fragment grid sampled from the video when QRS is on
    target_side: int = 7  # fragments per side fed to the backbone
    fragment: tuple = (6, 6)
    num_frames: int = 8
    n_keyframes: int = 4
    semantic_width: int = 32
    distortion_width: int = 128
    quality_adapter: tuple = (32, 8, 32)
    distortion_adapter: tuple = (128, 32, 48)
    shared_quality_adapter: bool = True
    selection: str = "sliding"  # sliding | patches
    sigma: float = DEFAULT_SIGMA
    n_samples: int = 500
    mod_heads: int = 8
    backbone: BackboneSpec = field(default_factory=desk_backbone)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneSpec(**self.backbone))
        object.__setattr__(self, "fragment", tuple(self.fragment))
        object.__setattr__(self, "quality_adapter", tuple(self.quality_adapter))
        object.__setattr__(self, "distortion_adapter", tuple(self.distortion_adapter))
        if self.target_side > self.grid_side:
            raise ValueError("target side cannot exceed the sampled grid side")
        if self.selection not in ("sliding", "patches"):
            raise ValueError(f"unknown selection scheme {self.selection!r}")

    @property
    def input_side(self) -> int:
        """Grid side of the fragments handed to the model."""
        return self.grid_side if self.qrs else self.target_side

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d


def desk_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def paper_config(**overrides) -> ModelConfig:
    base = ModelConfig(
        grid_side=9,
        target_side=7,
        fragment=(32, 32),
        num_frames=32,
        n_keyframes=8,
        semantic_width=768,
        quality_adapter=(768, 192, 768),
        distortion_adapter=(128, 32, 768),
        backbone=paper_backbone(),
    )
    return replace(base, **overrides)


def token_alignment(grid, side):
    """Fragment index (row-major in the ``side`` grid) for each within-slice token position."""
    _, h, w = grid
    rows = (np.arange(h) * side) // h
    cols = (np.arange(w) * side) // w
    return torch.as_tensor((rows[:, None] * side + cols[None, :]).ravel())


def compose_batch(fragments, side):
    """(B, K, T, h, w, C) fragments in row-major order -> (B, T, side*h, side*w, C)."""
    b, k, t, h, w, c = fragments.shape
    x = fragments.reshape(b, side, side, t, h, w, c).permute(0, 3, 1, 4, 2, 5, 6)
    return x.reshape(b, t, side * h, side * w, c)


class KSVQE(nn.Module):
    """Fragment-based quality regressor with optional QRS, CaM and DaM.

    Batches are dicts of tensors:
      fragments  (B, N, T, h, w, C)   fragment grid in row-major order
      sem_cls    (B, 2, N_t, C_c)     class tokens of the last two extractor layers
      sem_patch  (B, 2, N_t, N, C_c)  patch tokens of the last two extractor layers
      dist       (B, N, C_d)          frozen distortion features
      keyframes  (N_t,)               keyframe frame indices
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        spec = config.backbone
        self.backbone = Backbone(spec)
        self.rng = np.random.default_rng(seed)
        if config.qrs:
            n_adapters = 1 if config.shared_quality_adapter else 2
            qspec = AdapterSpec(config.quality_adapter, residual=True)
            if qspec.in_width != config.semantic_width:
                raise ValueError("quality adapter input width must equal the semantic width")
            self.quality_adapters = nn.ModuleList(Adapter(qspec) for _ in range(n_adapters))
        if config.dam:
            dspec = AdapterSpec(config.distortion_adapter, residual=False)
            if dspec.in_width != config.distortion_width:
                raise ValueError("distortion adapter input width must equal the distortion width")
            self.distortion_adapter = Adapter(dspec)
        self.cam_mods = nn.ModuleDict()
        self.dam_mods = nn.ModuleDict()
        for i in spec.inject_stages:
            width = spec.stages[i].width
            if config.cam:
                self.cam_mods[str(i)] = ablation_variant(config.cam_kind, width, config.semantic_width, config.mod_heads)
            if config.dam:
                self.dam_mods[str(i)] = ablation_variant(
                    config.dam_kind, width, config.distortion_adapter[-1], config.mod_heads
                )

    # -- pieces -----------------------------------------------------------

    def quality_query(self, sem_cls):
        if self.config.shared_quality_adapter:
            return self.quality_adapters[0](sem_cls)
        return torch.stack([self.quality_adapters[i](sem_cls[:, i]) for i in range(2)], dim=1)

    def importance(self, batch):
        """Per-patch importance averaged over the two layers and all keyframes: (B, N)."""
        q = self.quality_query(batch["sem_cls"])  # (B, 2, N_t, C)
        imp = qrs.importance(q, batch["sem_patch"])  # (B, 2, N_t, N)
        return imp.mean(dim=(1, 2))

    def select(self, batch, stochastic=None):
        cfg = self.config
        b, n = batch["fragments"].shape[:2]
        k_side = cfg.target_side
        if not cfg.qrs:
            if n != k_side * k_side:
                raise ValueError(f"without QRS the model expects {k_side}x{k_side} fragments, got {n}")
            return np.broadcast_to(np.arange(n), (b, n)).copy(), None, None
        if n != cfg.grid_side**2:
            raise ValueError(f"QRS expects a {cfg.grid_side}x{cfg.grid_side} grid, got {n} fragments")
        stochastic = self.training if stochastic is None else stochastic
        sigma = cfg.sigma if stochastic else 0.0
        scores = self.importance(batch)
        if cfg.selection == "patches":
            sel = qrs.select_patches(scores, k_side * k_side, sigma, cfg.n_samples, self.rng)
            gate = qrs.straight_through_gate(sel.soft_indicator.gather(-1, torch.as_tensor(sel.hard_indices)).mean(-1))
            return sel.hard_indices, gate, sel
        imp = qrs.ImportanceMap(scores, qrs.WindowLayout(cfg.grid_side, k_side, 1))
        sel = qrs.select_region(imp, k_side, sigma, cfg.n_samples, self.rng)
        gate = qrs.straight_through_gate(sel.gate)
        return sel.hard_indices, gate, sel

    def _hooks(self, batch, idx, num_frames):
        cfg = self.config
        hooks = {}
        k_side = cfg.target_side
        idx_t = torch.as_tensor(idx)
        keyframes = np.asarray(batch["keyframes"]).reshape(-1)
        dist_mem = None
        if cfg.dam:
            fda = self.distortion_adapter(batch["dist"])  # (B, N, D)
            dist_mem = torch.gather(fda, 1, idx_t.unsqueeze(-1).expand(-1, -1, fda.shape[-1])).unsqueeze(1)
        for order, stage in enumerate(self.config.backbone.inject_stages):
            # the last injected stage reads the last extractor layer, earlier ones the layer before
            layer = 1 if order == len(self.config.backbone.inject_stages) - 1 else 0

            def hook(tokens, grid, stage=stage, layer=layer):
                t_tok = grid[0]
                align = token_alignment(grid, k_side)
                if cfg.cam:
                    patches = batch["sem_patch"][:, layer]  # (B, N_t, N, C)
                    sel = torch.gather(
                        patches, 2, idx_t[:, None, :, None].expand(-1, patches.shape[1], -1, patches.shape[-1])
                    )
                    slice_start = (np.arange(t_tok) * num_frames) // t_tok
                    kf = nearest_keyframe(num_frames, keyframes)[slice_start]
                    mem = sel[:, torch.as_tensor(kf)]  # (B, T', K, C)
                    tokens = self.cam_mods[str(stage)](tokens, mem, align)
                if cfg.dam:
                    full_align = align.repeat(t_tok)
                    tokens = self.dam_mods[str(stage)](tokens, dist_mem, full_align)
                return tokens

            if cfg.cam or cfg.dam:
                hooks[stage] = hook
        return hooks, dist_mem

    # -- forward ------------------------------------------------------------

    def forward(self, batch, stochastic=None, return_aux=False):
        frags = batch["fragments"]
        b, n, t = frags.shape[:3]
        idx, gate, sel = self.select(batch, stochastic)
        idx_t = torch.as_tensor(idx)
        gathered = frags[torch.arange(b)[:, None], idx_t]
        video = compose_batch(gathered, self.config.target_side)
        hooks, _ = self._hooks(batch, idx, t)
        score = self.backbone(video, hooks, gate)
        if not return_aux:
            return score
        aux = {"indices": idx, "selection": sel}
        if self.config.dam:
            aux["dist_embed"] = self.distortion_adapter(batch["dist"]).mean(dim=1)
        return score, aux
