"""Compact 3D shifted-window transformer regressor with per-stage modulation hooks."""

from dataclasses import asdict, dataclass, field
from functools import reduce
from operator import mul

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class StageSpec:
    depth: int
    width: int
    window: tuple = (2, 7, 7)
    heads: int = 4
    merge: tuple = (1, 1, 1)  # token merge factor applied before the stage


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple
    patch: tuple = (2, 6, 6)
    in_channels: int = 3
    mlp_ratio: float = 4.0
    head_hidden: int = 64
    inject_stages: tuple = None  # default: last two stages
    zero_head: bool = False

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "patch", tuple(self.patch))
        if not stages:
            raise ValueError("a backbone needs at least one stage")
        if self.inject_stages is None:
            object.__setattr__(self, "inject_stages", tuple(range(max(0, len(stages) - 2), len(stages))))
        else:
            object.__setattr__(self, "inject_stages", tuple(self.inject_stages))
        for i in self.inject_stages:
            if not 0 <= i < len(stages):
                raise ValueError(f"injection stage {i} does not exist")

    @property
    def out_width(self) -> int:
        return self.stages[-1].width

    def token_grid(self, t, h, w, upto=None):
        """Token grid (T', H', W') after patch embedding and merges up to stage ``upto`` (inclusive)."""
        pt, ph, pw = self.patch
        if t % pt or h % ph or w % pw:
            raise ValueError(f"input {t}x{h}x{w} is not divisible by patch {self.patch}")
        g = [t // pt, h // ph, w // pw]
        last = len(self.stages) - 1 if upto is None else upto
        for s in self.stages[: last + 1]:
            for d in range(3):
                if g[d] % s.merge[d]:
                    raise ValueError(f"token grid {g} is not divisible by merge {s.merge}")
                g[d] //= s.merge[d]
        return tuple(g)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d


def desk_backbone(width=32, out_width=48) -> BackboneSpec:
    return BackboneSpec(
        stages=(
            StageSpec(depth=1, width=width, window=(2, 7, 7), heads=4),
            StageSpec(depth=1, width=out_width, window=(2, 7, 7), heads=4),
        ),
        patch=(2, 6, 6),
        head_hidden=64,
    )


def paper_backbone() -> BackboneSpec:
    """Swin-T-like layout ending at width 768 (depths 2-2-6-2, widths 96-192-384-768)."""
    return BackboneSpec(
        stages=(
            StageSpec(2, 96, (8, 7, 7), 3),
            StageSpec(2, 192, (8, 7, 7), 6, (1, 2, 2)),
            StageSpec(6, 384, (8, 7, 7), 12, (1, 2, 2)),
            StageSpec(2, 768, (8, 7, 7), 24, (1, 2, 2)),
        ),
        patch=(2, 4, 4),
        head_hidden=128,
    )


def _window_and_shift(grid, window, shift):
    win = tuple(min(g, w) for g, w in zip(grid, window))
    sh = tuple(0 if g <= w else s for g, w, s in zip(grid, window, shift))
    return win, sh


def window_partition(x, win):
    b, t, h, w, c = x.shape
    x = x.reshape(b, t // win[0], win[0], h // win[1], win[1], w // win[2], win[2], c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, reduce(mul, win), c)


def window_reverse(windows, win, b, t, h, w):
    x = windows.reshape(b, t // win[0], h // win[1], w // win[2], win[0], win[1], win[2], -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, t, h, w, -1)


def shifted_window_mask(grid, win, shift, dtype=torch.float32):
    """Additive attention mask keeping cyclically shifted windows from mixing distant regions."""
    t, h, w = grid
    label = torch.zeros((1, t, h, w, 1))
    cnt = 0
    for ts in (slice(-win[0]), slice(-win[0], -shift[0]), slice(-shift[0], None)):
        for hs in (slice(-win[1]), slice(-win[1], -shift[1]), slice(-shift[1], None)):
            for ws in (slice(-win[2]), slice(-win[2], -shift[2]), slice(-shift[2], None)):
                label[:, ts, hs, ws, :] = cnt
                cnt += 1
    lw = window_partition(label, win).squeeze(-1)
    diff = lw.unsqueeze(1) - lw.unsqueeze(2)
    return torch.zeros(diff.shape, dtype=dtype).masked_fill(diff != 0, -100.0)


class WindowAttention3D(nn.Module):
    def __init__(self, width, window, heads):
        super().__init__()
        self.window = window
        self.heads = heads
        self.scale = (width // heads) ** -0.5
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        n_rel = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
        self.rel_bias = nn.Parameter(torch.zeros(n_rel, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

    def rel_index(self, win):
        coords = torch.stack(torch.meshgrid(*[torch.arange(w) for w in win], indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
        wt, wh, ww = self.window
        rel = rel + torch.tensor([wt - 1, wh - 1, ww - 1])
        return rel[..., 0] * (2 * wh - 1) * (2 * ww - 1) + rel[..., 1] * (2 * ww - 1) + rel[..., 2]

    def forward(self, x, win, mask=None):
        bw, n, c = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(bw, n, 3, h, c // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index(win).reshape(-1)].reshape(n, n, h).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(bw // nw, nw, h, n, n) + mask.to(attn.dtype)[None, :, None]
            attn = attn.reshape(bw, h, n, n)
        out = torch.softmax(attn, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(bw, n, c))


class SwinBlock3D(nn.Module):
    def __init__(self, width, window, heads, shifted, mlp_ratio=4.0):
        super().__init__()
        self.window = tuple(window)
        self.shift = tuple(w // 2 for w in window) if shifted else (0, 0, 0)
        self.norm1 = nn.LayerNorm(width)
        self.attn = WindowAttention3D(width, self.window, heads)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x):
        b, t, h, w, c = x.shape
        win, shift = _window_and_shift((t, h, w), self.window, self.shift)
        if any(g % s for g, s in zip((t, h, w), win)):
            raise ValueError(f"window {win} does not divide token grid {(t, h, w)}")
        y = self.norm1(x)
        mask = None
        if any(shift):
            y = torch.roll(y, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
            mask = shifted_window_mask((t, h, w), win, shift)
        y = window_reverse(self.attn(window_partition(y, win), win, mask), win, b, t, h, w)
        if any(shift):
            y = torch.roll(y, shifts=shift, dims=(1, 2, 3))
        x = x + y
        return x + self.mlp(self.norm2(x))


class Stage(nn.Module):
    def __init__(self, spec: StageSpec, in_width, mlp_ratio):
        super().__init__()
        self.spec = spec
        self.merge = tuple(spec.merge)
        merged = in_width * reduce(mul, self.merge)
        self.reduce = nn.Linear(merged, spec.width) if (merged != spec.width or any(m > 1 for m in self.merge)) else None
        self.blocks = nn.ModuleList(
            SwinBlock3D(spec.width, spec.window, spec.heads, shifted=bool(i % 2), mlp_ratio=mlp_ratio)
            for i in range(spec.depth)
        )

    def forward(self, x):
        if any(m > 1 for m in self.merge):
            b, t, h, w, c = x.shape
            mt, mh, mw = self.merge
            x = x.reshape(b, t // mt, mt, h // mh, mh, w // mw, mw, c).permute(0, 1, 3, 5, 2, 4, 6, 7)
            x = x.reshape(b, t // mt, h // mh, w // mw, -1)
        if self.reduce is not None:
            x = self.reduce(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class QualityHead(nn.Module):
    def __init__(self, width, hidden, zero_init=False):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        if zero_init:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, tokens):
        pooled = self.norm(tokens.mean(dim=1))
        return self.fc2(F.gelu(self.fc1(pooled))).squeeze(-1)


class Backbone(nn.Module):
    """Patch embedding, windowed-attention stages, pooled regression head.

    ``forward`` accepts ``hooks``: a mapping from stage id to a callable
    ``hook(tokens (B, S, C), grid (T', H', W')) -> tokens`` applied after that stage.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        first = spec.stages[0].width
        self.embed = nn.Conv3d(spec.in_channels, first, kernel_size=spec.patch, stride=spec.patch)
        self.embed_norm = nn.LayerNorm(first)
        stages, prev = [], first
        for s in spec.stages:
            stages.append(Stage(s, prev, spec.mlp_ratio))
            prev = s.width
        self.stages = nn.ModuleList(stages)
        self.head = QualityHead(prev, spec.head_hidden, spec.zero_head)

    def embed_tokens(self, video):
        # video: (B, T, H, W, C) -> (B, T', H', W', C0)
        x = self.embed(video.permute(0, 4, 1, 2, 3))
        return self.embed_norm(x.permute(0, 2, 3, 4, 1))

    def forward(self, video, hooks=None, gate=None):
        x = self.embed_tokens(video)
        if gate is not None:
            x = x * gate.reshape(-1, 1, 1, 1, 1).to(x.dtype)
        hooks = hooks or {}
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in hooks:
                b, t, h, w, c = x.shape
                x = hooks[i](x.reshape(b, t * h * w, c), (t, h, w)).reshape(b, t, h, w, c)
        return self.head(x.reshape(x.shape[0], -1, x.shape[-1]))
