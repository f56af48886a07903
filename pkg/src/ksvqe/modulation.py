"""Content-adaptive (spatial) and distortion-aware (channel) feature modulation.

All modules take backbone features ``fs`` of shape (B, S, C) and a memory of shape
(B, G, Nm, Cm). The S positions are split into G equal consecutive groups; group g
cross-attends to memory slice g. ``align`` maps each within-group position to a memory
row and is only used by the attention-free variants.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

STD_EPS = 1e-5

VARIANTS = {
    "CA": ("CA", "add"),
    "SM": ("none", "SM"),
    "CA+SM": ("CA", "SM"),
    "CA+CM": ("CA", "CM"),
    "CASA": ("CASA", "add"),
    "CM": ("none", "CM"),
    "CASA+CM": ("CASA", "CM"),
    "CASA+SM": ("CASA", "SM"),
    "concat": ("none", "concat"),
}
CAM_KIND = "CA+SM"
DAM_KIND = "CASA+CM"


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention with separate query and key/value widths.

    No positional encoding is added, so the output is invariant to the order of the memory rows.
    """

    def __init__(self, q_dim, kv_dim, width, heads):
        super().__init__()
        if width % heads:
            raise ValueError(f"attention width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.width = width
        self.q = nn.Linear(q_dim, width)
        self.k = nn.Linear(kv_dim, width)
        self.v = nn.Linear(kv_dim, width)
        self.o = nn.Linear(width, q_dim)

    def forward(self, query, memory, mask=None):
        b, sq, _ = query.shape
        sk = memory.shape[1]
        h, d = self.heads, self.width // self.heads
        q = self.q(query).reshape(b, sq, h, d).transpose(1, 2)
        k = self.k(memory).reshape(b, sk, h, d).transpose(1, 2)
        v = self.v(memory).reshape(b, sk, h, d).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(d)
        if mask is not None:
            logits = logits + mask
        out = torch.softmax(logits, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, sq, self.width))


def channel_std(x, dim):
    """Population std with epsilon inside the root, shifted so that zero variance gives exactly 0."""
    var = x.var(dim=dim, unbiased=False)
    return torch.sqrt(var + STD_EPS) - math.sqrt(STD_EPS)


class Modulator(nn.Module):
    """One of the attention/modulation compositions used by CaM, DaM and their ablations.

    Generators are initialised so that the module starts as the identity map on ``fs``.
    """

    def __init__(self, kind, width, mem_width, heads=8, attn_width=None):
        super().__init__()
        if kind not in VARIANTS:
            raise ValueError(f"unknown modulation variant {kind!r}; expected one of {sorted(VARIANTS)}")
        self.kind = kind
        self.attn_kind, self.mod_kind = VARIANTS[kind]
        self.width = width
        self.mem_width = mem_width
        attn_width = attn_width or width
        if self.attn_kind == "none":
            self.proj = nn.Linear(mem_width, width)
        else:
            self.cross = MultiHeadAttention(width, mem_width, attn_width, heads)
            if self.attn_kind == "CASA":
                self.self_attn = MultiHeadAttention(width, width, attn_width, heads)
        if self.mod_kind == "SM":
            self.scale = nn.Linear(width, 1)
            self.offset = nn.Linear(width, 1)
        elif self.mod_kind == "CM":
            self.scale = nn.Linear(width, width)
            self.offset = nn.Linear(width, width)
        elif self.mod_kind == "concat":
            self.fuse = nn.Linear(2 * width, width)
        self.reset_identity()

    @torch.no_grad()
    def reset_identity(self):
        if self.mod_kind in ("SM", "CM"):
            nn.init.zeros_(self.scale.weight)
            nn.init.ones_(self.scale.bias)
            nn.init.zeros_(self.offset.weight)
            nn.init.zeros_(self.offset.bias)
        elif self.mod_kind == "add":
            last = self.self_attn.o if self.attn_kind == "CASA" else self.cross.o
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
        elif self.mod_kind == "concat":
            self.fuse.weight.zero_()
            self.fuse.weight[:, : self.width].copy_(torch.eye(self.width))
            self.fuse.bias.zero_()

    def attend(self, fs, memory, align=None):
        """The warped memory: (B, S, C)."""
        b, s, c = fs.shape
        if c != self.width:
            raise ValueError(f"feature width {c} != modulator width {self.width}")
        if memory.shape[-1] != self.mem_width:
            raise ValueError(f"memory width {memory.shape[-1]} != expected {self.mem_width}")
        g, nm = memory.shape[1], memory.shape[2]
        if s % g:
            raise ValueError(f"{s} positions cannot be split into {g} memory groups")
        per = s // g
        if self.attn_kind == "none":
            if align is None:
                raise ValueError(f"variant {self.kind} needs a position-to-memory alignment")
            align = torch.as_tensor(align, dtype=torch.long)
            if align.numel() != per or int(align.max()) >= nm:
                raise ValueError("alignment does not match the feature/memory geometry")
            picked = memory[:, :, align]  # (B, G, per, Cm)
            return self.proj(picked.reshape(b, s, -1))
        q = fs.reshape(b * g, per, c)
        mem = memory.reshape(b * g, nm, -1)
        warped = self.cross(q, mem).reshape(b, s, c)
        if self.attn_kind == "CASA":
            warped = self.self_attn(warped, warped)
        return warped

    def forward(self, fs, memory, align=None):
        warped = self.attend(fs, memory, align)
        if self.mod_kind == "add":
            return fs + warped
        if self.mod_kind == "SM":
            return self.scale(warped) * fs + self.offset(warped)
        if self.mod_kind == "CM":
            if self.attn_kind == "none":
                stats_src = self.proj(memory.reshape(memory.shape[0], -1, memory.shape[-1]))
            else:
                stats_src = warped
            scale = self.scale(channel_std(stats_src, dim=1)).unsqueeze(1)
            offset = self.offset(stats_src.mean(dim=1)).unsqueeze(1)
            return scale * fs + offset
        return self.fuse(torch.cat([fs, warped], dim=-1))


def cam(width, mem_width, heads=8, attn_width=None) -> Modulator:
    """F_sc = l_ss(P~) F_s + l_so(P~), P~ = MHCA(F_s, P)."""
    return Modulator(CAM_KIND, width, mem_width, heads, attn_width)


def dam(width, mem_width, heads=8, attn_width=None) -> Modulator:
    """F_sd = l_ds(std(F~)) F_s + l_do(avg(F~)), F~ = MHSA(MHCA(F_s, F_d^a))."""
    return Modulator(DAM_KIND, width, mem_width, heads, attn_width)


def ablation_variant(kind, width, mem_width, heads=8, attn_width=None) -> Modulator:
    return Modulator(kind, width, mem_width, heads, attn_width)
