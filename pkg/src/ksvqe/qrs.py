"""Quality-aware region selection: patch importance, window aggregation and perturbed Top-K."""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels

DEFAULT_SIGMA = 0.5


class DegenerateFeatureWarning(UserWarning):
    pass


def importance(q, p):
    """Cosine between the quality query ``q`` (..., C) and each patch row of ``p`` (..., N, C).

    A zero query or zero patch row scores 0 for the affected patches and emits a warning.
    """
    q = torch.as_tensor(q)
    p = torch.as_tensor(p)
    if q.shape[-1] != p.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != patch width {p.shape[-1]}")
    dots = (p * q.unsqueeze(-2)).sum(-1)
    denom = torch.linalg.vector_norm(q, dim=-1, keepdim=True) * torch.linalg.vector_norm(p, dim=-1)
    bad = denom == 0
    if bool(bad.any()):
        warnings.warn("zero-norm query or patch feature; importance set to 0", DegenerateFeatureWarning, stacklevel=2)
    return torch.where(bad, torch.zeros_like(dots), dots / torch.where(bad, torch.ones_like(denom), denom))


def fused_importance(q_layers, p_layers):
    """Mean of per-layer cosine importance; the layer axis is 0."""
    return importance(q_layers, p_layers).mean(dim=0)


@dataclass(frozen=True)
class WindowLayout:
    grid_side: int
    window_side: int
    stride: int = 1

    def __post_init__(self):
        if self.window_side < 1 or self.stride < 1:
            raise ValueError("window side and stride must be >= 1")
        if self.window_side > self.grid_side:
            raise ValueError(f"window {self.window_side} exceeds grid {self.grid_side}")

    @property
    def anchors_per_side(self) -> int:
        return (self.grid_side - self.window_side) // self.stride + 1

    @property
    def num_windows(self) -> int:
        return self.anchors_per_side**2

    def anchor(self, m: int) -> tuple[int, int]:
        r, c = divmod(int(m), self.anchors_per_side)
        return r * self.stride, c * self.stride

    def patch_indices(self, m: int) -> np.ndarray:
        r0, c0 = self.anchor(m)
        rows = np.arange(r0, r0 + self.window_side)
        cols = np.arange(c0, c0 + self.window_side)
        return (rows[:, None] * self.grid_side + cols[None, :]).ravel()

    def to_dict(self) -> dict:
        return {"grid_side": self.grid_side, "window_side": self.window_side, "stride": self.stride}


def aggregate(i_grid, layout: WindowLayout):
    """Average-pool a (..., S, S) importance grid into one score per candidate window (..., M)."""
    i_grid = torch.as_tensor(i_grid)
    s = i_grid.shape[-1]
    if i_grid.shape[-2] != s or s != layout.grid_side:
        raise ValueError(f"grid shape {tuple(i_grid.shape[-2:])} does not match layout side {layout.grid_side}")
    lead = i_grid.shape[:-2]
    pooled = F.avg_pool2d(i_grid.reshape((-1, 1, s, s)), layout.window_side, layout.stride)
    return pooled.reshape(lead + (layout.num_windows,))


@dataclass
class ImportanceMap:
    scores: torch.Tensor  # (..., N)
    layout: WindowLayout
    window_scores: torch.Tensor = None

    def __post_init__(self):
        s = self.layout.grid_side
        if self.scores.shape[-1] != s * s:
            raise ValueError(f"{self.scores.shape[-1]} scores do not fill a {s}x{s} grid")
        if self.window_scores is None:
            self.window_scores = aggregate(self.grid, self.layout)

    @property
    def grid(self):
        s = self.layout.grid_side
        return self.scores.reshape(self.scores.shape[:-1] + (s, s))


@dataclass
class SelectionResult:
    hard_indices: np.ndarray  # (..., K) sorted ascending
    soft_indicator: torch.Tensor  # (..., M)
    sigma: float
    n_samples: int
    window_index: np.ndarray | None = None  # (...,) chosen window when selecting regions
    layout: WindowLayout | None = None

    @property
    def gate(self):
        """Soft indicator of the hard choice; equals the straight-through handle for training."""
        if self.window_index is None:
            raise ValueError("gate is only defined for region selections")
        idx = torch.as_tensor(np.asarray(self.window_index)).unsqueeze(-1)
        return self.soft_indicator.gather(-1, idx).squeeze(-1)

    def to_trace(self, scores=None) -> dict:
        trace = {
            "hard_indices": np.asarray(self.hard_indices).tolist(),
            "soft_indicator": self.soft_indicator.detach().cpu().numpy().tolist(),
            "sigma": self.sigma,
            "n_samples": self.n_samples,
        }
        if self.window_index is not None:
            trace["window_index"] = np.asarray(self.window_index).tolist()
        if self.layout is not None:
            trace["layout"] = self.layout.to_dict()
        if scores is not None:
            trace["scores"] = torch.as_tensor(scores).detach().cpu().numpy().tolist()
        return trace


def hard_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest entries along the last axis, ascending; ties prefer low indices."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


class _PerturbedTopK(torch.autograd.Function):
    @staticmethod
    def forward(ctx, scores, k, sigma, noise, backend):
        flat = scores.detach().reshape(-1, scores.shape[-1]).cpu().numpy()
        ind, jac = kernels.perturbed_topk_stats(flat, noise, k, sigma, backend=backend)
        ctx.save_for_backward(torch.from_numpy(jac).to(scores.dtype))
        return torch.from_numpy(ind).to(scores.dtype).reshape(scores.shape)

    @staticmethod
    def backward(ctx, grad_out):
        (jac,) = ctx.saved_tensors
        g = grad_out.reshape(-1, 1, grad_out.shape[-1])
        grad = (g @ jac).reshape(grad_out.shape)
        return grad, None, None, None, None


def perturbed_topk(scores, k, sigma=DEFAULT_SIGMA, n_samples=500, rng=None, backend=None) -> SelectionResult:
    """Perturbed-maximum Top-K over the last axis of ``scores`` (..., M).

    hard_indices are the noise-free Top-K. soft_indicator is the Monte-Carlo mean of K-hot
    argmax indicators of ``scores + sigma * Z`` with Z ~ N(0, I); its gradient is the
    perturbed-maximum estimator ``E[(Y - E Y) Z^T] / sigma``.
    """
    scores = torch.as_tensor(scores)
    if not torch.is_floating_point(scores):
        scores = scores.double()
    m = scores.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"K={k} must lie in [1, {m}]")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    hard = hard_topk(scores.detach().cpu().numpy(), k)
    if sigma == 0:
        soft = torch.zeros_like(scores)
        soft.scatter_(-1, torch.as_tensor(hard), 1.0)
        return SelectionResult(hard, soft, 0.0, int(n_samples))
    rng = rng if rng is not None else np.random.default_rng()
    b = int(np.prod(scores.shape[:-1], dtype=np.int64))
    noise = rng.standard_normal((b, int(n_samples), m))
    soft = _PerturbedTopK.apply(scores, int(k), float(sigma), noise, backend)
    return SelectionResult(hard, soft, float(sigma), int(n_samples))


def select_region(imp, target_side, sigma=DEFAULT_SIGMA, n_samples=500, rng=None, backend=None) -> SelectionResult:
    """Pick one ``target_side`` square window of patches by perturbed Top-1 over window scores.

    ``imp`` is an ImportanceMap (its layout's window side must equal ``target_side``) or a
    raw (..., S, S) importance grid, in which case stride-1 sliding windows are used.
    """
    if not isinstance(imp, ImportanceMap):
        grid = torch.as_tensor(imp)
        s = grid.shape[-1]
        if target_side > s:
            raise ValueError(f"target side {target_side} exceeds grid side {s}")
        imp = ImportanceMap(grid.reshape(grid.shape[:-2] + (s * s,)), WindowLayout(s, target_side, 1))
    layout = imp.layout
    if target_side > layout.grid_side:
        raise ValueError(f"target side {target_side} exceeds grid side {layout.grid_side}")
    if layout.window_side != target_side:
        raise ValueError("importance map layout does not match the target side")
    res = perturbed_topk(imp.window_scores, 1, sigma, n_samples, rng, backend)
    win = res.hard_indices[..., 0]
    patches = np.stack([layout.patch_indices(m) for m in np.ravel(win)])
    patches = patches.reshape(np.shape(win) + (target_side * target_side,))
    return SelectionResult(patches, res.soft_indicator, res.sigma, res.n_samples, win, layout)


def select_tiles(imp: ImportanceMap, n_tiles, sigma=DEFAULT_SIGMA, n_samples=500, rng=None, backend=None):
    """Alternative scheme: Top-K over non-overlapping tiles (layout stride == window side).

    The union of tiles need not be contiguous or square.
    """
    layout = imp.layout
    if layout.stride != layout.window_side:
        raise ValueError("tile selection needs a non-overlapping layout")
    res = perturbed_topk(imp.window_scores, n_tiles, sigma, n_samples, rng, backend)
    tiles = np.atleast_2d(res.hard_indices)
    patches = np.stack([np.sort(np.concatenate([layout.patch_indices(m) for m in row])) for row in tiles])
    patches = patches.reshape(np.shape(res.hard_indices)[:-1] + (patches.shape[-1],))
    return SelectionResult(patches, res.soft_indicator, res.sigma, res.n_samples, None, layout)


def select_patches(scores, k, sigma=DEFAULT_SIGMA, n_samples=500, rng=None, backend=None) -> SelectionResult:
    """Top-K directly over patch scores, without aggregation."""
    return perturbed_topk(scores, k, sigma, n_samples, rng, backend)


class _StraightThroughOne(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.ones_like(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


def straight_through_gate(soft):
    """Exactly 1 in the forward pass; gradients flow to ``soft`` unchanged."""
    return _StraightThroughOne.apply(soft)
