"""Temporal sampling, grid partitioning and fragment composition."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class VideoTensor:
    """A dense ``T x H x W x C`` clip (channels last, grayscale allowed with C=1)."""

    frames: np.ndarray
    frame_interval: int = 1
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim == 3:
            self.frames = self.frames[..., None]
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be T x H x W x C, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a video needs at least one frame")

    @property
    def shape(self):
        return self.frames.shape

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class GridSpec:
    grid_side: int
    fragment_h: int
    fragment_w: int

    def __post_init__(self):
        if self.grid_side < 1 or self.fragment_h < 1 or self.fragment_w < 1:
            raise ValueError(f"invalid grid spec {self}")

    @property
    def n(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def composite_size(self) -> tuple[int, int]:
        return self.grid_side * self.fragment_h, self.grid_side * self.fragment_w


@dataclass
class FragmentGrid:
    """``fragments`` has shape (S, S, T, h, w, C); ``source_coords`` (S, S, 2) holds absolute (y, x)."""

    fragments: np.ndarray
    source_coords: np.ndarray
    grid: GridSpec
    source_id: str = ""
    patch_index: np.ndarray = field(default=None)

    def __post_init__(self):
        s = self.grid.grid_side
        if self.fragments.shape[:2] != (s, s):
            raise ValueError("fragment array does not match the grid side")
        if self.fragments.shape[3:5] != (self.grid.fragment_h, self.grid.fragment_w):
            raise ValueError("fragment array does not match the fragment size")
        if self.patch_index is None:
            self.patch_index = np.arange(s * s).reshape(s, s)

    @property
    def num_frames(self) -> int:
        return self.fragments.shape[2]

    def flat(self) -> np.ndarray:
        """Fragments as (N, T, h, w, C) in row-major grid order."""
        s = self.grid.grid_side
        return self.fragments.reshape((s * s,) + self.fragments.shape[2:])


def temporal_indices(num_available: int, num_frames: int, interval: int, rng) -> np.ndarray:
    """Frame indices for :func:`temporal_sample`; short clips wrap around."""
    if num_frames < 1 or interval < 1:
        raise ValueError("num_frames and interval must be >= 1")
    needed = num_frames * interval
    if num_available >= needed:
        start = int(rng.integers(0, num_available - needed + 1))
        return start + interval * np.arange(num_frames)
    start = int(rng.integers(0, num_available))
    return (start + interval * np.arange(num_frames)) % num_available


def temporal_sample(video: VideoTensor, num_frames: int, interval: int, rng) -> VideoTensor:
    idx = temporal_indices(video.num_frames, num_frames, interval, rng)
    return VideoTensor(video.frames[idx], video.frame_interval * interval, video.source_id)


def patch_bounds(size: int, grid_side: int) -> np.ndarray:
    """Start/stop of each patch along one axis; the last patch absorbs the remainder."""
    base = size // grid_side
    starts = base * np.arange(grid_side)
    stops = np.append(starts[1:], size)
    return np.stack([starts, stops], axis=1)


def partition_and_sample(video: VideoTensor, grid: GridSpec, rng) -> FragmentGrid:
    """Cut the frame into a ``grid_side`` square grid and crop one fragment per patch.

    The offset inside each patch is uniform over valid positions and shared by all frames.
    Offsets are drawn as two (S, S) integer arrays, rows first then columns.
    """
    t, h, w, c = video.shape
    s = grid.grid_side
    by, bx = patch_bounds(h, s), patch_bounds(w, s)
    ph = by[:, 1] - by[:, 0]
    pw = bx[:, 1] - bx[:, 0]
    if ph.min() < grid.fragment_h or pw.min() < grid.fragment_w:
        raise ValueError(
            f"patch {int(ph.min())}x{int(pw.min())} is smaller than fragment {grid.fragment_h}x{grid.fragment_w}"
        )
    high_y = np.broadcast_to((ph - grid.fragment_h + 1)[:, None], (s, s))
    high_x = np.broadcast_to((pw - grid.fragment_w + 1)[None, :], (s, s))
    oy = rng.integers(0, high_y)
    ox = rng.integers(0, high_x)
    coords = np.stack([by[:, 0][:, None] + oy, bx[:, 0][None, :] + ox], axis=-1)
    frags = np.empty((s, s, t, grid.fragment_h, grid.fragment_w, c), dtype=video.frames.dtype)
    for i in range(s):
        for j in range(s):
            y, x = coords[i, j]
            frags[i, j] = video.frames[:, y : y + grid.fragment_h, x : x + grid.fragment_w]
    return FragmentGrid(frags, coords, grid, video.source_id)


def compose(fg: FragmentGrid) -> VideoTensor:
    s = fg.grid.grid_side
    _, _, t, h, w, c = fg.fragments.shape
    out = fg.fragments.transpose(2, 0, 3, 1, 4, 5).reshape(t, s * h, s * w, c)
    return VideoTensor(out, 1, fg.source_id)


def decompose(composite: VideoTensor | np.ndarray, grid: GridSpec) -> np.ndarray:
    """Inverse of :func:`compose` on the pixel data: returns (S, S, T, h, w, C)."""
    frames = composite.frames if isinstance(composite, VideoTensor) else np.asarray(composite)
    t, hh, ww, c = frames.shape
    s, h, w = grid.grid_side, grid.fragment_h, grid.fragment_w
    if (hh, ww) != (s * h, s * w):
        raise ValueError(f"composite {hh}x{ww} does not match grid {s}x{s} of {h}x{w}")
    return frames.reshape(t, s, h, s, w, c).transpose(1, 3, 0, 2, 4, 5)


def gather_selected(fg: FragmentGrid, selection) -> FragmentGrid:
    """Keep the selected fragments, laid out on a square grid in their original row-major order.

    ``selection`` is a SelectionResult or an index array into the flattened grid.
    """
    idx = np.asarray(getattr(selection, "hard_indices", selection), dtype=np.int64).ravel()
    s = fg.grid.grid_side
    if idx.size == 0 or np.any(idx < 0) or np.any(idx >= s * s):
        raise ValueError("selection indices are out of range for this grid")
    if np.unique(idx).size != idx.size:
        raise ValueError("selection indices must be distinct")
    side = int(round(np.sqrt(idx.size)))
    if side * side != idx.size:
        raise ValueError(f"selection of {idx.size} fragments is not a square sub-grid")
    idx = np.sort(idx)
    flat = fg.flat()
    coords = fg.source_coords.reshape(s * s, 2)
    sub = GridSpec(side, fg.grid.fragment_h, fg.grid.fragment_w)
    return FragmentGrid(
        flat[idx].reshape((side, side) + flat.shape[1:]),
        coords[idx].reshape(side, side, 2),
        sub,
        fg.source_id,
        fg.patch_index.reshape(-1)[idx].reshape(side, side),
    )
