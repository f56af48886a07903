"""Synthetic processing-workflow corpus: procedural references, degradation surrogates,
analytic pseudo-MOS, and the train/test split plus ranked pairs."""

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io, kernels
from .fragments import VideoTensor, patch_bounds

QP_INTERVALS = ((16, 23), (24, 31), (32, 35), (36, 39), (40, 43), (44, 47))
TIERS = ("high", "low")
TOOLS = ("de-artifact", "denoise", "deblur")
PREPROCESS_MODES = ("global", "roi")
DEFECTS = ("artifact", "noise", "blur")
TOOL_FOR_DEFECT = {"artifact": "de-artifact", "noise": "denoise", "blur": "deblur"}


def sample_qp(interval_index: int, rng) -> int:
    """Uniform integer QP inside one of the six intervals."""
    if not 0 <= int(interval_index) < len(QP_INTERVALS):
        raise ValueError(f"QP interval index must be in [0, {len(QP_INTERVALS) - 1}], got {interval_index}")
    lo, hi = QP_INTERVALS[int(interval_index)]
    return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class WorkflowRecipe:
    quality_tier: str
    enhancement: str = "none"
    preprocess: str = "none"
    qp_interval_index: int = 0
    qp: int = 16

    def __post_init__(self):
        if self.quality_tier not in TIERS:
            raise ValueError(f"unknown tier {self.quality_tier!r}")
        if self.enhancement not in ("none",) + TOOLS:
            raise ValueError(f"unknown enhancement {self.enhancement!r}")
        if self.preprocess not in ("none",) + PREPROCESS_MODES:
            raise ValueError(f"unknown preprocessing {self.preprocess!r}")
        if self.quality_tier == "high" and (self.enhancement != "none" or self.preprocess != "none"):
            raise ValueError("high-tier clips are only transcoded")
        if not 0 <= self.qp_interval_index < len(QP_INTERVALS):
            raise ValueError("QP interval index out of range")
        lo, hi = QP_INTERVALS[self.qp_interval_index]
        if not lo <= self.qp <= hi:
            raise ValueError(f"qp {self.qp} outside interval {QP_INTERVALS[self.qp_interval_index]}")

    @property
    def pattern_label(self) -> str:
        """Applied chain in application order, e.g. ``e:denoise>p:roi>t:qp3``."""
        parts = []
        if self.enhancement != "none":
            parts.append(f"e:{self.enhancement}")
        if self.preprocess != "none":
            parts.append(f"p:{self.preprocess}")
        parts.append(f"t:qp{self.qp_interval_index}")
        return ">".join(parts)

    @property
    def group(self) -> int:
        """1 = transcode only, 2 = enhance then transcode, 3 = enhance, preprocess, transcode."""
        if self.enhancement == "none":
            return 1
        return 3 if self.preprocess != "none" else 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pattern_label"] = self.pattern_label
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "pattern_label"}
        return cls(**d)


def build_recipe(quality_tier: str, rng, qp_interval_index=None, preprocess_prob=0.5) -> WorkflowRecipe:
    """High tier: transcode only. Low tier: one enhancement tool, preprocessing with
    probability ``preprocess_prob``, then transcode."""
    if quality_tier not in TIERS:
        raise ValueError(f"unknown tier {quality_tier!r}")
    enh, pre = "none", "none"
    if quality_tier == "low":
        enh = TOOLS[int(rng.integers(len(TOOLS)))]
        if rng.random() < preprocess_prob:
            pre = PREPROCESS_MODES[int(rng.integers(len(PREPROCESS_MODES)))]
    idx = int(rng.integers(len(QP_INTERVALS))) if qp_interval_index is None else int(qp_interval_index)
    return WorkflowRecipe(quality_tier, enh, pre, idx, sample_qp(idx, rng))


# -- references ---------------------------------------------------------------------


@dataclass(frozen=True)
class RefParams:
    ref_id: str
    tier: str
    defect: str  # one of DEFECTS
    severity: float  # in [0, 1]
    texture_seed: int

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MosConfig:
    high_base: tuple = (4.8, 0.5)  # base = b0 - b1 * severity
    low_base: tuple = (3.4, 0.8)
    qp_penalty: tuple = (0.0, 0.3, 0.7, 1.1, 1.5, 1.9)
    within_interval_slope: float = 0.1
    enhance_gain: float = 0.2
    matched_recovery: float = 0.5  # fraction of the defect cost a matching tool wins back
    preprocess_bonus: tuple = (0.0, 0.05, 0.15, 0.3, 0.5, 0.8)


@dataclass(frozen=True)
class CorpusConfig:
    n_refs: int = 50
    clips_per_ref: int = 6
    size: int = 64
    num_frames: int = 8
    codec_block: int = 4
    qstep_base: float = 0.01  # quantizer step at QP 16; doubles every 6 QP
    high_fraction: float = 0.5
    preprocess_prob: float = 0.5
    test_fraction: float = 0.2
    localized: bool = False
    grid_side: int = 9  # fragment grid used to place the localized-quality window
    pair_threshold: float = 0.5
    pairs_per_class: int = 250
    seed: int = 0
    mos: MosConfig = field(default_factory=MosConfig)

    def __post_init__(self):
        if isinstance(self.mos, dict):
            mos = {k: tuple(v) if isinstance(v, list) else v for k, v in self.mos.items()}
            object.__setattr__(self, "mos", MosConfig(**mos))
        if self.n_refs < 2:
            raise ValueError("a corpus needs at least 2 references")
        if self.clips_per_ref < 1:
            raise ValueError("clips_per_ref must be >= 1")

    def to_dict(self):
        return asdict(self)


def qstep_for(qp: float, base: float) -> float:
    return base * 2.0 ** ((qp - QP_INTERVALS[0][0]) / 6.0)


def _spatial_blur(frames, sigma):
    return gaussian_filter(frames, sigma=(0, sigma, sigma, 0), mode="reflect")


def render_pristine(texture_seed: int, size: int, num_frames: int) -> np.ndarray:
    """Band-limited colour noise plus a few flat shapes, panning slowly over time: (T, H, W, 3)."""
    rng = np.random.default_rng(texture_seed)
    pad = 2 * num_frames
    side = size + pad
    white = rng.standard_normal((side, side, 3))
    fine = gaussian_filter(white, sigma=(1.0, 1.0, 0)) - gaussian_filter(white, sigma=(4.0, 4.0, 0))
    coarse = gaussian_filter(rng.standard_normal((side, side, 3)), sigma=(6.0, 6.0, 0))
    canvas = 0.5 + 0.27 * fine / (np.abs(fine).max() + 1e-12) + 0.2 * coarse / (np.abs(coarse).max() + 1e-12)
    yy, xx = np.mgrid[:side, :side]
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, side, 2)
        r = rng.uniform(side / 12, side / 5)
        colour = rng.uniform(0.1, 0.9, 3)
        if rng.random() < 0.5:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < 0.7 * r)
        canvas[inside] = 0.6 * colour + 0.4 * canvas[inside]
    vy, vx = rng.integers(0, 3, 2)
    frames = np.stack([canvas[t * vy : t * vy + size, t * vx : t * vx + size] for t in range(num_frames)])
    return np.clip(frames, 0.0, 1.0)


def impair(frames, defect: str, severity: float, seed: int, block: int, qstep_base: float):
    """Pre-existing upload degradation applied to the pristine clip."""
    if defect == "blur":
        return _spatial_blur(frames, 0.4 + 1.6 * severity)
    if defect == "noise":
        rng = np.random.default_rng(seed)
        return np.clip(frames + rng.normal(0.0, 0.01 + 0.09 * severity, frames.shape), 0.0, 1.0)
    if defect == "artifact":
        return np.clip(kernels.block_dct_quantize(frames, block, qstep_base * (4 + 28 * severity)), 0.0, 1.0)
    raise ValueError(f"unknown defect {defect!r}")


def defect_strength(tier: str, severity: float) -> float:
    """High-tier uploads carry a much milder version of their defect."""
    return severity * (0.25 if tier == "high" else 1.0)


def make_reference(params: RefParams, config: CorpusConfig) -> VideoTensor:
    frames = render_pristine(params.texture_seed, config.size, config.num_frames)
    frames = impair(
        frames,
        params.defect,
        defect_strength(params.tier, params.severity),
        params.texture_seed + 1,
        config.codec_block,
        config.qstep_base,
    )
    return VideoTensor(frames, 1, params.ref_id)


# -- processing surrogates --------------------------------------------------------------


def enhance(frames, tool: str, block: int):
    if tool == "none":
        return frames
    if tool == "denoise":
        return _spatial_blur(frames, 0.9)
    if tool == "deblur":
        return np.clip(frames + 1.2 * (frames - _spatial_blur(frames, 1.0)), 0.0, 1.0)
    if tool == "de-artifact":
        h, w = frames.shape[1:3]
        ry = np.arange(h) % block
        rx = np.arange(w) % block
        edge = ((ry == 0) | (ry == block - 1))[:, None] | ((rx == 0) | (rx == block - 1))[None, :]
        return np.where(edge[None, :, :, None], _spatial_blur(frames, 0.8), frames)
    raise ValueError(f"unknown enhancement {tool!r}")


def roi_mask(h, w):
    """Centre region (middle half of each axis) kept intact by ROI preprocessing."""
    m = np.zeros((h, w), dtype=bool)
    m[h // 4 : h - h // 4, w // 4 : w - w // 4] = True
    return m


def preprocess(frames, mode: str, attenuation=0.6):
    if mode == "none":
        return frames
    smooth = frames - attenuation * (frames - _spatial_blur(frames, 1.0))
    if mode == "global":
        return smooth
    if mode == "roi":
        keep = roi_mask(*frames.shape[1:3])
        return np.where(keep[None, :, :, None], frames, smooth)
    raise ValueError(f"unknown preprocessing {mode!r}")


def transcode(frames, qp: float, block: int, qstep_base: float, strength: float = 1.0):
    return np.clip(kernels.block_dct_quantize(frames, block, strength * qstep_for(qp, qstep_base)), 0.0, 1.0)


def apply(recipe: WorkflowRecipe, ref: VideoTensor, config: CorpusConfig = None, ref_tier=None, transcode_strength=1.0):
    """Run enhancement, preprocessing and transcoding in cascade on a reference clip.

    ``transcode_strength`` scales the quantizer step; 0 disables quantization (test hook).
    Deterministic: the surrogates draw no random numbers.
    """
    config = config or CorpusConfig()
    if ref_tier is not None and ref_tier != recipe.quality_tier:
        raise ValueError(f"recipe tier {recipe.quality_tier} does not match reference tier {ref_tier}")
    x = np.asarray(ref.frames, dtype=np.float64)
    x = enhance(x, recipe.enhancement, config.codec_block)
    x = preprocess(x, recipe.preprocess)
    x = transcode(x, recipe.qp, config.codec_block, config.qstep_base, transcode_strength)
    return VideoTensor(x, ref.frame_interval, ref.source_id)


# -- pseudo-MOS ----------------------------------------------------------------------


def base_quality(params: RefParams, mos: MosConfig) -> float:
    b0, b1 = mos.high_base if params.tier == "high" else mos.low_base
    return b0 - b1 * params.severity


def qp_penalty(recipe: WorkflowRecipe, mos: MosConfig) -> float:
    lo, hi = QP_INTERVALS[recipe.qp_interval_index]
    within = (recipe.qp - lo) / (hi - lo)
    return mos.qp_penalty[recipe.qp_interval_index] + mos.within_interval_slope * within


def enhancement_bonus(recipe: WorkflowRecipe, params: RefParams, mos: MosConfig) -> float:
    if recipe.enhancement == "none":
        return 0.0
    bonus = mos.enhance_gain
    if TOOL_FOR_DEFECT[params.defect] == recipe.enhancement:
        _, b1 = mos.high_base if params.tier == "high" else mos.low_base
        bonus += mos.matched_recovery * b1 * params.severity
    return bonus


def preprocess_bonus(recipe: WorkflowRecipe, mos: MosConfig) -> float:
    if recipe.preprocess == "none":
        return 0.0
    return mos.preprocess_bonus[recipe.qp_interval_index]


def pseudo_mos(recipe: WorkflowRecipe, params: RefParams, mos: MosConfig = None) -> float:
    """Base quality minus the QP penalty plus enhancement and preprocessing bonuses, in [1, 5]."""
    mos = mos or MosConfig()
    raw = base_quality(params, mos) - qp_penalty(recipe, mos) + enhancement_bonus(recipe, params, mos)
    raw += preprocess_bonus(recipe, mos)
    return float(np.clip(raw, 1.0, 5.0))


# -- localized-quality variant ---------------------------------------------------------


def centre_window(size: int, grid_side: int):
    """Pixel span of the grid cells strictly inside the outer ring of a ``grid_side`` grid."""
    b = patch_bounds(size, grid_side)
    return int(b[1, 0]), int(b[grid_side - 2, 1])


def distractor(frames, rng, block):
    """Random impairment independent of the clip's score."""
    kind = int(rng.integers(3))
    if kind == 0:
        return np.clip(frames + rng.normal(0.0, rng.uniform(0.03, 0.15), frames.shape), 0.0, 1.0)
    if kind == 1:
        return np.clip(kernels.block_dct_quantize(frames, block, rng.uniform(0.1, 0.6)), 0.0, 1.0)
    return _spatial_blur(frames, rng.uniform(0.8, 2.0))


def localize(degraded, pristine, rng, config: CorpusConfig):
    """Keep ``degraded`` inside the centre window; the ring shows the pristine clip plus a distractor."""
    a, b = centre_window(config.size, config.grid_side)
    ring = distractor(pristine, rng, config.codec_block)
    out = ring.copy()
    out[:, a:b, a:b] = degraded[:, a:b, a:b]
    return out


# -- corpus ----------------------------------------------------------------------


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format_version", "config", "config_hash", "clips", "splits"],
    "properties": {
        "format_version": {"const": 1},
        "config_hash": {"type": "string"},
        "config": {"type": "object"},
        "splits": {
            "type": "object",
            "required": ["train", "test"],
            "properties": {"train": {"type": "array"}, "test": {"type": "array"}},
        },
        "clips": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["clip_id", "ref_id", "split", "recipe", "pattern_label", "mos", "path", "seed", "ref"],
                "properties": {
                    "clip_id": {"type": "string"},
                    "ref_id": {"type": "string"},
                    "split": {"enum": ["train", "test"]},
                    "pattern_label": {"type": "string"},
                    "mos": {"type": "number", "minimum": 1, "maximum": 5},
                    "path": {"type": "string"},
                    "seed": {"type": "integer"},
                    "group": {"enum": [1, 2, 3]},
                    "recipe": {
                        "type": "object",
                        "required": ["quality_tier", "enhancement", "preprocess", "qp_interval_index", "qp"],
                    },
                },
            },
        },
    },
}


def split_refs(ref_ids, test_fraction, rng):
    """Shuffle reference ids and return (train, test) lists; at least one of each."""
    ids = list(ref_ids)
    order = rng.permutation(len(ids))
    n_test = min(max(1, int(round(test_fraction * len(ids)))), len(ids) - 1)
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


def plan_corpus(config: CorpusConfig):
    """Everything about the corpus except pixels: reference params, recipes, scores, split."""
    root = np.random.SeedSequence(config.seed)
    ref_ss, clip_ss, split_ss = root.spawn(3)
    rng = np.random.default_rng(ref_ss)
    n_high = int(round(config.high_fraction * config.n_refs))
    tiers = ["high"] * n_high + ["low"] * (config.n_refs - n_high)
    tiers = [tiers[i] for i in rng.permutation(config.n_refs)]
    refs = []
    for r in range(config.n_refs):
        refs.append(
            RefParams(
                ref_id=f"ref{r:03d}",
                tier=tiers[r],
                defect=DEFECTS[int(rng.integers(len(DEFECTS)))],
                severity=float(rng.uniform(0.0, 1.0)),
                texture_seed=int(rng.integers(2**31)),
            )
        )
    train, test = split_refs([p.ref_id for p in refs], config.test_fraction, np.random.default_rng(split_ss))
    test_set = set(test)
    clip_seeds = clip_ss.spawn(config.n_refs * config.clips_per_ref)
    rows = []
    for r, params in enumerate(refs):
        rrng = np.random.default_rng(clip_seeds[r * config.clips_per_ref])
        chain = build_recipe(params.tier, rrng, 0, config.preprocess_prob)
        for c in range(config.clips_per_ref):
            k = r * config.clips_per_ref + c
            crng = np.random.default_rng(clip_seeds[k])
            idx = c % len(QP_INTERVALS)
            recipe = replace(chain, qp_interval_index=idx, qp=sample_qp(idx, crng))
            clip_id = f"{params.ref_id}_c{c:02d}"
            rows.append(
                {
                    "clip_id": clip_id,
                    "ref_id": params.ref_id,
                    "split": "test" if params.ref_id in test_set else "train",
                    "recipe": recipe.to_dict(),
                    "pattern_label": recipe.pattern_label,
                    "group": recipe.group,
                    "mos": pseudo_mos(recipe, params, config.mos),
                    "path": f"clips/{clip_id}",
                    "seed": int(clip_seeds[k].generate_state(1)[0]),
                    "ref": params.to_dict(),
                    "localized": bool(config.localized),
                }
            )
    return refs, rows, {"train": train, "test": test}


def render_clip(row, config: CorpusConfig, ref_cache=None) -> np.ndarray:
    params = RefParams(**row["ref"])
    ref = None if ref_cache is None else ref_cache.get(params.ref_id)
    if ref is None:
        ref = make_reference(params, config)
        if ref_cache is not None:
            ref_cache[params.ref_id] = ref
    recipe = WorkflowRecipe.from_dict(row["recipe"])
    out = apply(recipe, ref, config, params.tier).frames
    if config.localized:
        pristine = render_pristine(params.texture_seed, config.size, config.num_frames)
        out = localize(out, pristine, np.random.default_rng(row["seed"]), config)
    return out


def rank_pairs(rows, config: CorpusConfig, rng):
    """Near-score pairs among test clips.

    Homogeneous: same reference, adjacent QP intervals, score gap below the threshold.
    Non-homogeneous: different references, score gap below the threshold, no exact ties.
    """
    test = [r for r in rows if r["split"] == "test"]
    homo, hetero = [], []
    for i, a in enumerate(test):
        for b in test[i + 1 :]:
            gap = abs(a["mos"] - b["mos"])
            if gap == 0 or gap >= config.pair_threshold:
                continue
            if a["ref_id"] == b["ref_id"]:
                if abs(a["recipe"]["qp_interval_index"] - b["recipe"]["qp_interval_index"]) == 1:
                    homo.append((a, b))
            else:
                hetero.append((a, b))

    def pick(cands):
        if len(cands) > config.pairs_per_class:
            keep = np.sort(rng.choice(len(cands), config.pairs_per_class, replace=False))
            cands = [cands[i] for i in keep]
        return cands

    out = []
    for flag, cands in ((True, pick(homo)), (False, pick(hetero))):
        for a, b in cands:
            out.append(
                {
                    "clip_a": a["clip_id"],
                    "clip_b": b["clip_id"],
                    "preferred": "a" if a["mos"] > b["mos"] else "b",
                    "homogeneous": flag,
                }
            )
    return out


def write_pairs_csv(path, pairs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_a", "clip_b", "preferred", "homogeneous"])
        for p in pairs:
            w.writerow([p["clip_a"], p["clip_b"], p["preferred"], int(p["homogeneous"])])


def read_pairs_csv(path):
    from .metrics import RankPair

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RankPair(r["clip_a"], r["clip_b"], r["preferred"], bool(int(r["homogeneous"]))) for r in rows]


def generate_corpus(config: CorpusConfig, out_dir) -> dict:
    """Render every clip (uint8 raw tensors), then write manifest.json and pairs.csv."""
    out_dir = Path(out_dir)
    refs, rows, splits = plan_corpus(config)
    cache = {}
    for row in rows:
        if row["ref_id"] not in cache:
            cache.clear()  # rows are grouped by reference
        frames = render_clip(row, config, cache)
        q = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
        io.save_tensor(out_dir / row["path"], q, clip_id=row["clip_id"], seed=row["seed"], scale=255)
    pair_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    pairs = rank_pairs(rows, config, pair_rng)
    write_pairs_csv(out_dir / "pairs.csv", pairs)
    manifest = {
        "format_version": 1,
        "config": config.to_dict(),
        "config_hash": io.config_hash(config.to_dict()),
        "splits": splits,
        "clips": rows,
        "pairs": "pairs.csv",
    }
    io.write_json(out_dir / "manifest.json", manifest)
    return manifest


def load_clip(corpus_dir, row) -> VideoTensor:
    arr, header = io.load_tensor(Path(corpus_dir) / row["path"])
    return VideoTensor(arr.astype(np.float64) / float(header.get("scale", 255)), 1, row["clip_id"])


def load_manifest(corpus_dir) -> dict:
    m = io.read_json(Path(corpus_dir) / "manifest.json")
    if m.get("format_version") != 1:
        raise ValueError("unsupported manifest version")
    return m


def group_trend(rows):
    """Mean score per (group, QP interval): {group: [mean per interval or None]}."""
    out = {}
    for g in (1, 2, 3):
        means = []
        for i in range(len(QP_INTERVALS)):
            vals = [r["mos"] for r in rows if r["group"] == g and r["recipe"]["qp_interval_index"] == i]
            means.append(float(np.mean(vals)) if vals else None)
        out[g] = means
    return out
