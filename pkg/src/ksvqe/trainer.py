"""Training loop, evaluation, checkpoints and the component ablation grid."""

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import io
from .extractors import (
    ToyDistortionExtractor,
    ToySemanticExtractor,
    UndefinedLossError,
    distortion_contrastive_loss,
    semantic_for_video,
)
from .fragments import GridSpec, partition_and_sample, temporal_sample
from .metrics import plcc, plcc_loss, rank_accuracy, srocc
from .model import KSVQE, ModelConfig, desk_config, paper_config
from .worksim import load_clip, load_manifest, read_pairs_csv

log = logging.getLogger(__name__)

DESK_LR = 5e-4
DESK_SCHEDULE = "cosine"
DESK_EVAL_SAMPLES = 4
TOY_SEMANTIC_PATCH = 4
TOY_DISTORTION_BLOCK = 4


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 10
    qrs: bool = True
    cam: bool = True
    dam: bool = True
    cam_kind: str = "CA+SM"
    dam_kind: str = "CASA+CM"
    quality_weight: float = 1.0
    contrastive_weight: float = 0.1
    temperature: float = 0.1
    contrastive_mode: str = "joint"  # joint | two_stage
    contrastive_epochs: int = 2  # stage-one epochs in two_stage mode
    seed: int = 0
    eval_seed: int = 12345
    profile: str = "desk"
    resample_fragments: bool = True
    frame_interval: int = 1
    lr_schedule: str = "constant"  # constant | cosine (per step, down to zero)
    eval_samples: int = 1  # fragment draws averaged per clip at evaluation
    model_overrides: dict = field(default_factory=dict)
    threads: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 2:
            raise ValueError("lr must be positive and batch_size >= 2")
        if self.eval_samples < 1:
            raise ValueError("eval_samples must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.contrastive_mode not in ("joint", "two_stage"):
            raise ValueError(f"unknown contrastive mode {self.contrastive_mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.profile not in ("desk", "paper"):
            raise ValueError(f"unknown profile {self.profile!r}")

    def model_config(self) -> ModelConfig:
        make = desk_config if self.profile == "desk" else paper_config
        return make(
            qrs=self.qrs, cam=self.cam, dam=self.dam, cam_kind=self.cam_kind, dam_kind=self.dam_kind,
            **self.model_overrides,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_train_config(**overrides) -> TrainConfig:
    base = {"lr": DESK_LR, "lr_schedule": DESK_SCHEDULE, "eval_samples": DESK_EVAL_SAMPLES, "profile": "desk"}
    base.update(overrides)
    return TrainConfig(**base)


# -- data ------------------------------------------------------------------------


class ClipData:
    """Clips of one corpus split with frozen semantic tokens cached per clip."""

    def __init__(self, corpus_dir, rows, model_cfg: ModelConfig):
        self.corpus_dir = Path(corpus_dir)
        self.rows = list(rows)
        self.cfg = model_cfg
        side = model_cfg.input_side
        self.grid = GridSpec(side, *model_cfg.fragment)
        self.semantic = ToySemanticExtractor(model_cfg.semantic_width, TOY_SEMANTIC_PATCH, side)
        self.distortion = ToyDistortionExtractor(model_cfg.distortion_width, model_cfg.fragment, TOY_DISTORTION_BLOCK)
        self.videos = [load_clip(self.corpus_dir, r) for r in self.rows]
        toks = [semantic_for_video(self.semantic, v, model_cfg.n_keyframes) for v in self.videos]
        self.sem_cls = torch.as_tensor(np.stack([t.cls for t in toks]), dtype=torch.float32)
        self.sem_patch = torch.as_tensor(np.stack([t.patches for t in toks]), dtype=torch.float32)
        self.keyframes = toks[0].keyframe_indices if toks else np.zeros(0, dtype=np.int64)
        self.mos = np.array([r["mos"] for r in self.rows], dtype=np.float64)
        self.labels = [r["pattern_label"] for r in self.rows]
        self.ids = [r["clip_id"] for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def sample(self, rng, interval=1):
        """Draw one fragment grid per clip: fragments (K, N, T, h, w, C) float32, dist (K, N, C_d)."""
        frags, dist = [], []
        for v in self.videos:
            v = temporal_sample(v, self.cfg.num_frames, interval, rng)
            fg = partition_and_sample(v, self.grid, rng)
            flat = fg.flat()
            frags.append(flat.astype(np.float32))
            dist.append(self.distortion(flat).astype(np.float32))
        return torch.from_numpy(np.stack(frags)), torch.from_numpy(np.stack(dist))

    def batch(self, idx, frags, dist):
        idx = np.asarray(idx)
        t = torch.as_tensor(idx)
        return {
            "fragments": frags[t],
            "sem_cls": self.sem_cls[t],
            "sem_patch": self.sem_patch[t],
            "dist": dist[t],
            "keyframes": self.keyframes,
        }


def load_split(corpus_dir, split, model_cfg):
    manifest = load_manifest(corpus_dir)
    rows = [r for r in manifest["clips"] if r["split"] == split]
    return ClipData(corpus_dir, rows, model_cfg)


def load_pairs(corpus_dir):
    p = Path(corpus_dir) / "pairs.csv"
    return read_pairs_csv(p) if p.exists() else []


# -- model construction ---------------------------------------------------------


def build_model(cfg: TrainConfig) -> KSVQE:
    torch.manual_seed(cfg.seed)
    return KSVQE(cfg.model_config(), seed=cfg.seed)


def trainable_parameters(model):
    return [p for p in model.parameters() if p.requires_grad]


def make_optimizer(params, cfg: TrainConfig):
    """Adam moments with bias correction; weight decay applied to the weights directly."""
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


# -- evaluation -----------------------------------------------------------------


@torch.no_grad()
def predict(model, data: ClipData, seed, batch_size=16, interval=1, samples=1):
    """Scores for every clip on seed-fixed fragments with the noise-free selection path,
    averaged over ``samples`` fragment draws."""
    was = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    total = np.zeros(len(data))
    for _ in range(samples):
        frags, dist = data.sample(rng, interval)
        out = []
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            out.append(model(data.batch(idx, frags, dist)).double().numpy())
        if out:
            total += np.concatenate(out)
    model.train(was)
    return total / samples


def score_report(pred, mos, ids=None, pairs=None, logistic=False) -> dict:
    rep = {"n": int(len(pred))}
    try:
        rep["srocc"] = srocc(pred, mos)
        rep["plcc"] = plcc(pred, mos, logistic_map=logistic)
    except ValueError as exc:  # constant predictions, e.g. a zero-initialised head
        rep["srocc"] = rep["plcc"] = float("nan")
        rep["note"] = str(exc)
    if pairs:
        preds = dict(zip(ids, pred))
        usable = [p for p in pairs if p.clip_a in preds and p.clip_b in preds]
        rep["rank_accuracy"] = rank_accuracy(usable, preds)
    return rep


def evaluate(model, data: ClipData, seed, pairs=None, logistic=False, interval=1, samples=1) -> dict:
    pred = predict(model, data, seed, interval=interval, samples=samples)
    rep = score_report(pred, data.mos, data.ids, pairs, logistic)
    rep["predictions"] = {cid: float(p) for cid, p in zip(data.ids, pred)}
    return rep


# -- training ----------------------------------------------------------------------


def _param_norms(model):
    return {n: float(p.detach().norm()) for n, p in model.named_parameters() if p.requires_grad}


def _contrastive_term(aux, labels, temperature):
    if "dist_embed" not in aux:
        return None
    try:
        return distortion_contrastive_loss(aux["dist_embed"], labels, temperature)
    except UndefinedLossError:
        return None  # no same-pattern pair in this batch


@dataclass
class TrainResult:
    model: KSVQE
    history: list
    final: dict
    checkpoint: Path | None
    wall_time: float


def save_checkpoint(path, model: KSVQE, cfg: TrainConfig, extra=None):
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {"train_config": cfg.to_dict(), "model_config": model.config.to_dict(), **(extra or {})}
    io.save_archive(path, tensors, header)


def load_checkpoint(path):
    tensors, header = io.load_archive(path)
    cfg = TrainConfig.from_dict(header["train_config"])
    model = build_model(cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model, cfg, header


def train(cfg: TrainConfig, corpus_dir, out_dir=None, log_every_epoch=True, train_data=None, test_data=None):
    """AdamW on (quality PLCC loss + weighted distortion-contrastive loss); evaluates on the
    test split after every epoch and reports the last-epoch model."""
    t0 = time.time()
    torch.set_num_threads(cfg.threads)
    model = build_model(cfg)
    mcfg = model.config
    train_data = train_data or load_split(corpus_dir, "train", mcfg)
    test_data = test_data or load_split(corpus_dir, "test", mcfg)
    pairs = load_pairs(corpus_dir) if corpus_dir is not None else []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")
    opt = make_optimizer(trainable_parameters(model), cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    frag_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    fixed = None
    history = []

    use_contrastive = mcfg.dam and cfg.contrastive_weight > 0
    stage_one = cfg.contrastive_epochs if (use_contrastive and cfg.contrastive_mode == "two_stage") else 0
    if stage_one:
        adapter_opt = make_optimizer(model.distortion_adapter.parameters(), cfg)
        for _ in range(stage_one):
            _, dist = train_data.sample(frag_rng, cfg.frame_interval)
            for idx in np.array_split(rng.permutation(len(train_data)), max(1, len(train_data) // cfg.batch_size)):
                emb = model.distortion_adapter(dist[torch.as_tensor(idx)]).mean(dim=1)
                try:
                    loss = distortion_contrastive_loss(emb, [train_data.labels[i] for i in idx], cfg.temperature)
                except UndefinedLossError:
                    continue
                adapter_opt.zero_grad()
                loss.backward()
                adapter_opt.step()

    joint_weight = cfg.contrastive_weight if (use_contrastive and cfg.contrastive_mode == "joint") else 0.0
    total_steps = cfg.epochs * (len(train_data) // cfg.batch_size)
    sched = None
    if cfg.lr_schedule == "cosine" and total_steps:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1.0 + math.cos(math.pi * k / total_steps)))
    model.train()
    for epoch in range(cfg.epochs):
        if cfg.resample_fragments or fixed is None:
            fixed = train_data.sample(frag_rng, cfg.frame_interval)
        frags, dist = fixed
        order = rng.permutation(len(train_data))
        n_batches = len(order) // cfg.batch_size
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = train_data.batch(idx, frags, dist)
            score, aux = model(batch, return_aux=True)
            mos = torch.as_tensor(train_data.mos[idx], dtype=score.dtype)
            loss = cfg.quality_weight * plcc_loss(score, mos)
            if joint_weight:
                c = _contrastive_term(aux, [train_data.labels[i] for i in idx], cfg.temperature)
                if c is not None:
                    loss = loss + joint_weight * c
            if not torch.isfinite(loss):
                diag = {
                    "epoch": epoch,
                    "batch": b,
                    "clips": [train_data.ids[i] for i in idx],
                    "loss": float(loss.detach()),
                    "scores": score.detach().tolist(),
                    "param_norms": _param_norms(model),
                }
                if out_dir is not None:
                    io.write_json(out_dir / "nan_dump.json", diag)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(float(loss.detach()))
        rep = evaluate(model, test_data, cfg.eval_seed, pairs, interval=cfg.frame_interval, samples=cfg.eval_samples)
        entry = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)) if losses else None,
            "test_srocc": rep["srocc"],
            "test_plcc": rep["plcc"],
        }
        history.append(entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if log_every_epoch:
            log.info("epoch %d loss %.4f srocc %.4f", entry["epoch"], entry["train_loss"] or math.nan, rep["srocc"])

    final = evaluate(model, test_data, cfg.eval_seed, pairs, interval=cfg.frame_interval, samples=cfg.eval_samples)
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "checkpoint.npz"
        save_checkpoint(ckpt, model, cfg, {"epochs_run": cfg.epochs})
    return TrainResult(model, history, final, ckpt, time.time() - t0)


# -- ablation ---------------------------------------------------------------------

TOGGLES = ("qrs", "cam", "dam")


def toggle_grid(toggles=TOGGLES):
    """Every on/off combination of ``toggles`` (2^len rows), all-off first."""
    return [dict(zip(toggles, bits)) for bits in itertools.product((False, True), repeat=len(toggles))]


def ablate(grid, cfg: TrainConfig, corpus_dir, out_dir=None) -> list:
    """Train one model per toggle combination with a shared seed and data order."""
    rows = []
    for combo in grid:
        run_cfg = replace(cfg, **combo)
        sub = None
        if out_dir is not None:
            tag = "-".join(f"{k}{int(v)}" for k, v in sorted(combo.items())) or "base"
            sub = Path(out_dir) / tag
        res = train(run_cfg, corpus_dir, sub, log_every_epoch=False)
        rows.append(
            {
                **{k: bool(getattr(run_cfg, k)) for k in TOGGLES},
                "srocc": res.final["srocc"],
                "plcc": res.final["plcc"],
                "wall_time": res.wall_time,
            }
        )
    return rows
