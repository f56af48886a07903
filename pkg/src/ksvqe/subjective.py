"""Subjective-score cleaning: observer correlation gate, BT.500 screening, CI trimming, MOS."""

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .metrics import UndefinedCorrelationError, plcc, srocc

SCORE_MIN, SCORE_MAX, SCORE_STEP = 1.0, 5.0, 0.5
GATE_THRESHOLD = 0.7
ALPHA_NORMAL = 2.0
ALPHA_OTHER = math.sqrt(20.0)
KURTOSIS_BAND = (2.0, 4.0)
BALANCE_LIMIT = 0.3
FRACTION_LIMIT = 0.05
CI_Z = 1.96


class InsufficientOverlapError(ValueError):
    pass


class SingleRaterWarning(UserWarning):
    pass


@dataclass
class RatingMatrix:
    scores: np.ndarray  # (observers, videos); values where mask is False are ignored
    mask: np.ndarray
    observer_ids: list
    video_ids: list

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.scores.ndim != 2 or self.scores.shape != self.mask.shape:
            raise ValueError("scores and mask must be equal-shape 2-D arrays")
        o, v = self.scores.shape
        self.observer_ids = [str(x) for x in self.observer_ids]
        self.video_ids = [str(x) for x in self.video_ids]
        if len(self.observer_ids) != o or len(self.video_ids) != v:
            raise ValueError("id lists do not match the matrix shape")
        if len(set(self.observer_ids)) != o or len(set(self.video_ids)) != v:
            raise ValueError("duplicate observer or video ids")
        present = self.scores[self.mask]
        if not np.isfinite(present).all():
            raise ValueError("present scores must be finite")
        if present.size and (present.min() < SCORE_MIN or present.max() > SCORE_MAX):
            raise ValueError(f"scores must lie in [{SCORE_MIN}, {SCORE_MAX}]")
        if present.size and not np.allclose(present / SCORE_STEP, np.round(present / SCORE_STEP)):
            raise ValueError(f"scores must be multiples of {SCORE_STEP}")
        self.scores = np.where(self.mask, self.scores, 0.0)

    @classmethod
    def dense(cls, scores, observer_ids=None, video_ids=None):
        scores = np.asarray(scores, dtype=np.float64)
        o, v = scores.shape
        return cls(
            scores,
            np.ones_like(scores, dtype=bool),
            observer_ids if observer_ids is not None else [f"o{i}" for i in range(o)],
            video_ids if video_ids is not None else [f"v{j}" for j in range(v)],
        )

    @property
    def shape(self):
        return self.scores.shape

    def subset_observers(self, keep):
        keep = np.asarray(keep, dtype=bool)
        return RatingMatrix(
            self.scores[keep], self.mask[keep], [o for o, k in zip(self.observer_ids, keep) if k], list(self.video_ids)
        )

    def with_mask(self, mask):
        return RatingMatrix(self.scores, mask, list(self.observer_ids), list(self.video_ids))


def video_stats(rm: RatingMatrix):
    """Per video: count N, mean, sample std (N-1), kurtosis m4 / m2^2 (nan when undefined)."""
    n = rm.mask.sum(axis=0).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, (rm.scores * rm.mask).sum(axis=0) / n, np.nan)
        dev = np.where(rm.mask, rm.scores - mean[None, :], 0.0)
        ss = (dev**2).sum(axis=0)
        std = np.where(n > 1, np.sqrt(ss / (n - 1)), np.nan)
        m2 = ss / n
        m4 = (dev**4).sum(axis=0) / n
        kurt = np.where(m2 > 0, m4 / (m2 * m2), np.nan)
    return n, mean, std, kurt


# -- observer gate --------------------------------------------------------------


@dataclass
class GateResult:
    observer_ids: list
    srocc: np.ndarray
    plcc: np.ndarray
    flagged: np.ndarray
    threshold: float

    def to_dict(self):
        return {
            oid: {"srocc": float(s), "plcc": float(p), "flagged": bool(f)}
            for oid, s, p, f in zip(self.observer_ids, self.srocc, self.plcc, self.flagged)
        }


def leave_one_out_means(rm: RatingMatrix):
    """(observers, videos) matrix of the mean of all *other* observers; nan where nobody else rated."""
    tot = (rm.scores * rm.mask).sum(axis=0)
    cnt = rm.mask.sum(axis=0)
    other_tot = tot[None, :] - rm.scores * rm.mask
    other_cnt = cnt[None, :] - rm.mask
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(other_cnt > 0, other_tot / other_cnt, np.nan)


def observer_gate(rm: RatingMatrix, threshold: float = GATE_THRESHOLD) -> GateResult:
    """Correlate each observer with the mean of the others; flag when SROCC or PLCC < threshold.

    An observer whose correlation is undefined (constant ratings over the overlap) is flagged
    with correlation 0.
    """
    o = rm.shape[0]
    if o < 3:
        raise ValueError("the observer gate needs at least 3 observers")
    loo = leave_one_out_means(rm)
    s_out = np.zeros(o)
    p_out = np.zeros(o)
    for i in range(o):
        common = rm.mask[i] & np.isfinite(loo[i])
        if common.sum() < 2:
            raise InsufficientOverlapError(f"observer {rm.observer_ids[i]} shares fewer than 2 videos with the others")
        a, b = rm.scores[i, common], loo[i, common]
        try:
            s_out[i] = srocc(a, b)
            p_out[i] = plcc(a, b)
        except UndefinedCorrelationError:
            s_out[i] = p_out[i] = 0.0
    flagged = (s_out < threshold) | (p_out < threshold)
    return GateResult(list(rm.observer_ids), s_out, p_out, flagged, threshold)


# -- BT.500 screening -------------------------------------------------------------


@dataclass
class ScreeningReport:
    observer_ids: list
    p: np.ndarray
    q: np.ndarray
    j: np.ndarray
    rejected: np.ndarray
    alpha: np.ndarray  # per video
    kurtosis: np.ndarray  # per video
    skipped_videos: list = field(default_factory=list)
    strict: bool = False

    @property
    def balance(self):
        tot = self.p + self.q
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, np.abs(self.p - self.q) / np.maximum(tot, 1), np.nan)

    @property
    def fraction(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.j > 0, (self.p + self.q) / np.maximum(self.j, 1), 0.0)

    def reason(self, i):
        if not self.rejected[i]:
            return ""
        return f"balance {self.balance[i]:.3f} < {BALANCE_LIMIT} and fraction {self.fraction[i]:.3f} > {FRACTION_LIMIT}"

    def to_dict(self):
        obs = {}
        for i, oid in enumerate(self.observer_ids):
            bal = self.balance[i]
            obs[oid] = {
                "P": int(self.p[i]),
                "Q": int(self.q[i]),
                "J": int(self.j[i]),
                "balance": None if np.isnan(bal) else float(bal),
                "fraction": float(self.fraction[i]),
                "rejected": bool(self.rejected[i]),
                "reason": self.reason(i),
            }
        return {"strict": self.strict, "observers": obs, "skipped_videos": list(self.skipped_videos)}


def alpha_for(kurt):
    """2 for normal-like rating distributions (kurtosis in [2, 4]), sqrt(20) otherwise."""
    kurt = np.asarray(kurt, dtype=np.float64)
    lo, hi = KURTOSIS_BAND
    normal = (kurt >= lo) & (kurt <= hi)  # nan compares False
    return np.where(normal, ALPHA_NORMAL, ALPHA_OTHER)


def bt500_screen(rm: RatingMatrix, strict: bool = False, backend=None) -> ScreeningReport:
    """Count ratings beyond mean +/- alpha*S per observer and reject erratic observers.

    The default reads the lower bound as ``mean - alpha*S`` and skips videos whose statistics
    are undefined (one rater) or degenerate (zero spread). ``strict`` transcribes the source
    procedure literally: the lower test also uses ``mean + alpha*S`` and only single-rater
    videos are skipped.
    """
    n, mean, std, kurt = video_stats(rm)
    alpha = alpha_for(kurt)
    single = n < 2
    skipped = [rm.video_ids[j] for j in np.flatnonzero(single)]
    if skipped:
        warnings.warn(f"{len(skipped)} video(s) with a single rater skipped", SingleRaterWarning, stacklevel=2)
    valid = ~single
    if not strict:
        valid &= std > 0
    p, q = kernels.bt500_counts(
        rm.scores, rm.mask, np.nan_to_num(mean), np.nan_to_num(std), alpha, valid, strict=strict, backend=backend
    )
    j = (rm.mask & ~single[None, :]).sum(axis=1)
    tot = p + q
    with np.errstate(invalid="ignore", divide="ignore"):
        bal = np.where(tot > 0, np.abs(p - q) / np.maximum(tot, 1), np.inf)
        frac = np.where(j > 0, tot / np.maximum(j, 1), 0.0)
    rejected = (bal < BALANCE_LIMIT) & (frac > FRACTION_LIMIT)
    return ScreeningReport(list(rm.observer_ids), p, q, j, rejected, alpha, kurt, skipped, strict)


# -- confidence-interval trimming -------------------------------------------------------


@dataclass
class TrimLog:
    removed: list  # (observer_id, video_id, score, lower, upper)

    def to_rows(self):
        return [
            {"observer_id": o, "video_id": v, "score": s, "lower": lo, "upper": hi} for o, v, s, lo, hi in self.removed
        ]


def ci_trim(rm: RatingMatrix):
    """Drop ratings outside the open interval mean +/- 1.96 S / sqrt(N), one pass per video.

    Videos with zero spread keep all ratings; videos with fewer than 2 ratings are untouched.
    """
    n, mean, std, _ = video_stats(rm)
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = CI_Z * std / np.sqrt(n)
    lo, hi = mean - delta, mean + delta
    active = (n >= 2) & (std > 0)
    inside = (rm.scores > lo[None, :]) & (rm.scores < hi[None, :])
    drop = rm.mask & active[None, :] & ~inside
    removed = [
        (rm.observer_ids[i], rm.video_ids[j], float(rm.scores[i, j]), float(lo[j]), float(hi[j]))
        for i, j in zip(*np.nonzero(drop))
    ]
    return rm.with_mask(rm.mask & ~drop), TrimLog(removed)


def compute_mos(rm: RatingMatrix):
    """Mean of surviving ratings per video; nan marks an unscorable video (returned in a list)."""
    n = rm.mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mos = np.where(n > 0, (rm.scores * rm.mask).sum(axis=0) / np.maximum(n, 1), np.nan)
    unscorable = [rm.video_ids[j] for j in np.flatnonzero(n == 0)]
    return mos, unscorable


# -- full pipeline ---------------------------------------------------------------


@dataclass
class CleaningResult:
    gate: GateResult | None
    screening: ScreeningReport
    trimmed: RatingMatrix
    trim_log: TrimLog
    mos: np.ndarray
    unscorable: list
    dropped_observers: list

    def report(self):
        return {
            "gate": None if self.gate is None else {"threshold": self.gate.threshold, "observers": self.gate.to_dict()},
            "screening": self.screening.to_dict(),
            "dropped_observers": list(self.dropped_observers),
            "removed_ratings": len(self.trim_log.removed),
            "unscorable_videos": list(self.unscorable),
        }


def clean(rm: RatingMatrix, strict: bool = False, gate_threshold=GATE_THRESHOLD, drop_gated: bool = True):
    """Gate, screen, trim, average, in that order.

    Observers flagged by the gate cannot be retrained here, so by default they are dropped
    before screening. Observers rejected by screening are always dropped before trimming.
    """
    gate = observer_gate(rm, gate_threshold) if rm.shape[0] >= 3 else None
    dropped = []
    work = rm
    if gate is not None and drop_gated and gate.flagged.any():
        dropped += [o for o, f in zip(rm.observer_ids, gate.flagged) if f]
        work = work.subset_observers(~gate.flagged)
    screening = bt500_screen(work, strict=strict)
    if screening.rejected.any():
        dropped += [o for o, r in zip(work.observer_ids, screening.rejected) if r]
        work = work.subset_observers(~screening.rejected)
    trimmed, log = ci_trim(work)
    mos, unscorable = compute_mos(trimmed)
    return CleaningResult(gate, screening, trimmed, log, mos, unscorable, dropped)


# -- CSV I/O ---------------------------------------------------------------------


@dataclass
class CsvParse:
    matrix: RatingMatrix | None
    n_rows: int
    errors: list  # (line number, message)


def read_ratings_csv(path) -> CsvParse:
    """Parse ``observer_id,video_id,score`` rows; malformed rows are collected, not fatal."""
    rows, errors = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return CsvParse(None, 0, [])
        if [h.strip() for h in header] != ["observer_id", "video_id", "score"]:
            errors.append((1, "expected header observer_id,video_id,score"))
            return CsvParse(None, 0, errors)
        seen = set()
        n = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            n += 1
            if len(row) != 3:
                errors.append((lineno, f"expected 3 fields, got {len(row)}"))
                continue
            o, v, s = (c.strip() for c in row)
            try:
                val = float(s)
            except ValueError:
                errors.append((lineno, f"score {s!r} is not a number"))
                continue
            if not (SCORE_MIN <= val <= SCORE_MAX) or abs(val / SCORE_STEP - round(val / SCORE_STEP)) > 1e-9:
                errors.append((lineno, f"score {val} outside [1, 5] or off the 0.5 grid"))
                continue
            if (o, v) in seen:
                errors.append((lineno, f"duplicate rating for ({o}, {v})"))
                continue
            seen.add((o, v))
            rows.append((o, v, val))
    if not rows:
        return CsvParse(None, n, errors)
    obs = sorted({r[0] for r in rows})
    vids = sorted({r[1] for r in rows})
    oi = {o: i for i, o in enumerate(obs)}
    vi = {v: j for j, v in enumerate(vids)}
    scores = np.zeros((len(obs), len(vids)))
    mask = np.zeros_like(scores, dtype=bool)
    for o, v, val in rows:
        scores[oi[o], vi[v]] = val
        mask[oi[o], vi[v]] = True
    return CsvParse(RatingMatrix(scores, mask, obs, vids), n, errors)


def write_ratings_csv(path, rm: RatingMatrix):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observer_id", "video_id", "score"])
        for i, j in zip(*np.nonzero(rm.mask)):
            w.writerow([rm.observer_ids[i], rm.video_ids[j], f"{rm.scores[i, j]:g}"])


def write_mos_csv(path, video_ids, mos):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "mos"])
        for v, m in zip(video_ids, mos):
            w.writerow([v, "" if np.isnan(m) else f"{m:.6f}"])
