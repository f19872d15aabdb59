"""Verification protocol: pairing, ROC, TAR@FAR, EER and report files.

Convention: a comparison is a match when score >= threshold, for genuine
and impostor scores alike.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyManifest, MissingClass, ParseError, ReportIoError
from .manifest import ManifestRow

IMPOSTOR_CAP = 1_000_000
SCORE_HEADER = ("probe_id", "gallery_id", "genuine", "score")
AGE_GROUPS = ((6, 12), (12, 24), (24, 48))


@dataclass(frozen=True)
class ScoreRecord:
    probe_id: str
    gallery_id: str
    score: float
    genuine: bool
    subject_a: str = ""
    subject_b: str = ""

    def __post_init__(self):
        if self.subject_a and self.subject_b:
            same = self.subject_a == self.subject_b and self.probe_id != self.gallery_id
            if same != self.genuine:
                raise ValueError(f"genuine flag inconsistent for {self.probe_id}/{self.gallery_id}")


@dataclass(frozen=True)
class Pair:
    probe: ManifestRow
    gallery: ManifestRow
    genuine: bool


def generate_pairs(rows, policy: str = "first-capture", cap: int = IMPOSTOR_CAP, seed: int = 0) -> list[Pair]:
    """Genuine pairs are every within-subject capture pair; impostors depend on ``policy``.

    ``first-capture`` pairs the first capture of every two subjects, ``all``
    pairs every cross-subject capture. If the impostor set exceeds ``cap`` a
    seeded uniform subset of that size is kept, in enumeration order.
    """
    rows = list(rows)
    if not rows:
        raise EmptyManifest("manifest is empty")
    by_subject: dict[str, list[ManifestRow]] = {}
    for r in rows:
        by_subject.setdefault(r.subject_id, []).append(r)
    subjects = sorted(by_subject)
    if len(subjects) < 2:
        raise EmptyManifest("need at least two subjects")
    for s in subjects:
        by_subject[s].sort(key=lambda r: r.capture_id)

    genuine = [
        Pair(caps[i], caps[j], True)
        for s in subjects
        for caps in [by_subject[s]]
        for i in range(len(caps))
        for j in range(i + 1, len(caps))
    ]

    if policy == "first-capture":
        firsts = [by_subject[s][0] for s in subjects]
        ii, jj = np.triu_indices(len(firsts), 1)
        total = len(ii)

        def impostor(k):
            return Pair(firsts[ii[k]], firsts[jj[k]], False)

    elif policy == "all":
        flat = [(s, r) for s in subjects for r in by_subject[s]]
        cross = [(a, b) for ia, (sa, a) in enumerate(flat) for sb, b in flat[ia + 1 :] if sa != sb]
        total = len(cross)

        def impostor(k):
            return Pair(cross[k][0], cross[k][1], False)

    else:
        raise ValueError(f"unknown impostor policy {policy!r}")

    if total > cap:
        idx = np.sort(np.random.default_rng(seed).choice(total, size=cap, replace=False))
    else:
        idx = range(total)
    return genuine + [impostor(int(k)) for k in idx]


@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray
    n_genuine: int = 0
    n_impostor: int = 0


def _split(records) -> tuple[np.ndarray, np.ndarray]:
    g = np.array([r.score for r in records if r.genuine], dtype=np.float64)
    i = np.array([r.score for r in records if not r.genuine], dtype=np.float64)
    return g, i


def roc_from_scores(genuine: np.ndarray, impostor: np.ndarray) -> RocCurve:
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    if genuine.size == 0 or impostor.size == 0:
        raise MissingClass("need at least one genuine and one impostor score")
    t = np.unique(np.concatenate([genuine, impostor]))
    tar = (genuine.size - np.searchsorted(genuine, t, side="left")) / genuine.size
    far = (impostor.size - np.searchsorted(impostor, t, side="left")) / impostor.size
    return RocCurve(t, far, tar, int(genuine.size), int(impostor.size))


def compute_roc(records) -> RocCurve:
    return roc_from_scores(*_split(records))


def tar_at_far(roc: RocCurve, far_target: float) -> tuple[float, float]:
    """TAR at the smallest impostor-calibrated threshold whose FAR <= far_target.

    Operating thresholds sit on impostor scores (where FAR steps down), plus
    the lowest observed score above every impostor for FAR = 0. Returns
    (0.0, inf) when no operating threshold meets the target.
    """
    if not 0.0 < far_target < 1.0:
        raise ValueError("far_target must lie in (0, 1)")
    far = roc.far
    nxt = np.append(far[1:], 0.0)
    operating = far > nxt
    above = np.flatnonzero(far == 0.0)
    if above.size:
        operating = operating.copy()
        operating[above[0]] = True
    ok = np.flatnonzero(operating & (far <= far_target))
    if ok.size == 0:
        return 0.0, math.inf
    k = ok[0]
    return float(roc.tar[k]), float(roc.thresholds[k])


def eer(roc: RocCurve) -> float:
    """FAR = FRR crossing, linearly interpolated between neighbouring thresholds."""
    far = np.concatenate([[1.0], roc.far, [0.0]])
    frr = np.concatenate([[0.0], 1.0 - roc.tar, [1.0]])
    d = far - frr
    k = int(np.flatnonzero(d <= 0)[0])
    if d[k] == 0:
        return float(far[k])
    a = d[k - 1] / (d[k - 1] - d[k])
    return float(far[k - 1] + a * (far[k] - far[k - 1]))


# ----------------------------------------------------------------- reports

def format_float(x: float) -> str:
    return repr(float(x))


def scores_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_HEADER)
    for r in records:
        w.writerow([r.probe_id, r.gallery_id, int(bool(r.genuine)), format_float(r.score)])
    return buf.getvalue()


def write_scores(records, path) -> None:
    Path(path).write_text(scores_csv(records), encoding="utf-8", newline="")


def read_scores(path) -> list[ScoreRecord]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read score file {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != SCORE_HEADER:
        raise ParseError(f"{path}: header must be {','.join(SCORE_HEADER)}")
    out = []
    for n, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            probe, gallery, genuine, score = row
            flag = genuine.strip().lower()
            if flag not in ("0", "1", "true", "false"):
                raise ValueError(f"genuine flag {genuine!r}")
            value = float(score)
            if not math.isfinite(value):
                raise ValueError("non-finite score")
        except ValueError as exc:
            raise ParseError(f"{path}:{n}: {exc}") from exc
        out.append(ScoreRecord(probe, gallery, value, flag in ("1", "true")))
    return out


def roc_csv(roc: RocCurve) -> str:
    lines = ["threshold,far,tar"]
    lines += [f"{format_float(t)},{format_float(f)},{format_float(a)}" for t, f, a in zip(roc.thresholds, roc.far, roc.tar)]
    return "\n".join(lines) + "\n"


def histogram_csv(records, bins: int = 100) -> str:
    g, i = _split(records)
    allv = np.concatenate([g, i])
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hg, _ = np.histogram(g, bins=edges)
    hi_, _ = np.histogram(i, bins=edges)
    lines = ["bin_low,bin_high,genuine,impostor"]
    lines += [f"{format_float(edges[k])},{format_float(edges[k + 1])},{hg[k]},{hi_[k]}" for k in range(bins)]
    return "\n".join(lines) + "\n"


def summarize(records) -> dict:
    roc = compute_roc(records)
    t1, th1 = tar_at_far(roc, 0.001)
    t2, th2 = tar_at_far(roc, 0.01)
    return {
        "n_genuine": roc.n_genuine,
        "n_impostor": roc.n_impostor,
        "tar_at_far_0.1%": t1,
        "threshold_at_far_0.1%": th1,
        "tar_at_far_1%": t2,
        "threshold_at_far_1%": th2,
        "eer": eer(roc),
    }


def summary_text(summary: dict) -> str:
    lines = []
    for k, v in summary.items():
        if isinstance(v, float):
            v = format_float(v)
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


def age_group_label(lo: int, hi: int) -> str:
    return f"{lo}-{hi}mo"


def age_breakdown(records, age_of) -> dict:
    """Per age-group TAR/EER; ``age_of`` maps a capture id to months or None."""
    out = {}
    for k, (lo, hi) in enumerate(AGE_GROUPS):
        last = k == len(AGE_GROUPS) - 1

        def inside(cid):
            a = age_of(cid)
            return a is not None and lo <= a and (a <= hi if last else a < hi)

        subset = [r for r in records if inside(r.probe_id) and inside(r.gallery_id)]
        g = sum(r.genuine for r in subset)
        if g == 0 or g == len(subset):
            continue
        s = summarize(subset)
        label = age_group_label(lo, hi)
        for key in ("n_genuine", "n_impostor", "tar_at_far_0.1%", "tar_at_far_1%", "eer"):
            out[f"age_{label}.{key}"] = s[key]
    return out


def export_report(records, out_dir, extra: dict | None = None) -> dict:
    """Write scores.csv, roc.csv, histogram.csv and summary.txt; returns the summary."""
    records = list(records)
    if not records:
        raise MissingClass("no score records to report")
    roc = compute_roc(records)
    summary = summarize(records)
    if extra:
        summary.update(extra)
    files = {
        "scores.csv": scores_csv(records),
        "roc.csv": roc_csv(roc),
        "histogram.csv": histogram_csv(records),
        "summary.txt": summary_text(summary),
    }
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise ReportIoError(f"cannot write report to {out}: {exc}") from exc
    return summary
