"""Score fusion: ensemble mean over patches, cross-matcher sum, decision contingency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, OutOfRangeScore, WrongArity
from .evaluation import ScoreRecord, compute_roc, tar_at_far

N_PATCHES = 5
PRIMARY_SCALE = 100.0
EXTERNAL_RANGE = (0.0, 100.0)


def _check_range(x: float, lo: float, hi: float, what: str) -> float:
    x = float(x)
    if not (lo <= x <= hi):
        raise OutOfRangeScore(f"{what} score {x} outside [{lo}, {hi}]")
    return x


def ensemble_mean(scores) -> float:
    """Arithmetic mean of the five patch scores (whole, q1..q4)."""
    scores = [float(s) for s in scores]
    if len(scores) != N_PATCHES:
        raise WrongArity(f"expected {N_PATCHES} patch scores, got {len(scores)}")
    for s in scores:
        _check_range(s, 0.0, 1.0, "patch")
    # sorted summation keeps the result independent of input order
    return min(1.0, max(0.0, float(np.sum(sorted(scores))) / N_PATCHES))


@dataclass(frozen=True)
class EnsembleScore:
    per_patch: tuple[float, ...]
    fused: float

    @classmethod
    def of(cls, per_patch) -> "EnsembleScore":
        per_patch = tuple(float(s) for s in per_patch)
        return cls(per_patch, ensemble_mean(per_patch))


def sum_fuse(s_primary: float, s_external: float) -> float:
    """100 * primary ([0, 1]) + external ([0, 100]) -> [0, 200]."""
    p = _check_range(s_primary, 0.0, 1.0, "primary")
    e = _check_range(s_external, *EXTERNAL_RANGE, "external")
    return PRIMARY_SCALE * p + e


@dataclass(frozen=True)
class ContingencyTable:
    both_match: int
    a_only: int
    b_only: int
    neither: int

    @property
    def total(self) -> int:
        return self.both_match + self.a_only + self.b_only + self.neither

    def as_dict(self) -> dict:
        return {
            "both_match": self.both_match,
            "a_only": self.a_only,
            "b_only": self.b_only,
            "neither": self.neither,
            "total": self.total,
        }


def contingency(decisions_a, decisions_b) -> ContingencyTable:
    a = np.asarray(list(decisions_a), dtype=bool)
    b = np.asarray(list(decisions_b), dtype=bool)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.size} vs {b.size} decisions")
    return ContingencyTable(
        int(np.sum(a & b)),
        int(np.sum(a & ~b)),
        int(np.sum(~a & b)),
        int(np.sum(~a & ~b)),
    )


def align_score_sets(primary, external) -> list[tuple[ScoreRecord, ScoreRecord]]:
    """Pair records of two matchers by (probe_id, gallery_id); the pair sets must agree."""
    if len(primary) != len(external):
        raise LengthMismatch(f"{len(primary)} vs {len(external)} comparisons")
    index = {(r.probe_id, r.gallery_id): r for r in external}
    if len(index) != len(external):
        raise LengthMismatch("duplicate comparisons in external score set")
    out = []
    for r in primary:
        other = index.get((r.probe_id, r.gallery_id))
        if other is None:
            raise LengthMismatch(f"comparison {r.probe_id}/{r.gallery_id} missing from external scores")
        if other.genuine != r.genuine:
            raise LengthMismatch(f"genuine flag differs for {r.probe_id}/{r.gallery_id}")
        out.append((r, other))
    return out


def fuse_records(primary, external, far_target: float = 0.001) -> tuple[list[ScoreRecord], dict]:
    """Sum-fuse two score sets and tabulate decision agreement at each matcher's own FAR point."""
    pairs = align_score_sets(primary, external)
    fused = [
        ScoreRecord(p.probe_id, p.gallery_id, sum_fuse(p.score, e.score), p.genuine)
        for p, e in pairs
    ]
    _, thr_a = tar_at_far(compute_roc([p for p, _ in pairs]), far_target)
    _, thr_b = tar_at_far(compute_roc([e for _, e in pairs]), far_target)
    info = {"threshold_primary": thr_a, "threshold_external": thr_b}
    for label, want in (("genuine", True), ("impostor", False)):
        sub = [(p, e) for p, e in pairs if p.genuine == want]
        table = contingency([p.score >= thr_a for p, _ in sub], [e.score >= thr_b for _, e in sub])
        info.update({f"contingency_{label}.{k}": v for k, v in table.as_dict().items()})
    return fused, info
