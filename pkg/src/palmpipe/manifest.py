"""Dataset manifest: one CSV record per capture."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .errors import EmptyManifest, ParseError

FIELDS = ("subject_id", "capture_id", "hand_side", "age_months", "image", "keypoints")


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    capture_id: str
    hand_side: str = "right"
    age_months: int | None = None
    image: str = ""
    keypoints: str = ""


@dataclass(frozen=True)
class Manifest:
    rows: tuple[ManifestRow, ...]
    root: Path = Path(".")

    def image_path(self, row: ManifestRow) -> Path:
        return self.root / row.image

    def keypoint_path(self, row: ManifestRow) -> Path:
        return self.root / row.keypoints

    def by_capture(self) -> dict[str, ManifestRow]:
        return {r.capture_id: r for r in self.rows}

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.rows})

    def age_of(self, subject_id: str) -> int | None:
        for r in self.rows:
            if r.subject_id == subject_id:
                return r.age_months
        return None


def dumps(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([r.subject_id, r.capture_id, r.hand_side, "" if r.age_months is None else r.age_months, r.image, r.keypoints])
    return buf.getvalue()


def write_manifest(rows, path) -> None:
    Path(path).write_text(dumps(rows), encoding="utf-8", newline="")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"subject_id", "capture_id"} <= set(reader.fieldnames):
        raise ParseError("manifest needs subject_id and capture_id columns")
    rows = []
    for rec in reader:
        age = (rec.get("age_months") or "").strip()
        try:
            age_val = int(age) if age else None
        except ValueError as exc:
            raise ParseError(f"bad age_months {age!r}") from exc
        rows.append(
            ManifestRow(
                rec["subject_id"],
                rec["capture_id"],
                rec.get("hand_side") or "right",
                age_val,
                rec.get("image") or "",
                rec.get("keypoints") or "",
            )
        )
    if not rows:
        raise EmptyManifest(f"{path} lists no captures")
    return Manifest(tuple(rows), path.parent)
