"""Subject records, cohorts, and the cohort manifest CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .diagnoser import Label
from .volume_io import Volume3D, read_volume


@dataclass
class SubjectRecord:
    subject_id: str
    age: float
    label: Label | None = None  # None for unlabeled (prediction-only) subjects
    is_healthy: bool = False
    volume: Volume3D | None = None
    path: str | None = None

    def __post_init__(self):
        if self.age <= 0:
            raise ValueError(f"{self.subject_id}: age must be positive, got {self.age}")
        if self.is_healthy and self.label is not Label.OTHER:
            raise ValueError(f"{self.subject_id}: is_healthy requires label 'other'")

    def load_volume(self) -> Volume3D:
        if self.volume is None:
            if self.path is None:
                raise ValueError(f"{self.subject_id}: no volume and no path to load from")
            self.volume = read_volume(self.path)
        return self.volume


@dataclass
class Cohort:
    subjects: list[SubjectRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, i):
        return self.subjects[i]

    def labeled(self) -> bool:
        return all(s.label is not None for s in self.subjects)

    def subset(self, indices) -> "Cohort":
        return Cohort(subjects=[self.subjects[i] for i in indices])


MANIFEST_FIELDS = ["subject_id", "path", "age", "label", "is_healthy"]


def write_manifest(cohort: Cohort, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for s in cohort:
            writer.writerow(
                [s.subject_id, s.path or "", repr(float(s.age)), s.label.value if s.label else "", int(s.is_healthy)]
            )


def read_manifest(path) -> Cohort:
    """Read a manifest; relative volume paths resolve against the manifest's directory."""
    base = Path(path).parent
    subjects = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        for row in reader:
            label = Label(row["label"]) if row["label"] else None
            vol_path = row["path"] or None
            if vol_path and not Path(vol_path).is_absolute():
                vol_path = str(base / vol_path)
            subjects.append(
                SubjectRecord(
                    subject_id=row["subject_id"],
                    age=float(row["age"]),
                    label=label,
                    is_healthy=row["is_healthy"].strip() in ("1", "true", "True"),
                    path=vol_path,
                )
            )
    return Cohort(subjects=subjects)
