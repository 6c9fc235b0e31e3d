"""Core data types: subjects, gap records, panel datasets, and fit results.

A panel is a collection of subjects, each observed at irregular visit times
starting with a mandatory baseline visit at t = 0 and administratively
censored at a subject-specific time C.  Gap records are the renewal-scale
representation of the visit process: the waiting times between consecutive
visits, plus one final censored gap running from the last visit to C.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PANEL_CSV_COLUMNS = ("subject_id", "z", "censoring_time", "visit_time", "y")

MODEL_LABELS = ("A", "B", "C", "D", "E")


def _readonly(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Subject:
    """One study individual: treatment arm, censoring time, visits and outcomes.

    ``visit_times`` must be strictly increasing, start at exactly 0.0 (the
    baseline observation every individual has), and stay strictly below the
    censoring time.  ``true_u``/``true_v`` carry the simulated random effects
    for bookkeeping; they play no role in estimation.
    """

    id: int
    z: int
    censoring_time: float
    visit_times: np.ndarray
    outcomes: np.ndarray
    true_u: float | None = None
    true_v: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "visit_times", _readonly(self.visit_times))
        object.__setattr__(self, "outcomes", _readonly(self.outcomes))
        t, y = self.visit_times, self.outcomes
        if self.z not in (0, 1):
            raise ValidationError(f"subject {self.id}: treatment z must be 0 or 1, got {self.z}")
        if not np.isfinite(self.censoring_time) or self.censoring_time <= 0:
            raise ValidationError(f"subject {self.id}: censoring time must be a positive real")
        if t.ndim != 1 or y.ndim != 1 or len(t) != len(y):
            raise ValidationError(f"subject {self.id}: visit_times and outcomes must be 1-d and equal length")
        if len(t) == 0:
            raise ValidationError(f"subject {self.id}: needs at least the baseline visit")
        if t[0] != 0.0:
            raise ValidationError(f"subject {self.id}: first visit must be at t = 0, got {t[0]}")
        if np.any(np.diff(t) <= 0):
            raise ValidationError(f"subject {self.id}: visit times must be strictly increasing")
        if t[-1] >= self.censoring_time:
            raise ValidationError(
                f"subject {self.id}: visit at t = {t[-1]} is not before censoring time {self.censoring_time}"
            )
        if not np.all(np.isfinite(y)):
            raise ValidationError(f"subject {self.id}: outcomes must be finite")

    @property
    def n_visits(self) -> int:
        return len(self.visit_times)


@dataclass(frozen=True)
class GapRecord:
    """One waiting time of the visit process on the renewal scale.

    ``index`` counts gaps within a subject starting at 1.  ``observed`` is
    True for gaps ending in a visit and False for the single final gap per
    subject that runs from the last visit to the censoring time.
    """

    subject_id: int
    index: int
    gap: float
    observed: bool
    covariates: tuple[float, ...]

    def __post_init__(self):
        if self.index < 1:
            raise ValidationError(f"subject {self.subject_id}: gap index must be >= 1")
        if not np.isfinite(self.gap) or self.gap <= 0:
            raise ValidationError(f"subject {self.subject_id}: gap {self.index} must be a positive real")


@dataclass(frozen=True)
class PanelDataset:
    """A full panel: subjects plus their derived gap records."""

    subjects: tuple[Subject, ...]
    gap_records: tuple[GapRecord, ...]
    scenario_tag: str = ""

    def __post_init__(self):
        if len(self.subjects) == 0:
            raise ValidationError("panel must contain at least one subject")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_rows(self) -> int:
        return sum(s.n_visits for s in self.subjects)


def build_panel(subjects, scenario_tag: str = "") -> PanelDataset:
    """Assemble a panel, deriving gap records from visit and censoring times.

    Each subject contributes one observed gap per post-baseline visit
    (successive differences of visit times) and exactly one censored gap
    from the last visit to the censoring time.  Deterministic and
    order-preserving in the subjects.
    """
    subjects = tuple(subjects)
    records = []
    for s in subjects:
        cov = (float(s.z),)
        times = s.visit_times
        gaps = np.diff(times)
        j = 0
        for j, g in enumerate(gaps, start=1):
            records.append(GapRecord(s.id, j, float(g), True, cov))
        records.append(GapRecord(s.id, j + 1, float(s.censoring_time - times[-1]), False, cov))
    return PanelDataset(subjects, tuple(records), scenario_tag)


def panel_row_arrays(panel: PanelDataset):
    """Stack a panel into flat per-row arrays used by the fitting routines.

    Returns a dict with ``y``, ``t``, ``z`` (one entry per visit row),
    ``subject_ids``, ``counts`` (visits per subject) and ``starts`` (row
    offset of each subject's block).
    """
    counts = np.array([s.n_visits for s in panel.subjects], dtype=np.intp)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    y = np.concatenate([s.outcomes for s in panel.subjects])
    t = np.concatenate([s.visit_times for s in panel.subjects])
    z = np.repeat([float(s.z) for s in panel.subjects], counts)
    subject_ids = np.array([s.id for s in panel.subjects], dtype=np.intp)
    return {"y": y, "t": t, "z": z, "subject_ids": subject_ids, "counts": counts, "starts": starts}


def write_atomic(path, data: str) -> None:
    """Write text to ``path`` via a temp file and rename, so readers never see partial output."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_panel_csv(panel: PanelDataset, path) -> None:
    """Serialize a panel in long format with columns subject_id,z,censoring_time,visit_time,y."""
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PANEL_CSV_COLUMNS)
    for s in panel.subjects:
        for t, y in zip(s.visit_times, s.outcomes):
            w.writerow([s.id, s.z, repr(float(s.censoring_time)), repr(float(t)), repr(float(y))])
    write_atomic(path, buf.getvalue())


def read_panel_csv(path, scenario_tag: str = "") -> PanelDataset:
    """Read a long-format panel CSV back into a PanelDataset (gap records rebuilt)."""
    by_subject: dict[int, dict] = {}
    order: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PANEL_CSV_COLUMNS:
            raise ValidationError(f"{path}: expected header {','.join(PANEL_CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValidationError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                sid = int(row[0])
                z = int(row[1])
                c = float(row[2])
                t = float(row[3])
                y = float(row[4])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            rec = by_subject.get(sid)
            if rec is None:
                rec = {"z": z, "c": c, "t": [], "y": []}
                by_subject[sid] = rec
                order.append(sid)
            elif rec["z"] != z or rec["c"] != c:
                raise ValidationError(f"{path}:{lineno}: subject {sid} has inconsistent z or censoring_time")
            rec["t"].append(t)
            rec["y"].append(y)
    if not by_subject:
        raise ValidationError(f"{path}: no data rows")
    subjects = [Subject(sid, by_subject[sid]["z"], by_subject[sid]["c"], by_subject[sid]["t"], by_subject[sid]["y"])
                for sid in order]
    return build_panel(subjects, scenario_tag)


@dataclass(frozen=True)
class FitResult:
    """Estimates, standard errors and bookkeeping for one fitted model (A-E)."""

    model_label: str
    param_names: tuple[str, ...]
    estimates: np.ndarray
    std_errors: np.ndarray
    loglik: float | None
    converged: bool
    iterations: int
    message: str = ""

    def __post_init__(self):
        if self.model_label not in MODEL_LABELS:
            raise ValidationError(f"unknown model label {self.model_label!r}")
        object.__setattr__(self, "estimates", _readonly(self.estimates))
        object.__setattr__(self, "std_errors", _readonly(self.std_errors))
        if not (len(self.param_names) == len(self.estimates) == len(self.std_errors)):
            raise ValidationError("param_names, estimates and std_errors must have equal length")
        if self.converged and np.any(self.std_errors < 0):
            raise ValidationError("converged fit reported a negative standard error")

    def estimate(self, name: str) -> float:
        return float(self.estimates[self.param_names.index(name)])

    def se(self, name: str) -> float:
        return float(self.std_errors[self.param_names.index(name)])

    def to_json_dict(self) -> dict:
        params = {
            name: {"est": float(est), "se": float(se)}
            for name, est, se in zip(self.param_names, self.estimates, self.std_errors)
        }
        return {
            "model": self.model_label,
            "params": params,
            "loglik": None if self.loglik is None else float(self.loglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    def write_json(self, path) -> None:
        write_atomic(path, json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def from_json_dict(cls, data: dict) -> "FitResult":
        names = tuple(data["params"].keys())
        est = [data["params"][n]["est"] for n in names]
        se = [data["params"][n]["se"] for n in names]
        return cls(
            model_label=data["model"],
            param_names=names,
            estimates=np.array(est, dtype=float),
            std_errors=np.array(se, dtype=float),
            loglik=data.get("loglik"),
            converged=bool(data["converged"]),
            iterations=int(data.get("iterations", 0)),
        )
