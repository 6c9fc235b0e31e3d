"""Monte Carlo study driver: replication management, performance measures,
dataset descriptives and informativeness diagnostics.

Replications are independent by construction (one seed substream per
replication, one per subject within it), so the study can run on any number
of worker processes and still produce byte-identical output tables.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .dgm import ScenarioConfig, simulate_panel
from .domain import FitResult, PanelDataset, write_atomic
from .errors import EstimationError, ValidationError
from .iivw import fit_iivw
from .jointfit import JointFitOptions, fit_joint
from .lmm import Adjustment, LmmSpec, fit_lmm
from .survfit import fit_andersen_gill

ESTIMATES_CSV_COLUMNS = ("scenario", "rep", "model", "param", "est", "se", "converged")
PERFORMANCE_CSV_COLUMNS = ("scenario", "model", "param", "truth", "mean_est", "bias", "bias_mcse",
                           "emp_se", "mod_se", "mse", "mse_mcse", "coverage", "coverage_mcse",
                           "conv_rate")

_LMM_SPECS = {
    "B": LmmSpec(Adjustment.TOTAL_COUNT_CENTERED),
    "C": LmmSpec(Adjustment.CUMULATIVE_COUNT),
    "D": LmmSpec(Adjustment.NONE),
}

_MODEL_PARAMS = {
    "A": ("beta", "lambda", "p", "alpha0", "alpha1", "alpha2", "gamma", "sigma_u2", "sigma_v2", "sigma_e2"),
    "B": ("alpha0", "alpha1", "alpha2", "alpha3", "sigma_v2", "sigma_e2"),
    "C": ("alpha0", "alpha1", "alpha2", "alpha3", "sigma_v2", "sigma_e2"),
    "D": ("alpha0", "alpha1", "alpha2", "sigma_v2", "sigma_e2"),
    "E": ("alpha0", "alpha1", "alpha2"),
}


@dataclass(frozen=True)
class StudyConfig:
    """One simulation study: a scenario, the models to fit, and K replications."""

    scenario: ScenarioConfig
    models: tuple[str, ...] = ("A", "B", "C", "D", "E")
    replications: int = 200
    master_seed: int | None = None
    threads: int | None = None
    joint_options: JointFitOptions = field(default_factory=JointFitOptions)

    def __post_init__(self):
        if self.replications < 2:
            raise ValidationError("a study needs at least 2 replications")
        models = tuple(self.models)
        if not models:
            raise ValidationError("a study needs at least one model")
        unknown = [m for m in models if m not in _MODEL_PARAMS]
        if unknown:
            raise ValidationError(f"unknown model label(s): {unknown}")
        object.__setattr__(self, "models", models)

    @property
    def seed(self) -> int:
        return self.scenario.seed if self.master_seed is None else self.master_seed


@dataclass(frozen=True)
class EstimateRow:
    scenario: str
    rep: int
    model: str
    param: str
    est: float | None
    se: float | None
    converged: bool


class EstimatesTable:
    """Long-format (scenario, rep, model, param) -> (est, se, converged) records."""

    def __init__(self, rows):
        self.rows = list(rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ESTIMATES_CSV_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.scenario, r.rep, r.model, r.param,
                "" if r.est is None else repr(float(r.est)),
                "" if r.se is None else repr(float(r.se)),
                int(r.converged),
            ])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        write_atomic(path, self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> "EstimatesTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != ESTIMATES_CSV_COLUMNS:
                raise ValidationError(f"{path}: expected header {','.join(ESTIMATES_CSV_COLUMNS)}")
            for line in reader:
                if not line:
                    continue
                rows.append(EstimateRow(
                    scenario=line[0],
                    rep=int(line[1]),
                    model=line[2],
                    param=line[3],
                    est=float(line[4]) if line[4] else None,
                    se=float(line[5]) if line[5] else None,
                    converged=bool(int(line[6])),
                ))
        return cls(rows)


def fit_model(panel: PanelDataset, label: str, joint_options: JointFitOptions | None = None) -> FitResult:
    """Dispatch a panel to the estimator for one of the five model labels."""
    if label in _LMM_SPECS:
        return fit_lmm(panel, _LMM_SPECS[label])
    if label == "A":
        return fit_joint(panel, joint_options)
    if label == "E":
        return fit_iivw(panel)
    raise ValidationError(f"unknown model label {label!r}")


def _replication_rows(study: StudyConfig, rep: int) -> list[EstimateRow]:
    import warnings

    panel = simulate_panel(study.scenario, np.random.SeedSequence(study.seed, spawn_key=(rep,)))
    tag = study.scenario.label
    rows = []
    for label in study.models:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_model(panel, label, study.joint_options)
        except EstimationError:
            fit = None
        names = _MODEL_PARAMS[label]
        if fit is not None and fit.converged:
            for name in names:
                est, se = fit.estimate(name), fit.se(name)
                rows.append(EstimateRow(tag, rep, label, name, est, se, True))
        else:
            for name in names:
                rows.append(EstimateRow(tag, rep, label, name, None, None, False))
    return rows


def run_study(study: StudyConfig) -> EstimatesTable:
    """Simulate and fit K replications; failures are recorded, never fatal.

    Deterministic given the master seed: rows are emitted in replication
    order regardless of how the worker pool schedules them.
    """
    threads = study.threads or os.cpu_count() or 1
    reps = range(1, study.replications + 1)
    if threads == 1:
        results = [_replication_rows(study, k) for k in reps]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replication_rows, [study] * study.replications, reps,
                                    chunksize=max(1, study.replications // (8 * threads))))
    rows: list[EstimateRow] = []
    for chunk in results:
        rows.extend(chunk)
    return EstimatesTable(rows)


# --- performance measures ----------------------------------------------------


@dataclass(frozen=True)
class PerformanceRow:
    scenario: str
    model: str
    param: str
    truth: float
    mean_est: float
    bias: float
    bias_mcse: float
    emp_se: float
    mod_se: float
    mse: float
    mse_mcse: float
    coverage: float
    coverage_mcse: float
    conv_rate: float


class PerformanceTable:
    def __init__(self, rows):
        self.rows = list(rows)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def lookup(self, model: str, param: str) -> PerformanceRow:
        for r in self.rows:
            if r.model == model and r.param == param:
                return r
        raise KeyError((model, param))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PERFORMANCE_CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.scenario, r.model, r.param] +
                       [repr(float(getattr(r, f))) for f in PERFORMANCE_CSV_COLUMNS[3:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        write_atomic(path, self.to_csv_text())


def summarize(estimates: EstimatesTable, truths: dict[str, float],
              params: tuple[str, ...] | None = None) -> PerformanceTable:
    """Bias, empirical/model SE, MSE and coverage with Monte Carlo SEs.

    Computed over converged replications only.  ``params`` restricts the
    summary to a subset; by default every parameter present must have an
    entry in ``truths``.
    """
    groups: dict[tuple[str, str, str], list[EstimateRow]] = {}
    order: list[tuple[str, str, str]] = []
    for row in estimates:
        if params is not None and row.param not in params:
            continue
        key = (row.scenario, row.model, row.param)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)

    out = []
    for key in sorted(order):
        scenario, model, param = key
        rows = groups[key]
        if param not in truths:
            raise EstimationError(f"no true value supplied for parameter {param!r}")
        truth = truths[param]
        # canonical replication order so aggregation is exactly permutation-invariant
        rows = sorted(rows, key=lambda r: r.rep)
        done = [r for r in rows if r.converged and r.est is not None]
        k_all = len(rows)
        k = len(done)
        if k < 2:
            raise EstimationError(f"fewer than 2 converged replications for model {model}, parameter {param}")
        est = np.array([r.est for r in done])
        se = np.array([r.se for r in done])
        bias = float(est.mean() - truth)
        emp_se = float(est.std(ddof=1))
        sq_err = (est - truth) ** 2
        mse = float(sq_err.mean())
        covered = np.abs(est - truth) <= 1.96 * se
        coverage = float(covered.mean())
        out.append(PerformanceRow(
            scenario=scenario, model=model, param=param, truth=float(truth),
            mean_est=float(est.mean()),
            bias=bias,
            bias_mcse=emp_se / np.sqrt(k),
            emp_se=emp_se,
            mod_se=float(se.mean()),
            mse=mse,
            mse_mcse=float(sq_err.std(ddof=1) / np.sqrt(k)),
            coverage=coverage,
            coverage_mcse=float(np.sqrt(coverage * (1.0 - coverage) / k)),
            conv_rate=k / k_all,
        ))
    return PerformanceTable(out)


# --- descriptives and diagnostics --------------------------------------------


@dataclass(frozen=True)
class DatasetDescription:
    """Median and inter-quartile interval of panel characteristics across datasets."""

    scenario: str
    n_datasets: int
    rows_median: float
    rows_iqi: tuple[float, float]
    measurements_median: float
    measurements_iqi: tuple[float, float]
    gap_median: float
    gap_iqi: tuple[float, float]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "measure", "median", "q1", "q3"])
        for measure, med, iqi in [
            ("total_rows", self.rows_median, self.rows_iqi),
            ("measurements_per_subject", self.measurements_median, self.measurements_iqi),
            ("observed_gap_time", self.gap_median, self.gap_iqi),
        ]:
            w.writerow([self.scenario, measure, repr(float(med)), repr(float(iqi[0])), repr(float(iqi[1]))])
        return buf.getvalue()


def describe_datasets(scenario: ScenarioConfig, reps: int, seed: int | None = None) -> DatasetDescription:
    """Table-style descriptives over ``reps`` simulated datasets.

    Total rows are summarised across datasets; per-subject measurement counts
    and observed gap times are pooled over all datasets.
    """
    if reps < 1:
        raise ValidationError("describe_datasets needs reps >= 1")
    master = scenario.seed if seed is None else seed
    rows, counts, gaps = [], [], []
    for k in range(1, reps + 1):
        panel = simulate_panel(scenario, np.random.SeedSequence(master, spawn_key=(k,)))
        rows.append(panel.n_rows)
        counts.extend(s.n_visits for s in panel.subjects)
        gaps.extend(g.gap for g in panel.gap_records if g.observed)
    rows_q = np.percentile(rows, [25, 50, 75])
    counts_q = np.percentile(counts, [25, 50, 75])
    gaps_q = (np.percentile(gaps, [25, 50, 75]) if gaps else np.array([np.nan] * 3))
    return DatasetDescription(
        scenario=scenario.label,
        n_datasets=reps,
        rows_median=float(rows_q[1]), rows_iqi=(float(rows_q[0]), float(rows_q[2])),
        measurements_median=float(counts_q[1]), measurements_iqi=(float(counts_q[0]), float(counts_q[2])),
        gap_median=float(gaps_q[1]), gap_iqi=(float(gaps_q[0]), float(gaps_q[2])),
    )


@dataclass(frozen=True)
class InformativenessDiagnostics:
    """Association checks between the visit process and a subject covariate."""

    covariate: str
    applicable: bool
    n_gaps: int
    spearman_rho: float
    spearman_pvalue: float
    ag_hazard_ratio: float
    ag_hr_ci: tuple[float, float]
    ag_converged: bool

    def to_json_dict(self) -> dict:
        return {
            "covariate": self.covariate,
            "applicable": self.applicable,
            "n_gaps": self.n_gaps,
            "spearman_rho": self.spearman_rho,
            "spearman_pvalue": self.spearman_pvalue,
            "ag_hazard_ratio": self.ag_hazard_ratio,
            "ag_hr_ci": list(self.ag_hr_ci),
            "ag_converged": self.ag_converged,
        }


def diagnose_informativeness(panel: PanelDataset, covariate="z",
                             n_permutations: int = 999, seed: int = 0) -> InformativenessDiagnostics:
    """Spearman correlation (permutation p-value) and AG hazard ratio for a covariate.

    ``covariate`` is either ``"z"`` (the panel's treatment indicator) or a
    mapping from subject id to a numeric value.  The permutation test
    shuffles the covariate at the subject level, which respects the
    within-subject correlation of gap times.
    """
    if panel.n_subjects < 2:
        raise ValidationError("diagnostics need at least 2 subjects")
    if isinstance(covariate, str):
        if covariate != "z":
            raise ValidationError(f"unknown covariate {covariate!r}; panels carry 'z'")
        name = covariate
        values = {s.id: float(s.z) for s in panel.subjects}
    else:
        name = "custom"
        values = {s.id: float(covariate[s.id]) for s in panel.subjects}
    obs = [(g.gap, values[g.subject_id], g.subject_id) for g in panel.gap_records if g.observed]
    if not obs:
        raise EstimationError("no observed gaps")
    gaps = np.array([o[0] for o in obs])
    covs = np.array([o[1] for o in obs])
    subj = np.array([o[2] for o in obs])

    if np.all(covs == covs[0]):
        return InformativenessDiagnostics(name, False, len(gaps), float("nan"), float("nan"),
                                          float("nan"), (float("nan"), float("nan")), False)

    rho = float(scipy.stats.spearmanr(gaps, covs).statistic)
    rng = np.random.default_rng(seed)
    ids = np.array(sorted(values))
    vals = np.array([values[i] for i in ids])
    idx = np.searchsorted(ids, subj)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(vals)
        r = scipy.stats.spearmanr(gaps, perm[idx]).statistic
        if abs(r) >= abs(rho) - 1e-12:
            hits += 1
    pvalue = (hits + 1.0) / (n_permutations + 1.0)

    from .survfit import _CoxData

    recs = panel.gap_records
    data = _CoxData([g.gap for g in recs], [g.observed for g in recs],
                    [[values[g.subject_id]] for g in recs], [g.subject_id for g in recs])
    ag = fit_andersen_gill(data)
    if ag.converged:
        se = float(ag.se_robust[0])
        hr = float(np.exp(ag.eta[0]))
        ci = (float(np.exp(ag.eta[0] - 1.96 * se)), float(np.exp(ag.eta[0] + 1.96 * se)))
    else:
        hr, ci = float("nan"), (float("nan"), float("nan"))
    return InformativenessDiagnostics(name, True, len(gaps), rho, pvalue, hr, ci, ag.converged)
