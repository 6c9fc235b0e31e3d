"""Random-intercept linear mixed models fitted by maximum likelihood.

Covers model D (outcome on intercept, treatment, time), model B (adds the
subject's total visit count centred on the dataset mean) and model C (adds
the running count of visits up to and including the current one).  The
marginal covariance per subject is sigma_v2 * J + sigma_e2 * I; likelihood,
gradient and information all use the rank-one Woodbury identities, so the
cost is linear in the number of rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .domain import FitResult, PanelDataset, panel_row_arrays
from .errors import EstimationError

LOG_2PI = float(np.log(2.0 * np.pi))


class Adjustment(enum.Enum):
    """Observation-process adjustment used in the fixed-effects design."""

    NONE = "none"                            # model D
    TOTAL_COUNT_CENTERED = "total_count"     # model B
    CUMULATIVE_COUNT = "cumulative_count"    # model C


_MODEL_LABEL = {
    Adjustment.NONE: "D",
    Adjustment.TOTAL_COUNT_CENTERED: "B",
    Adjustment.CUMULATIVE_COUNT: "C",
}


@dataclass(frozen=True)
class LmmSpec:
    adjustment: Adjustment = Adjustment.NONE

    @property
    def model_label(self) -> str:
        return _MODEL_LABEL[self.adjustment]

    @property
    def param_names(self) -> tuple[str, ...]:
        alphas = ["alpha0", "alpha1", "alpha2"]
        if self.adjustment is not Adjustment.NONE:
            alphas.append("alpha3")
        return tuple(alphas + ["sigma_v2", "sigma_e2"])


def design_matrix(panel: PanelDataset, spec: LmmSpec) -> np.ndarray:
    """Fixed-effects design: intercept, treatment, time, plus the count column."""
    rows = panel_row_arrays(panel)
    cols = [np.ones_like(rows["y"]), rows["z"], rows["t"]]
    if spec.adjustment is Adjustment.TOTAL_COUNT_CENTERED:
        counts = rows["counts"].astype(float)
        cols.append(np.repeat(counts - counts.mean(), rows["counts"]))
    elif spec.adjustment is Adjustment.CUMULATIVE_COUNT:
        # running 1-based count of visits with time <= current visit time
        cum = np.concatenate([np.arange(1, n + 1, dtype=float) for n in rows["counts"]])
        cols.append(cum)
    return np.column_stack(cols)


class _LmmData:
    """Flattened panel plus per-subject offsets reused across evaluations."""

    def __init__(self, panel: PanelDataset, spec: LmmSpec):
        rows = panel_row_arrays(panel)
        self.y = rows["y"]
        self.X = design_matrix(panel, spec)
        self.counts = rows["counts"].astype(float)
        self.starts = rows["starts"]
        self.n_rows = len(self.y)
        self.n_subjects = len(self.counts)

    def group_sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.starts)


def _check_design(X: np.ndarray, names) -> None:
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    r = np.abs(np.diag(np.linalg.qr(X / scale, mode="r")))
    bad = np.nonzero(r < 1e-10)[0]
    if bad.size:
        raise EstimationError(f"singular design: column {names[bad[0]]!r} is collinear")


def _loglik_parts(data: _LmmData, alpha, sigma_v2: float, sigma_e2: float):
    """Per-subject pieces of the marginal Gaussian log likelihood."""
    r = data.y - data.X @ np.asarray(alpha, dtype=float)
    s = data.group_sum(r)                     # per-subject residual sums
    q = data.group_sum(r * r)                 # per-subject residual sums of squares
    a = sigma_e2 + data.counts * sigma_v2     # eigenvalue along the ones direction
    quad = (q - sigma_v2 * s * s / a) / sigma_e2
    logdet = (data.counts - 1.0) * np.log(sigma_e2) + np.log(a)
    return r, s, a, quad, logdet


def lmm_loglik(alpha, sigma_v2: float, sigma_e2: float, panel, spec: LmmSpec | None = None) -> float:
    """Marginal log likelihood of the random-intercept model at the given parameters.

    ``panel`` may be a PanelDataset (a design is built from ``spec``) or a
    prebuilt ``_LmmData``.
    """
    if sigma_v2 <= 0 or sigma_e2 <= 0:
        raise ValueError("variance components must be > 0")
    data = panel if isinstance(panel, _LmmData) else _LmmData(panel, spec or LmmSpec())
    if len(alpha) != data.X.shape[1]:
        raise ValueError(f"alpha must have length {data.X.shape[1]}")
    _, _, _, quad, logdet = _loglik_parts(data, alpha, sigma_v2, sigma_e2)
    return float(-0.5 * (data.n_rows * LOG_2PI + np.sum(logdet) + np.sum(quad)))


def _negloglik_and_grad(theta: np.ndarray, data: _LmmData):
    """Negative log likelihood and gradient in (alpha, log sigma_v, log sigma_e)."""
    k = data.X.shape[1]
    alpha = theta[:k]
    sigma_v2 = np.exp(2.0 * theta[k])
    sigma_e2 = np.exp(2.0 * theta[k + 1])

    r, s, a, quad, logdet = _loglik_parts(data, alpha, sigma_v2, sigma_e2)
    loglik = -0.5 * (data.n_rows * LOG_2PI + np.sum(logdet) + np.sum(quad))

    # d/dalpha: X' Sigma^{-1} r, with Sigma^{-1} r = r/sigma_e2 - (sigma_v2 s / (sigma_e2 a)) 1
    w = np.repeat(sigma_v2 * s / a, data.counts.astype(np.intp))
    g_alpha = data.X.T @ ((r - w) / sigma_e2)

    # d/dsigma_v2 = 0.5 * [ (1'Sigma^{-1} r)^2 - tr(Sigma^{-1} J) ] per subject
    sv = s / a
    d_sv2 = 0.5 * np.sum(sv * sv - data.counts / a)
    # d/dsigma_e2 = 0.5 * [ r'Sigma^{-2} r - tr(Sigma^{-1}) ]
    q = data.group_sum(r * r)
    r_perp2 = q - s * s / data.counts
    quad2 = r_perp2 / sigma_e2**2 + (s * s / data.counts) / (a * a)
    tr = (data.counts - 1.0) / sigma_e2 + 1.0 / a
    d_se2 = 0.5 * np.sum(quad2 - tr)

    grad = np.concatenate([g_alpha, [2.0 * sigma_v2 * d_sv2, 2.0 * sigma_e2 * d_se2]])
    return -loglik, -grad


def _observed_information(fun_grad, theta: np.ndarray) -> np.ndarray:
    """Central finite differences of the (negative-loglik) gradient."""
    n = len(theta)
    info = np.empty((n, n))
    for j in range(n):
        h = 1e-5 * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        info[:, j] = (fun_grad(tp)[1] - fun_grad(tm)[1]) / (2.0 * h)
    return 0.5 * (info + info.T)


def _se_from_information(info: np.ndarray):
    """Standard errors from an observed information matrix, or None if not PD."""
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(cov)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        return None
    return np.sqrt(d)


def _starting_values(data: _LmmData) -> np.ndarray:
    alpha0, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    r = data.y - data.X @ alpha0
    means = data.group_sum(r) / data.counts
    within = data.group_sum(r * r) - data.counts * means**2
    dof = max(np.sum(data.counts - 1.0), 1.0)
    sigma_e2 = max(np.sum(within) / dof, 1e-4)
    sigma_v2 = max(np.var(means), 1e-4)
    return np.concatenate([alpha0, [0.5 * np.log(sigma_v2), 0.5 * np.log(sigma_e2)]])


MAX_ITER = 500
GRAD_TOL = 1e-6
PARAM_TOL = 1e-8


def _standardize(X: np.ndarray):
    """Center/scale the non-intercept columns; return (Xs, transform-to-original)."""
    k = X.shape[1]
    means = X.mean(axis=0)
    scales = X.std(axis=0)
    means[0], scales[0] = 0.0, 1.0
    scales[scales == 0] = 1.0
    Xs = (X - means) / scales

    def to_original(alpha_s: np.ndarray) -> np.ndarray:
        alpha = alpha_s / scales
        alpha[0] -= np.sum(alpha_s[1:] * means[1:] / scales[1:])
        return alpha

    return Xs, to_original, k


def _newton_polish(fun_grad, theta: np.ndarray, max_steps: int = 10):
    """Drive the gradient to ~0 from an almost-converged point; returns (theta, f, g, info)."""
    f, g = fun_grad(theta)
    info = None
    for _ in range(max_steps):
        if np.max(np.abs(g)) < GRAD_TOL:
            break
        info = _observed_information(fun_grad, theta)
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(20):
            cand = theta - scale * step
            fc, gc = fun_grad(cand)
            if fc <= f + 1e-12:
                theta, f, g = cand, fc, gc
                break
            scale *= 0.5
        else:
            break
        if np.max(np.abs(scale * step)) < PARAM_TOL:
            break
        info = None
    if info is None:
        info = _observed_information(fun_grad, theta)
    return theta, f, g, info


def fit_lmm(panel: PanelDataset, spec: LmmSpec | None = None) -> FitResult:
    """Maximum-likelihood fit of a random-intercept LMM (models B, C, D).

    Quasi-Newton on (alpha, log sigma_v, log sigma_e) with the design
    standardized internally for conditioning, followed by a Newton polish in
    the reported parameterisation.  Standard errors come from the inverse
    observed information (finite differences of the analytic gradient).
    """
    spec = spec or LmmSpec()
    if panel.n_subjects < 2:
        raise EstimationError("fit_lmm needs at least 2 subjects")
    data = _LmmData(panel, spec)
    names = spec.param_names
    _check_design(data.X, names)

    # optimize (and judge convergence) on unit-scale columns; raw count columns
    # put curvatures of ~1e9 on some axes, where no gradient norm is meaningful
    data_s = _LmmData.__new__(_LmmData)
    data_s.__dict__.update(data.__dict__)
    data_s.X, to_original, k = _standardize(data.X)

    theta0 = _starting_values(data_s)
    res = scipy.optimize.minimize(
        _negloglik_and_grad,
        theta0,
        args=(data_s,),
        jac=True,
        method="BFGS",
        options={"gtol": GRAD_TOL, "maxiter": MAX_ITER},
    )
    fun_grad_s = lambda t: _negloglik_and_grad(t, data_s)  # noqa: E731
    theta_s, fval, grad, _ = _newton_polish(fun_grad_s, res.x)
    converged = bool(np.max(np.abs(grad)) < 1e-4)

    theta = np.concatenate([to_original(theta_s[:k]), theta_s[k:]])
    sigma_v2 = float(np.exp(2.0 * theta[k]))
    sigma_e2 = float(np.exp(2.0 * theta[k + 1]))
    estimates = np.concatenate([theta[:k], [sigma_v2, sigma_e2]])

    ses = np.full(len(names), np.nan)
    if converged:
        info = _observed_information(lambda t: _negloglik_and_grad(t, data), theta)
        raw = _se_from_information(info)
        if raw is None:
            converged = False
        else:
            # delta method for the variance components: sigma^2 = exp(2 theta)
            ses = np.concatenate([raw[:k], [2.0 * sigma_v2 * raw[k], 2.0 * sigma_e2 * raw[k + 1]]])
    if not converged:
        ses = np.full(len(names), np.nan)

    return FitResult(
        model_label=spec.model_label,
        param_names=names,
        estimates=estimates,
        std_errors=ses,
        loglik=float(-fval),
        converged=converged,
        iterations=int(res.nit),
        message="" if converged else f"optimizer: {res.message}; max|grad|={np.max(np.abs(grad)):.2e}",
    )
