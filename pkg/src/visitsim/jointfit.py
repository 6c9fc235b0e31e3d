"""Maximum-likelihood joint model for visit gaps and longitudinal outcomes.

The recurrent submodel gives each gap a Weibull hazard
lam * p * t**(p-1) * exp(beta*z + u); the longitudinal submodel is
y = alpha0 + alpha1*z + alpha2*t + gamma*u + v + eps.  The subject-level
random intercept v is integrated out analytically (rank-one Gaussian
identity), so the marginal likelihood needs only a one-dimensional
Gauss-Hermite integral over the shared frailty u.  By default the rule is
recentred and rescaled at the mode of each subject's integrand (adaptive
quadrature); the raw rule placed on the prior is available as an option.

All per-subject quantities reduce to scalars, so one likelihood evaluation
costs O(total rows + subjects * quadrature order).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize

from .domain import FitResult, PanelDataset, panel_row_arrays
from .errors import EstimationError
from .lmm import LOG_2PI, Adjustment, LmmSpec, fit_lmm, lmm_loglik
from .survfit import _CoxData, fit_weibull_ph

PARAM_NAMES = ("beta", "lambda", "p", "alpha0", "alpha1", "alpha2",
               "gamma", "sigma_u2", "sigma_v2", "sigma_e2")

_MODE_TOL = 1e-11
_MODE_MAX_ITER = 80
_U_BOUND = 60.0


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for expectations against the standard normal."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        if self.order < 3:
            raise ValueError("quadrature order must be >= 3")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if np.max(np.abs(nodes + nodes[::-1])) > 1e-9:
            raise ValueError("nodes must be symmetric about 0")

    @classmethod
    def gauss_hermite(cls, order: int = 25) -> "QuadratureRule":
        x, w = np.polynomial.hermite.hermgauss(order)
        return cls(order, x * np.sqrt(2.0), w / np.sqrt(np.pi))


@dataclass(frozen=True)
class JointParams:
    """Joint-model parameters; scale parameters are carried on the log scale."""

    beta: float
    log_lambda: float
    log_p: float
    alpha0: float
    alpha1: float
    alpha2: float
    gamma: float
    log_sigma_u: float
    log_sigma_v: float
    log_sigma_e: float

    def __post_init__(self):
        for name in ("log_lambda", "log_p", "log_sigma_u", "log_sigma_v", "log_sigma_e"):
            if not np.isfinite(np.exp(getattr(self, name))):
                raise ValueError(f"exp({name}) must be positive and finite")

    @classmethod
    def from_vector(cls, theta) -> "JointParams":
        return cls(*map(float, theta))

    def to_vector(self) -> np.ndarray:
        return np.array([self.beta, self.log_lambda, self.log_p, self.alpha0, self.alpha1,
                         self.alpha2, self.gamma, self.log_sigma_u, self.log_sigma_v,
                         self.log_sigma_e])

    def natural(self) -> dict[str, float]:
        return {
            "beta": self.beta,
            "lambda": float(np.exp(self.log_lambda)),
            "p": float(np.exp(self.log_p)),
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "gamma": self.gamma,
            "sigma_u2": float(np.exp(2.0 * self.log_sigma_u)),
            "sigma_v2": float(np.exp(2.0 * self.log_sigma_v)),
            "sigma_e2": float(np.exp(2.0 * self.log_sigma_e)),
        }


class _JointData:
    """Panel flattened into the per-subject aggregates the likelihood needs."""

    def __init__(self, panel: PanelDataset):
        rows = panel_row_arrays(panel)
        self.subject_ids = rows["subject_ids"]
        self.n = rows["counts"].astype(float)          # visits per subject
        self.row_starts = rows["starts"]
        self.y = rows["y"]
        self.t = rows["t"]
        self.z = np.array([float(s.z) for s in panel.subjects])
        self.sum_t = np.add.reduceat(self.t, self.row_starts)
        self.n_subjects = len(self.n)

        gaps, observed = [], []
        for s in panel.subjects:
            g = np.diff(s.visit_times)
            gaps.append(g)
            gaps.append([s.censoring_time - s.visit_times[-1]])
            observed.append(np.ones(len(g), dtype=bool))
            observed.append([False])
        self.gaps = np.concatenate(gaps)
        self.log_gaps = np.log(self.gaps)
        self.observed = np.concatenate(observed).astype(bool)
        # each subject has exactly n_visits gaps, so row offsets double as gap offsets
        self.gap_starts = self.row_starts
        self.events = np.add.reduceat(self.observed.astype(float), self.gap_starts)
        self.sum_d_logt = np.add.reduceat(np.where(self.observed, self.log_gaps, 0.0), self.gap_starts)

    def gap_sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.gap_starts)

    def row_sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.row_starts)


def _find_modes(b, w, lam_eff):
    """Vectorized Newton for the maximizer of b*u - lam_eff*e^u - w*u^2/2 per subject."""
    u = np.zeros_like(b)
    for _ in range(_MODE_MAX_ITER):
        e = lam_eff * np.exp(u)
        g = b - e - w * u
        if np.all(np.abs(g) < _MODE_TOL * (1.0 + np.abs(b))):
            break
        step = g / (e + w)
        u = np.clip(u + np.clip(step, -2.0, 2.0), -_U_BOUND, _U_BOUND)
    return u


def _evaluate(theta: np.ndarray, data: _JointData, rule: QuadratureRule,
              adaptive: bool, want_grad: bool):
    """Log likelihood (and gradient) at ``theta`` = JointParams.to_vector() layout."""
    (beta, log_lam, log_p, a0, a1, a2, gamma, log_su, log_sv, log_se) = theta
    lam, p = np.exp(log_lam), np.exp(log_p)
    su2, sv2, se2 = np.exp(2.0 * log_su), np.exp(2.0 * log_sv), np.exp(2.0 * log_se)

    with np.errstate(over="ignore", invalid="ignore"):
        tp = data.gaps**p
        T_p = data.gap_sum(tp)
        lam_eff = lam * np.exp(beta * data.z) * T_p  # Lambda_i: cumulative hazard factor at u=0

        r0 = data.y - (a0 + a1 * np.repeat(data.z, data.n.astype(np.intp)) + a2 * data.t)
        s = data.row_sum(r0)
        q = data.row_sum(r0 * r0)
        a = se2 + data.n * sv2
        Q0 = (q - sv2 * s * s / a) / se2

        E = data.events
        b = E + gamma * s / a
        w = gamma * gamma * data.n / a + 1.0 / su2
        c = (E * (log_lam + log_p + beta * data.z) + (p - 1.0) * data.sum_d_logt
             - 0.5 * (data.n * LOG_2PI + (data.n - 1.0) * np.log(se2) + np.log(a) + Q0)
             - 0.5 * (LOG_2PI + 2.0 * log_su))

        if adaptive:
            m = _find_modes(b, w, lam_eff)
            scale = 1.0 / np.sqrt(lam_eff * np.exp(m) + w)
        else:
            m = np.zeros(data.n_subjects)
            scale = np.full(data.n_subjects, np.sqrt(su2))

        U = m[:, None] + scale[:, None] * rule.nodes[None, :]
        expU = np.exp(U)
        h = (c[:, None] + b[:, None] * U - lam_eff[:, None] * expU - 0.5 * w[:, None] * U * U)
        arg = np.log(rule.weights)[None, :] + 0.5 * rule.nodes[None, :] ** 2 + h
        amax = np.max(arg, axis=1)
        sumexp = np.sum(np.exp(arg - amax[:, None]), axis=1)
        contrib = np.log(scale) + 0.5 * LOG_2PI + amax + np.log(sumexp)
        loglik = float(np.sum(contrib))

    if not want_grad:
        return loglik, contrib, None

    with np.errstate(over="ignore", invalid="ignore"):
        pk = np.exp(arg - amax[:, None]) / sumexp[:, None]   # posterior node weights

        st = data.sum_t
        n, zi = data.n, data.z
        TPL = data.gap_sum(tp * data.log_gaps)
        lamU = lam_eff[:, None] * expU

        d_beta = zi[:, None] * (E[:, None] - lamU)
        d_loglam = E[:, None] - lamU
        d_logp = (E + p * data.sum_d_logt)[:, None] - (lam * np.exp(beta * zi) * p * TPL)[:, None] * expU

        one_r = (s[:, None] - gamma * U * n[:, None]) / a[:, None]     # 1' Sigma^-1 r
        tr0 = data.row_sum(data.t * r0)
        xr = [s, zi * s, tr0]                                           # X' r0 components
        x1 = [n, zi * n, st]                                            # X' 1 components
        d_alpha = [
            (xr_j[:, None] - gamma * U * x1_j[:, None]) / se2 - (sv2 / se2) * one_r * x1_j[:, None]
            for xr_j, x1_j in zip(xr, x1)
        ]
        d_gamma = U * one_r

        rss = q[:, None] - 2.0 * gamma * U * s[:, None] + gamma**2 * U * U * n[:, None]
        sum_r = s[:, None] - gamma * U * n[:, None]
        quad2 = (rss - sum_r**2 / n[:, None]) / se2**2 + (sum_r**2 / n[:, None]) / a[:, None] ** 2
        tr_inv = ((n - 1.0) / se2 + 1.0 / a)[:, None]
        d_logse = se2 * (quad2 - tr_inv)                               # 2*sigma_e2 * dB/dsigma_e2
        d_logsv = sv2 * (one_r**2 - (n / a)[:, None])

        if adaptive:
            d_logsu = U * U / su2 - 1.0
        else:
            hprime = b[:, None] - lamU - w[:, None] * U
            d_logsu = (U * U / su2 - 1.0) + hprime * U + 1.0

        parts = [d_beta, d_loglam, d_logp, d_alpha[0], d_alpha[1], d_alpha[2],
                 d_gamma, d_logsu, d_logsv, d_logse]
        grad = np.array([float(np.sum(pk * part)) for part in parts])
    return loglik, contrib, grad


def _check_rule(rule: QuadratureRule | None) -> QuadratureRule:
    return rule if rule is not None else QuadratureRule.gauss_hermite(25)


def joint_loglik(params: JointParams, panel: PanelDataset, rule: QuadratureRule | None = None,
                 adaptive: bool = True) -> float:
    """Marginal joint log likelihood, frailty integrated by Gauss-Hermite."""
    data = panel if isinstance(panel, _JointData) else _JointData(panel)
    rule = _check_rule(rule)
    loglik, contrib, _ = _evaluate(params.to_vector(), data, rule, adaptive, want_grad=False)
    if not np.all(np.isfinite(contrib)):
        bad = int(data.subject_ids[int(np.nonzero(~np.isfinite(contrib))[0][0])])
        raise EstimationError(f"non-finite likelihood contribution for subject {bad}")
    return loglik


def joint_loglik_gradient(params: JointParams, panel: PanelDataset,
                          rule: QuadratureRule | None = None, adaptive: bool = True) -> np.ndarray:
    """Gradient of the joint log likelihood in the JointParams vector layout."""
    data = panel if isinstance(panel, _JointData) else _JointData(panel)
    _, _, grad = _evaluate(params.to_vector(), data, _check_rule(rule), adaptive, want_grad=True)
    return grad


def subject_log_contributions(params: JointParams, panel: PanelDataset,
                              rule: QuadratureRule | None = None, adaptive: bool = True):
    """Per-subject log likelihood contributions, as (subject_id, value) pairs."""
    data = _JointData(panel)
    _, contrib, _ = _evaluate(params.to_vector(), data, _check_rule(rule), adaptive, want_grad=False)
    return list(zip((int(i) for i in data.subject_ids), (float(v) for v in contrib)))


def recurrent_frailty_loglik(beta: float, lam: float, p: float, sigma_u2: float,
                             panel: PanelDataset, rule: QuadratureRule | None = None,
                             adaptive: bool = True) -> float:
    """Log likelihood of the Weibull recurrent submodel alone (frailty integrated out)."""
    data = _JointData(panel)
    rule = _check_rule(rule)
    theta = JointParams(beta, np.log(lam), np.log(p), 0.0, 0.0, 0.0, 0.0,
                        0.5 * np.log(sigma_u2), 0.0, 0.0).to_vector()
    # run the full evaluation, then subtract the longitudinal factor at gamma=0
    loglik, _, _ = _evaluate(theta, data, rule, adaptive, want_grad=False)
    return loglik - lmm_loglik([0.0, 0.0, 0.0], 1.0, 1.0, panel, LmmSpec(Adjustment.NONE))


@dataclass(frozen=True)
class JointFitOptions:
    order: int = 25
    adaptive: bool = True
    max_iter: int = 500
    gtol: float = 1e-6


def _starting_theta(panel: PanelDataset, data: _JointData) -> np.ndarray:
    try:
        lmm_fit = fit_lmm(panel, LmmSpec(Adjustment.NONE))
        a0, a1, a2 = lmm_fit.estimates[:3]
        sv2 = max(lmm_fit.estimate("sigma_v2"), 1e-4)
        se2 = max(lmm_fit.estimate("sigma_e2"), 1e-4)
    except EstimationError:
        a0, a1, a2 = np.mean(data.y), 0.0, 0.0
        sv2 = se2 = max(np.var(data.y) / 2.0, 1e-4)
    cox = _CoxData(data.gaps, data.observed, np.repeat(data.z, np.diff(np.append(data.gap_starts, len(data.gaps)))),
                   np.repeat(np.arange(data.n_subjects), np.diff(np.append(data.gap_starts, len(data.gaps)))))
    try:
        lam, p, beta_vec, ok = fit_weibull_ph(cox)
        beta = float(beta_vec[0]) if ok else 0.0
        if not ok:
            lam, p = max(np.sum(data.events) / np.sum(data.gaps), 1e-6), 1.0
    except EstimationError:
        beta, lam, p = 0.0, max(np.sum(data.events) / np.sum(data.gaps), 1e-6), 1.0
    return np.array([beta, np.log(lam), np.log(p), a0, a1, a2, 0.0,
                     np.log(0.5), 0.5 * np.log(sv2), 0.5 * np.log(se2)])


def fit_joint(panel: PanelDataset, options: JointFitOptions | None = None) -> FitResult:
    """Quasi-Newton maximum likelihood fit of the joint model (model A)."""
    options = options or JointFitOptions()
    if panel.n_subjects < 2:
        raise EstimationError("fit_joint needs at least 2 subjects")
    data = _JointData(panel)
    if np.mean(data.events) < 1.0:
        warnings.warn("fewer than one observed gap per subject on average; "
                      "the visit submodel is weakly identified", stacklevel=2)
    rule = QuadratureRule.gauss_hermite(options.order)

    def negloglik(theta):
        ll, _, grad = _evaluate(theta, data, rule, options.adaptive, want_grad=True)
        if not np.isfinite(ll) or grad is None or not np.all(np.isfinite(grad)):
            return np.inf, np.zeros_like(theta)
        return -ll, -grad

    theta0 = _starting_theta(panel, data)
    res = scipy.optimize.minimize(negloglik, theta0, jac=True, method="BFGS",
                                  options={"gtol": options.gtol, "maxiter": options.max_iter})
    theta, fval = res.x, res.fun
    # Newton polish using the observed information (reused for the standard errors)
    info = None
    grad = res.jac
    for _ in range(8):
        if np.max(np.abs(grad)) < options.gtol:
            break
        info = _fd_information(negloglik, theta)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            break
        moved = False
        scale = 1.0
        for _ in range(20):
            cand = theta - scale * step
            fc, gc = negloglik(cand)
            if fc <= fval + 1e-12:
                theta, fval, grad = cand, fc, gc
                moved = True
                break
            scale *= 0.5
        if not moved or np.max(np.abs(scale * step)) < 1e-10:
            break
        info = None
    if info is None:
        info = _fd_information(negloglik, theta)

    converged = bool(np.isfinite(fval) and np.max(np.abs(grad)) < 1e-4)
    params = JointParams.from_vector(theta)
    nat = params.natural()
    estimates = np.array([nat[k] for k in PARAM_NAMES])

    ses = np.full(len(PARAM_NAMES), np.nan)
    if converged:
        raw = _se_vector(info)
        if raw is None:
            converged = False
        else:
            jac = np.array([1.0, nat["lambda"], nat["p"], 1.0, 1.0, 1.0, 1.0,
                            2.0 * nat["sigma_u2"], 2.0 * nat["sigma_v2"], 2.0 * nat["sigma_e2"]])
            ses = raw * jac
    if not converged:
        ses = np.full(len(PARAM_NAMES), np.nan)

    return FitResult(
        model_label="A",
        param_names=PARAM_NAMES,
        estimates=estimates,
        std_errors=ses,
        loglik=float(-fval),
        converged=converged,
        iterations=int(res.nit),
        message="" if converged else f"optimizer: {res.message}; max|grad|={np.max(np.abs(grad)):.2e}",
    )


def _fd_information(fun_grad, theta: np.ndarray) -> np.ndarray:
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


def _se_vector(info: np.ndarray):
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(cov)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        return None
    return np.sqrt(d)
