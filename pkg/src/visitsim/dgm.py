"""Data-generating mechanisms for panels with informative visit processes.

Three families are supported:

* ``joint_model`` -- visit gaps follow a Weibull proportional-hazards renewal
  process sharing a log-normal frailty u with the longitudinal outcome
  (association strength ``gamma``), optionally merged with scheduled yearly
  visits;
* ``gamma_treatment`` -- gaps drawn from a Gamma distribution whose scale
  depends on treatment only;
* ``gamma_treatment_lagged_y`` -- Gamma gaps whose scale additionally depends
  on the outcome recorded at the previous visit.

Every subject gets an independent random substream derived by counter-based
splitting from the scenario seed, so the generated panel is bit-identical
regardless of evaluation order or worker count.  Within a subject the draw
order is fixed and documented in ``_subject_draws``.
"""

from __future__ import annotations

import configparser
import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .domain import PanelDataset, Subject, build_panel
from .errors import ConfigError

CENSORING_DEFAULT = (5.0, 10.0)


class Family(str, enum.Enum):
    JOINT_MODEL = "joint_model"
    GAMMA_TREATMENT = "gamma_treatment"
    GAMMA_TREATMENT_LAGGED_Y = "gamma_treatment_lagged_y"


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete parameterisation of one data-generating mechanism."""

    family: Family
    n_subjects: int = 200
    weibull_shape: float = 1.05
    weibull_scale: float = 0.10
    beta: float = 1.0
    gamma: float = 0.0
    alpha0: float = 0.0
    alpha1: float = 1.0
    alpha2: float = 0.2
    sigma_u2: float = 1.0
    sigma_v2: float = 0.5
    sigma_e2: float = 1.0
    gamma_shape: float = 2.0
    psi: float = 0.0
    omega: float = 0.20
    sigma_xi2: float = 0.1
    regular_visits: bool = False
    regular_interval: float = 1.0
    # Open question in the design: whether a scheduled visit resets the clock
    # of the process-driven gap.  Default: it does (min-of-both, full reset).
    regular_resets_process: bool = True
    censoring_lower: float = CENSORING_DEFAULT[0]
    censoring_upper: float = CENSORING_DEFAULT[1]
    seed: int = 0
    tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        for name in ("sigma_u2", "sigma_v2", "sigma_e2", "sigma_xi2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.weibull_scale <= 0 or self.weibull_shape <= 0:
            raise ConfigError("weibull_scale and weibull_shape must be > 0")
        if self.gamma_shape <= 0:
            raise ConfigError("gamma_shape must be > 0")
        if not 0 < self.censoring_lower < self.censoring_upper:
            raise ConfigError("censoring bounds must satisfy 0 < lower < upper")
        if self.regular_visits and self.family is not Family.JOINT_MODEL:
            raise ConfigError("regular_visits is only defined for the joint_model family")
        if self.regular_visits and self.regular_interval <= 0:
            raise ConfigError("regular_interval must be > 0")

    @property
    def label(self) -> str:
        return self.tag or self.family.value

    def truths(self) -> dict[str, float]:
        """Default true parameter values for performance summaries.

        The regression coefficients of the outcome model are defined for all
        families; the visit-process and association parameters only when the
        panel really was generated from the joint model.
        """
        out = {
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "sigma_v2": self.sigma_v2,
            "sigma_e2": self.sigma_e2,
        }
        if self.family is Family.JOINT_MODEL:
            out.update(
                {
                    "beta": self.beta,
                    "lambda": self.weibull_scale,
                    "p": self.weibull_shape,
                    "gamma": self.gamma,
                    "sigma_u2": self.sigma_u2,
                }
            )
        return out


def draw_weibull_gap(u01, lam: float, p: float, linpred) -> float | np.ndarray:
    """Invert the Weibull cumulative hazard to turn uniforms into gap times.

    Solves lam * t**p * exp(linpred) = -log(u01) for t, i.e. the inversion
    method for proportional-hazards event times.  Accepts scalars or arrays.
    """
    u01 = np.asarray(u01, dtype=float)
    if np.any((u01 <= 0.0) | (u01 >= 1.0)) or not np.all(np.isfinite(u01)):
        raise ValueError("u01 must lie strictly inside (0, 1)")
    if lam <= 0 or p <= 0:
        raise ValueError("lam and p must be > 0")
    out = (-np.log(u01) / (lam * np.exp(linpred))) ** (1.0 / p)
    return float(out) if out.ndim == 0 else out


def weibull_cumulative_hazard(t, lam: float, p: float, linpred=0.0):
    return lam * np.asarray(t, dtype=float) ** p * np.exp(linpred)


def weibull_gap_cdf(t, lam: float, p: float, linpred=0.0):
    return 1.0 - np.exp(-weibull_cumulative_hazard(t, lam, p, linpred))


def _subject_rngs(seed, n: int) -> list[np.random.Generator]:
    """One independent Philox substream per subject, split from ``seed``.

    ``seed`` is either an integer or a SeedSequence (the study harness passes
    per-replication SeedSequences so that (replication, subject) indexes the
    substream).
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return [np.random.Generator(np.random.Philox(child)) for child in seed.spawn(n)]


def _u01_open(rng: np.random.Generator) -> float:
    # rng.random() covers [0, 1); reject an exact 0 to stay in the open interval
    while True:
        u = rng.random()
        if u > 0.0:
            return u


def _subject_draws(rng: np.random.Generator, config: ScenarioConfig):
    """Fixed leading draw order for every subject: z, process effect, v, C.

    The censoring time is drawn before any gap or outcome noise so that the
    number of visits a subject ends up with can never shift the draws of
    another quantity.
    """
    z = 1 if rng.random() < 0.5 else 0
    if config.family is Family.JOINT_MODEL:
        proc = rng.normal(0.0, math.sqrt(config.sigma_u2))
    else:
        proc = rng.normal(0.0, math.sqrt(config.sigma_xi2))
    v = rng.normal(0.0, math.sqrt(config.sigma_v2))
    c = rng.uniform(config.censoring_lower, config.censoring_upper)
    return z, proc, v, c


def _outcome(config: ScenarioConfig, z: int, t: float, u_term: float, v: float, eps: float) -> float:
    return config.alpha0 + z * config.alpha1 + t * config.alpha2 + u_term + v + eps


def _simulate_joint_subject(rng: np.random.Generator, config: ScenarioConfig, sid: int) -> Subject:
    z, u, v, c = _subject_draws(rng, config)
    sig_e = math.sqrt(config.sigma_e2)
    u_term = config.gamma * u
    linpred = config.beta * z + u

    times = [0.0]
    ys = [_outcome(config, z, 0.0, u_term, v, rng.normal(0.0, sig_e))]
    interval = config.regular_interval
    t = 0.0
    pending: float | None = None  # absolute time of the pending process visit (additive mode)
    while True:
        if pending is None:
            gap = draw_weibull_gap(_u01_open(rng), config.weibull_scale, config.weibull_shape, linpred)
            pending = t + gap
        t_next = pending
        if config.regular_visits:
            # next scheduled time strictly after the current visit
            k = math.floor(t / interval + 1e-12) + 1
            sched = k * interval
            if sched < t_next:
                t_next = sched
        if t_next >= c:
            break
        if config.regular_visits and t_next < pending and config.regular_resets_process:
            pending = None  # scheduled visit fired: discard the pending draw, clock restarts
        elif t_next == pending:
            pending = None  # process visit fired: next gap drawn from the new clock
        t = t_next
        times.append(t)
        ys.append(_outcome(config, z, t, u_term, v, rng.normal(0.0, sig_e)))
    return Subject(sid, z, c, times, ys, true_u=u, true_v=v)


def _simulate_gamma_subject(rng: np.random.Generator, config: ScenarioConfig, sid: int) -> Subject:
    z, xi, v, c = _subject_draws(rng, config)
    sig_e = math.sqrt(config.sigma_e2)
    lagged = config.family is Family.GAMMA_TREATMENT_LAGGED_Y

    times = [0.0]
    ys = [_outcome(config, z, 0.0, 0.0, v, rng.normal(0.0, sig_e))]
    t = 0.0
    while True:
        log_scale = -config.psi * config.beta * z + xi
        if lagged:
            log_scale += config.omega * ys[-1]
        gap = rng.gamma(config.gamma_shape, math.exp(log_scale))
        t = t + gap
        if t >= c or gap <= 0.0:
            break
        times.append(t)
        ys.append(_outcome(config, z, t, 0.0, v, rng.normal(0.0, sig_e)))
    return Subject(sid, z, c, times, ys, true_u=xi, true_v=v)


def simulate_joint_model(config: ScenarioConfig, seed) -> PanelDataset:
    """Generate a panel from the shared-frailty joint model."""
    if config.family is not Family.JOINT_MODEL:
        raise ConfigError(f"simulate_joint_model requires the joint_model family, got {config.family.value}")
    rngs = _subject_rngs(seed, config.n_subjects)
    subjects = [_simulate_joint_subject(rngs[i], config, i + 1) for i in range(config.n_subjects)]
    return build_panel(subjects, config.label)


def simulate_gamma_process(config: ScenarioConfig, seed) -> PanelDataset:
    """Generate a panel whose visit gaps are Gamma draws (treatment / lagged-Y scale)."""
    if config.family is Family.JOINT_MODEL:
        raise ConfigError("simulate_gamma_process requires one of the gamma families")
    rngs = _subject_rngs(seed, config.n_subjects)
    subjects = [_simulate_gamma_subject(rngs[i], config, i + 1) for i in range(config.n_subjects)]
    return build_panel(subjects, config.label)


def simulate_panel(config: ScenarioConfig, seed) -> PanelDataset:
    """Dispatch to the generator matching ``config.family``."""
    if config.family is Family.JOINT_MODEL:
        return simulate_joint_model(config, seed)
    return simulate_gamma_process(config, seed)


# --- scenario config files -------------------------------------------------

_BOOL_KEYS = {"regular_visits", "regular_resets_process"}
_INT_KEYS = {"n_subjects", "seed"}
_STR_KEYS = {"family", "tag"}
_SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)}

CONFIG_SCHEMA_HELP = """\
Scenario files are INI-style with a [scenario] section and an optional
[truth] section.

[scenario] keys (all optional except family):
  family                  joint_model | gamma_treatment | gamma_treatment_lagged_y
  n_subjects              int, default 200
  weibull_shape           Weibull shape p of the visit hazard, default 1.05
  weibull_scale           Weibull scale lambda of the visit hazard, default 0.10
  beta                    treatment effect on the visit process, default 1.0
  gamma                   association between visit frailty and outcome, default 0.0
  alpha0 alpha1 alpha2    outcome intercept / treatment / time effects (0, 1, 0.2)
  sigma_u2                visit frailty variance, default 1.0
  sigma_v2                outcome random-intercept variance, default 0.5
  sigma_e2                outcome residual variance, default 1.0
  gamma_shape             shape of Gamma gap draws, default 2.0
  psi                     treatment effect on the Gamma gap scale, default 0.0
  omega                   lagged-outcome effect on the Gamma gap scale, default 0.20
  sigma_xi2               Gamma-family subject effect variance, default 0.1
  regular_visits          true/false: add scheduled visits (joint model only)
  regular_interval        spacing of scheduled visits in years, default 1.0
  regular_resets_process  true/false: scheduled visit resets the gap clock, default true
  censoring_lower/upper   Uniform censoring bounds, default 5 and 10
  seed                    default master seed, int
  tag                     scenario name used in output tables

[truth] holds parameter=value pairs used as true values when summarising a
study; defaults derived from [scenario] are extended/overridden by entries
here.  Unknown keys in [scenario] and unknown sections are errors.
"""


def parse_scenario_config(path) -> tuple[ScenarioConfig, dict[str, float]]:
    """Read a scenario config file, returning the config and the truth map."""
    with open(path) as fh:
        return parse_scenario_text(fh.read(), source=str(path))


def parse_scenario_text(text: str, source: str = "<config>") -> tuple[ScenarioConfig, dict[str, float]]:
    """Parse scenario config content; see CONFIG_SCHEMA_HELP for the schema."""
    path = source
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    sections = set(parser.sections())
    unknown = sections - {"scenario", "truth"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    if "scenario" not in sections:
        raise ConfigError(f"{path}: missing [scenario] section")

    kwargs: dict = {}
    for key, raw in parser.items("scenario"):
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"{path}: unknown [scenario] key {key!r}")
        try:
            if key in _BOOL_KEYS:
                kwargs[key] = _parse_bool(raw)
            elif key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _STR_KEYS:
                kwargs[key] = raw.strip()
            else:
                kwargs[key] = float(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {raw!r}") from exc
    if "family" not in kwargs:
        raise ConfigError(f"{path}: [scenario] must set family")
    try:
        config = ScenarioConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    truths = config.truths()
    if parser.has_section("truth"):
        for key, raw in parser.items("truth"):
            try:
                truths[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad [truth] value for {key!r}: {raw!r}") from exc
    return config, truths


def _parse_bool(raw: str) -> bool:
    val = raw.strip().lower()
    if val in ("true", "1", "yes", "on"):
        return True
    if val in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def with_seed(config: ScenarioConfig, seed: int | None) -> ScenarioConfig:
    """Return the config with its seed replaced, when an override is given."""
    if seed is None:
        return config
    return replace(config, seed=int(seed))
