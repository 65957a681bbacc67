"""Monte Carlo size and power studies for the dispersion tests.

Each replicate draws its random numbers from its own stream, derived from
``(master_seed, stream, replicate index)`` through ``numpy.random.SeedSequence``,
so results do not depend on how replicates are spread over workers.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .inference import DEFAULT_LEVELS, Hypothesis, jackknife_oneway_test, poquim_test
from .likelihood import FitOptions
from .model import ModelSpec, balanced_one_way, two_way_crossed

FAMILIES = ("normal", "double-exponential", "centered-exponential", "normal-mixture")
METHODS = ("poquim", "jackknife")


@dataclass(frozen=True)
class DistributionSpec:
    """A law for random effects or errors; draws are centered and scaled to
    ``target_variance``.  ``params`` is ``(mu1, mu2, rho)`` for the mixture."""

    family: str = "normal"
    params: tuple = ()
    target_variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "normal-mixture":
            if len(self.params) != 3 or not 0 <= self.params[2] <= 1:
                raise ConfigError("normal-mixture needs params (mu1, mu2, rho) with 0 <= rho <= 1")
        if not self.target_variance > 0:
            raise ConfigError("target variance must be positive")

    @classmethod
    def parse(cls, obj) -> "DistributionSpec":
        """Accept a spec, a family name, ``"NM(-2,2,0.5)"`` or a dict."""
        if isinstance(obj, DistributionSpec):
            return obj
        if isinstance(obj, dict):
            return cls(obj.get("family", "normal"), tuple(obj.get("params", ())),
                       float(obj.get("target_variance", 1.0)))
        if isinstance(obj, (tuple, list)):
            return cls(obj[0], tuple(obj[1]) if len(obj) > 1 else ())
        name = str(obj).strip()
        aliases = {"N": "normal", "DE": "double-exponential", "CE": "centered-exponential"}
        if name.upper().startswith("NM(") and name.endswith(")"):
            vals = tuple(float(v) for v in name[3:-1].split(","))
            return cls("normal-mixture", vals)
        return cls(aliases.get(name.upper(), name))


def sample_law(rng: np.random.Generator, law, variance: float, size) -> np.ndarray:
    """Draw from ``law`` centered to mean 0 and scaled to ``variance``."""
    law = DistributionSpec.parse(law)
    if variance == 0:
        return np.zeros(size)
    f = law.family
    if f == "normal":
        x = rng.standard_normal(size)
    elif f == "double-exponential":
        x = rng.laplace(0.0, 1.0, size) / np.sqrt(2.0)
    elif f == "centered-exponential":
        x = rng.standard_exponential(size) - 1.0
    else:
        mu1, mu2, rho = law.params
        mean = (1 - rho) * mu1 + rho * mu2
        var = 1.0 + (1 - rho) * (mu1 - mean) ** 2 + rho * (mu2 - mean) ** 2
        pick = rng.random(size) < rho
        x = (np.where(pick, mu2, mu1) - mean + rng.standard_normal(size)) / np.sqrt(var)
    return np.sqrt(variance) * x


@dataclass(frozen=True)
class StudyConfig:
    """One simulation scenario.

    ``laws`` lists one law per term with the error first, e.g.
    ``("normal", "DE")`` for DE random effects and normal errors in the
    one-way layout.  ``gamma`` holds the true variance ratios.  ``K`` lists
    the constraint rows (each of length s+1), i.e. the columns of K in
    ``H0: K'theta = phi``.
    """

    design: str = "one-way"
    m: int = 50
    n: int = 2
    mu: float = 1.0
    lam: float = 1.0
    gamma: tuple = (1.0,)
    laws: tuple = ("normal", "normal")
    K: tuple = ((0.0, 1.0),)
    phi: tuple = (1.0,)
    null_substitution: bool = True
    methods: tuple = ("poquim",)
    levels: tuple = DEFAULT_LEVELS
    replicates: int = 2000
    master_seed: int = 0
    stream: int = 0
    label: str = ""
    fit_starts: tuple = ("moment",)

    def __post_init__(self):
        if self.design not in ("one-way", "two-way"):
            raise ConfigError(f"unknown design {self.design!r}")
        s = 1 if self.design == "one-way" else 2
        if len(self.gamma) != s or len(self.laws) != s + 1:
            raise ConfigError(f"{self.design} needs {s} gamma value(s) and {s + 1} laws")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if any(not 0 < a < 1 for a in self.levels):
            raise ConfigError("nominal levels must lie in (0, 1)")
        for meth in self.methods:
            if meth not in METHODS:
                raise ConfigError(f"unknown method {meth!r}")
        if "jackknife" in self.methods and self.design != "one-way":
            raise ConfigError("the jackknife applies only to the balanced one-way design")
        for law in self.laws:
            DistributionSpec.parse(law)
        if any(len(row) != s + 1 for row in self.K):
            raise ConfigError(f"each K row must have s+1 = {s + 1} entries")
        self.hypothesis

    @property
    def hypothesis(self) -> Hypothesis:
        return Hypothesis(np.asarray(self.K, dtype=float).T, self.phi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["laws"] = [str(x) if not isinstance(x, DistributionSpec) else asdict(x) for x in self.laws]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown study fields: {sorted(extra)}")
        kw = dict(d)
        for key in ("gamma", "laws", "phi", "methods", "levels", "fit_starts"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "K" in kw:
            kw["K"] = tuple(tuple(float(v) for v in row) for row in kw["K"])
        return cls(**kw)


def _template(config: StudyConfig) -> ModelSpec:
    if config.design == "one-way":
        return balanced_one_way(config.m, config.n)
    return two_way_crossed(config.m, config.n)


def replicate_rng(config: StudyConfig, replicate_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(config.master_seed, spawn_key=(config.stream, replicate_index))
    return np.random.default_rng(ss)


def simulate_dataset(config: StudyConfig, replicate_index: int, template: ModelSpec | None = None) -> ModelSpec:
    """Model with a response drawn for replicate ``replicate_index``."""
    template = template or _template(config)
    rng = replicate_rng(config, replicate_index)
    y = np.full(template.N, float(config.mu))
    for t, (Z, g) in enumerate(zip(template.Z, config.gamma), start=1):
        a = sample_law(rng, config.laws[t], config.lam * g, Z.shape[1])
        y += Z @ a
    y += sample_law(rng, config.laws[0], config.lam, template.N)
    return template.with_response(y)


def _run_replicate(config, idx, template, opts):
    model = simulate_dataset(config, idx, template)
    rec = {"index": idx}
    if "poquim" in config.methods:
        try:
            res, fit, est = poquim_test(model, config.hypothesis, config.null_substitution,
                                        opts, config.levels)
            rec["indefinite_acm"] = bool(np.linalg.eigvalsh(est.sigma)[0] < 0)
            if not fit.converged:
                rec["poquim"] = ("nonconverged", None, None)
            elif any(fit.boundary):
                rec["poquim"] = ("boundary", None, None)
            else:
                rec["poquim"] = ("ok", res.statistic, res.p_value)
        except (NumericalError, DataError) as exc:
            rec["poquim"] = ("error:" + type(exc).__name__, None, None)
    if "jackknife" in config.methods:
        gamma0 = float(config.hypothesis.pinned_components().get(1, np.nan))
        try:
            res = jackknife_oneway_test(model.y, gamma0, config.n, config.levels)
            rec["jackknife"] = ("ok", res.statistic, res.p_value)
        except (NumericalError, DataError) as exc:
            rec["jackknife"] = ("error:" + type(exc).__name__, None, None)
    return rec


def _run_block(config: StudyConfig, start: int, stop: int):
    template = _template(config)
    opts = FitOptions(starts=config.fit_starts)
    return [_run_replicate(config, i, template, opts) for i in range(start, stop)]


@dataclass(frozen=True, eq=False)
class StudyResult:
    config: StudyConfig
    records: list
    elapsed: float = field(default=0.0, compare=False)

    def valid(self, method) -> int:
        return sum(1 for r in self.records if r[method][0] == "ok")

    def rejections(self, method, level) -> int:
        return sum(1 for r in self.records if r[method][0] == "ok" and r[method][2] < level)

    def rate(self, method, level):
        """Rejection fraction and its binomial standard error."""
        k, v = self.rejections(method, level), self.valid(method)
        if v == 0:
            return float("nan"), float("nan")
        p = k / v
        return p, float(np.sqrt(p * (1 - p) / v))

    def failures(self, method) -> dict:
        out = {}
        for r in self.records:
            status = r[method][0]
            if status != "ok":
                out[status] = out.get(status, 0) + 1
        return out

    def summary(self) -> dict:
        """Deterministic summary (elapsed time excluded)."""
        rows = {}
        for meth in self.config.methods:
            rows[meth] = {
                "valid": self.valid(meth),
                "failures": dict(sorted(self.failures(meth).items())),
                "indefinite_acm": sum(1 for r in self.records if r.get("indefinite_acm")),
                "rates": {f"{a:g}": dict(zip(("rate", "se"), self.rate(meth, a)))
                          for a in self.config.levels},
            }
        return {"label": self.config.label, "config": self.config.to_dict(), "results": rows}


def run_study(config: StudyConfig, threads: int = 1, block: int = 50) -> StudyResult:
    """Run all replicates; records come back ordered by replicate index."""
    t0 = time.perf_counter()
    R = config.replicates
    bounds = [(a, min(R, a + block)) for a in range(0, R, block)]
    if threads > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(_run_block, [config] * len(bounds),
                                [a for a, _ in bounds], [b for _, b in bounds]))
    else:
        parts = [_run_block(config, a, b) for a, b in bounds]
    records = [r for part in parts for r in part]
    return StudyResult(config, records, time.perf_counter() - t0)
