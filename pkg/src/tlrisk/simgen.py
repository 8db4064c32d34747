"""Class-conditional Gaussian source/target benchmark with a sign-flip shift.

Labels are Rademacher(+1 w.p. prevalence). Given the label, features are
Gaussian with mean ``beta * label``; the first two coordinates of
the negative class use a correlated, inflated 2x2 covariance block while
everything else has unit variance. Source and target differ only in the
sign of the first two entries of ``beta``.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Cohort, GroupedDataset


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


def _default_block():
    return ((3.0, 0.4), (0.4, 3.0))


@dataclass(frozen=True)
class SimConfig:
    n_total: int = 2000
    m_target: int = 200
    p: int = 10
    prevalence: float = 0.5
    a: float = 0.3
    b: float = 0.2
    sigma_neg_block: tuple = field(default_factory=_default_block)
    seed: int = 0
    replicates: int = 20
    n_test: int = 2000
    source_includes_target: bool = True

    def __post_init__(self):
        if not 0 < self.m_target < self.n_total:
            raise ValueError("need 0 < m_target < n_total")
        if self.p < 5:
            raise ValueError("p must be at least 5")
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValueError("prevalence must lie in [0, 1]")
        blk = np.asarray(self.sigma_neg_block, dtype=float)
        if blk.shape != (2, 2) or not np.allclose(blk, blk.T):
            raise ValueError("sigma_neg_block must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(blk) <= 0):
            raise ValueError("sigma_neg_block must be positive definite")
        object.__setattr__(self, "sigma_neg_block",
                           tuple(tuple(float(v) for v in r) for r in blk))

    @property
    def name(self) -> str:
        return f"pi={self.prevalence:g},b={self.b:g}"

    def beta(self, domain: Domain) -> np.ndarray:
        sign = 1.0 if Domain(domain) == Domain.TARGET else -1.0
        beta = np.zeros(self.p)
        beta[:2] = sign * self.a
        beta[2:5] = self.b
        return beta

    def cov(self, label: int) -> np.ndarray:
        """Class covariance; ``label`` in {+1, -1}."""
        S = np.eye(self.p)
        if label < 0:
            S[:2, :2] = np.asarray(self.sigma_neg_block)
        return S

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_neg_block"] = [list(r) for r in self.sigma_neg_block]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "sigma_neg_block" in d:
            d["sigma_neg_block"] = tuple(tuple(r) for r in d["sigma_neg_block"])
        return cls(**d)


@dataclass
class SimStudy:
    source: Cohort
    target: Cohort
    test: Cohort
    config: SimConfig
    replicate: int

    def training_pool(self) -> Cohort:
        """Rows the source learner sees: all n rows by default."""
        if not self.config.source_includes_target:
            return self.source
        return GroupedDataset([self.source, self.target]).pooled("combined")

    def as_grouped(self) -> GroupedDataset:
        return GroupedDataset([self.source, self.target])


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent stream for one replicate, reproducible in isolation."""
    return np.random.default_rng([int(seed), int(replicate)])


def _draw(rng, n, config: SimConfig, domain: Domain):
    y_pm = np.where(rng.uniform(size=n) < config.prevalence, 1, -1)
    beta = config.beta(domain)
    L_pos = np.linalg.cholesky(config.cov(1))
    L_neg = np.linalg.cholesky(config.cov(-1))
    e = rng.standard_normal((n, config.p))
    X = np.where((y_pm == 1)[:, None], e @ L_pos.T, e @ L_neg.T) + y_pm[:, None] * beta
    return X, (y_pm == 1).astype(np.int64)


def generate_study(config: SimConfig, replicate: int) -> SimStudy:
    rng = replicate_rng(config.seed, replicate)
    names = [f"x{j + 1}" for j in range(config.p)]
    n_src = config.n_total - config.m_target
    Xs, ys = _draw(rng, n_src, config, Domain.SOURCE)
    Xt, yt = _draw(rng, config.m_target, config, Domain.TARGET)
    Xe, ye = _draw(rng, config.n_test, config, Domain.TARGET)
    src = Cohort("source", Xs, ys, names, np.arange(n_src))
    tgt = Cohort("target", Xt, yt, names, np.arange(n_src, config.n_total))
    test = Cohort("target_test", Xe, ye, names)
    return SimStudy(src, tgt, test, config, replicate)


def _gauss_logpdf(X, mean, cov):
    L = np.linalg.cholesky(cov)
    d = np.linalg.solve(L, (X - mean).T)
    return (-0.5 * np.sum(d * d, axis=0) - np.log(np.diag(L)).sum()
            - 0.5 * X.shape[1] * np.log(2 * np.pi))


def bayes_log_odds(X, config: SimConfig, domain: Domain = Domain.TARGET):
    """Exact posterior log-odds of label +1 under the generating model."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    beta = config.beta(domain)
    pi = config.prevalence
    with np.errstate(divide="ignore"):
        prior = np.log(pi) - np.log1p(-pi)
    out = prior + _gauss_logpdf(X, beta, config.cov(1)) - _gauss_logpdf(X, -beta, config.cov(-1))
    return float(out[0]) if single else out


def scenario_grid(seed: int = 0, replicates: int = 20) -> list[SimConfig]:
    """The four prevalence x signal scenarios at fixed heterogeneity a=0.3."""
    return [
        SimConfig(prevalence=pi, a=0.3, b=b, seed=seed, replicates=replicates)
        for pi in (0.5, 0.1)
        for b in (0.2, 0.7)
    ]


def with_seed(configs, seed: int) -> list[SimConfig]:
    return [replace(c, seed=seed) for c in configs]
