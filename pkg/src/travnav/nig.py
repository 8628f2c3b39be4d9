"""Normal-Inverse-Gamma belief over a cell's latent traversability.

Each cell keeps a conjugate NIG posterior over the (mean, variance) of the
traversability samples the oracle returns for it. Updates are closed form:

    gamma_n = (gamma_0 kappa_0 + n xbar) / kappa_n
    kappa_n = kappa_0 + n
    a_n     = a_0 + n / 2
    b_n     = b_0 + S / 2 + kappa_0 n (xbar - gamma_0)^2 / (2 kappa_n)

with xbar the sample mean and S the sum of squared deviations. Because the
family is conjugate, a posterior can serve as the prior of the next batch,
so any grouping of the same samples yields the same state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ValidationError


@dataclass(frozen=True)
class NigState:
    gamma: float = 0.5
    kappa: float = 1.0
    a: float = 1.0
    b: float = 1.0
    n: int = 0
    # sufficient statistics of the fused samples (Welford running form)
    mean: float = 0.0
    m2: float = 0.0

    def validate(self) -> "NigState":
        if not (self.kappa > 0 and self.a > 0 and self.b > 0):
            raise ValidationError(f"NIG hyperparameters must be positive: {self}")
        if not all(math.isfinite(v) for v in (self.gamma, self.kappa, self.a, self.b)):
            raise ValidationError(f"non-finite NIG hyperparameters: {self}")
        return self

    @property
    def hyper(self) -> tuple[float, float, float, float]:
        return (self.gamma, self.kappa, self.a, self.b)


DEFAULT_PRIOR = NigState()


def _check_samples(samples: Iterable[float]) -> list[float]:
    xs = [float(x) for x in samples]
    for x in xs:
        if not math.isfinite(x):
            raise ValidationError(f"non-finite traversability sample: {x!r}")
    return xs


def nig_update_batch(prior: NigState, samples: Sequence[float]) -> NigState:
    """Posterior after fusing ``samples`` into ``prior`` in one step."""
    prior.validate()
    xs = _check_samples(samples)
    n = len(xs)
    if n == 0:
        return prior
    xbar = math.fsum(xs) / n
    ss = math.fsum((x - xbar) ** 2 for x in xs)

    g0, k0, a0, b0 = prior.hyper
    kn = k0 + n
    gamma = (g0 * k0 + n * xbar) / kn
    a = a0 + n / 2.0
    b = b0 + 0.5 * ss + k0 * n * (xbar - g0) ** 2 / (2.0 * kn)

    # merge sample statistics (Chan et al. pairwise combination)
    n_tot = prior.n + n
    delta = xbar - prior.mean
    mean = prior.mean + delta * n / n_tot
    m2 = prior.m2 + ss + delta * delta * prior.n * n / n_tot
    return NigState(gamma, kn, a, b, n_tot, mean, m2)


def nig_update_one(prior: NigState, x: float) -> NigState:
    """Streaming form: fuse a single sample."""
    prior.validate()
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError(f"non-finite traversability sample: {x!r}")
    g0, k0, a0, b0 = prior.hyper
    kn = k0 + 1.0
    d = x - g0
    n_tot = prior.n + 1
    delta = x - prior.mean
    mean = prior.mean + delta / n_tot
    return NigState(
        gamma=g0 + d / kn,
        kappa=kn,
        a=a0 + 0.5,
        b=b0 + k0 * d * d / (2.0 * kn),
        n=n_tot,
        mean=mean,
        m2=prior.m2 + delta * (x - mean),
    )


