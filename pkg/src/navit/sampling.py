"""Stochastic policies: resolution sampling, token-drop rates and their schedules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError

log = logging.getLogger(__name__)

#: Default beta variance as a fraction of the maximum u_mu * (1 - u_mu).
BETA_VARIANCE_FRACTION = 0.3
#: Standard deviation of resolution-dependent drop rates.
RESOLUTION_DROP_STD = 0.02


# -- resolution sampling ------------------------------------------------------


@dataclass(frozen=True)
class ResolutionSampler:
    """Draws an effective side length from ``u ~ D`` on ``[-1, 1]``.

    ``mode="side"`` maps ``u`` linearly onto ``[low, high]``; ``mode="area"``
    maps it linearly onto ``[low**2, high**2]`` and takes the square root.
    ``dist`` is ``uniform`` or ``truncnormal`` (``mean``/``std``, rejection
    outside ``[-1, 1]``).
    """

    mode: str = "side"
    low: float = 64.0
    high: float = 384.0
    dist: str = "uniform"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.mode not in ("side", "area"):
            raise ConfigError(f"unknown mode {self.mode!r}", "sampler.mode")
        if self.dist not in ("uniform", "truncnormal"):
            raise ConfigError(f"unknown distribution {self.dist!r}", "sampler.dist")
        if not 0 < self.low <= self.high:
            raise ConfigError(f"need 0 < low <= high, got [{self.low}, {self.high}]", "sampler")
        if self.dist == "truncnormal" and self.std <= 0:
            raise ConfigError("truncated normal needs std > 0", "sampler.std")

    def draw_u(self, rng: np.random.Generator) -> float:
        if self.dist == "uniform":
            return float(rng.uniform(-1.0, 1.0))
        while True:
            u = float(rng.normal(self.mean, self.std))
            if -1.0 <= u <= 1.0:
                return u

    def side_from_u(self, u: float) -> float:
        t = (u + 1.0) / 2.0
        if self.mode == "side":
            return self.low + t * (self.high - self.low)
        return math.sqrt(self.low**2 + t * (self.high**2 - self.low**2))


def sample_effective_side(sampler: ResolutionSampler, rng) -> float:
    return sampler.side_from_u(sampler.draw_u(rng))


def resize_preserving_aspect(img, side, patch):
    """Target ``(height, width)`` with area close to ``side**2`` and the image's aspect ratio.

    Both dimensions are rounded to the nearest positive multiple of ``patch``
    (ties to even); a dimension that would round to zero is clamped to
    ``patch`` and logged.
    """
    if side < patch:
        raise ValueError(f"target side {side} is smaller than the patch size {patch}")
    root = math.sqrt(img.height / img.width)
    dims = []
    for ideal in (side * root, side / root):
        units = round(ideal / patch)
        if units < 1:
            log.warning("image %s: extreme aspect %dx%d clamps a side to %d",
                        img.id, img.height, img.width, patch)
            units = 1
        dims.append(units * patch)
    return dims[0], dims[1]


# -- drop rates ---------------------------------------------------------------


def beta_parameters(d_mu, d_max, variance_fraction=BETA_VARIANCE_FRACTION):
    """Moment-matched ``(alpha, beta)`` for ``u = d / d_max``."""
    if not 0 < d_mu < d_max < 1:
        raise ConfigError(f"need 0 < d_mu < d_max < 1, got d_mu={d_mu}, d_max={d_max}", "drop")
    u_mu = d_mu / d_max
    var = variance_fraction * u_mu * (1 - u_mu)
    alpha = u_mu * (u_mu * (1 - u_mu) / var - 1)
    beta = alpha * (1 - u_mu) / u_mu
    if alpha <= 0 or beta <= 0:
        raise ConfigError(f"variance fraction {variance_fraction} gives alpha={alpha}, beta={beta}", "drop")
    return alpha, beta


def beta_drop_rate(d_mu, d_max, rng, size=None, variance_fraction=BETA_VARIANCE_FRACTION):
    alpha, beta = beta_parameters(d_mu, d_max, variance_fraction)
    return rng.beta(alpha, beta, size=size) * d_max


def resolution_drop_mean(seq_len, d_min, d_max, s_min, s_max):
    return d_min + (seq_len - s_min) / (s_max - s_min) * (d_max - d_min)


def resolution_dependent_rate(seq_len, d_min, d_max, s_min, s_max, rng, std=RESOLUTION_DROP_STD):
    """Normal draw around a mean linear in ``seq_len``; draws beyond 2 std are rejected."""
    if not s_min <= seq_len <= s_max:
        raise ValueError(f"sequence length {seq_len} outside [{s_min}, {s_max}]")
    mu = resolution_drop_mean(seq_len, d_min, d_max, s_min, s_max)
    while True:
        d = float(rng.normal(mu, std))
        if abs(d - mu) <= 2 * std:
            return min(max(d, 0.0), math.nextafter(1.0, 0.0))


def scheduled_rate(n, rho_min, rho_max, mu, tau):
    """Sigmoid schedule of the drop rate over the number of images seen."""
    if tau == 0:
        raise ValueError("tau must be non-zero")
    return rho_min + (rho_max - rho_min) * expit((n - mu) / tau)


@dataclass(frozen=True)
class DropPolicy:
    """Per-image drop-rate policy.

    ``kind`` selects the parameters that matter: ``constant`` (``rate``),
    ``beta`` (``d_mu``, ``d_max``), ``resolution`` (``d_min``, ``d_max``,
    ``s_min``, ``s_max``) or ``scheduled`` (``rho_min``, ``rho_max``, ``mu``,
    ``tau``).
    """

    kind: str = "constant"
    rate: float = 0.0
    d_mu: float = 0.25
    d_min: float = 0.0
    d_max: float = 0.5
    s_min: int = 16
    s_max: int = 576
    rho_min: float = 0.2
    rho_max: float = 0.8
    mu: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if self.kind == "constant":
            if not 0 <= self.rate < 1:
                raise ConfigError(f"rate must be in [0, 1), got {self.rate}", "drop.rate")
        elif self.kind == "beta":
            beta_parameters(self.d_mu, self.d_max)
        elif self.kind == "resolution":
            if not 0 <= self.d_min <= self.d_max < 1:
                raise ConfigError("need 0 <= d_min <= d_max < 1", "drop")
            if self.s_min >= self.s_max:
                raise ConfigError("need s_min < s_max", "drop")
        elif self.kind == "scheduled":
            if not 0 <= self.rho_min <= self.rho_max < 1:
                raise ConfigError("need 0 <= rho_min <= rho_max < 1", "drop")
            if self.tau == 0:
                raise ConfigError("tau must be non-zero", "drop.tau")
        else:
            raise ConfigError(f"unknown drop policy {self.kind!r}", "drop.kind")

    def sample(self, rng, seq_len=None, images_seen=0) -> float:
        if self.kind == "constant":
            return self.rate
        if self.kind == "beta":
            return float(beta_drop_rate(self.d_mu, self.d_max, rng))
        if self.kind == "resolution":
            s = min(max(seq_len, self.s_min), self.s_max)
            return resolution_dependent_rate(s, self.d_min, self.d_max, self.s_min, self.s_max, rng)
        return float(scheduled_rate(images_seen, self.rho_min, self.rho_max, self.mu, self.tau))


def kept_count(n, d):
    """Tokens surviving a drop rate ``d``: round-half-even of ``(1 - d) n``, at least one."""
    return max(1, round((1 - d) * n))


def apply_token_drop(example, d, rng):
    """Keep a uniform random subset of ``kept_count`` tokens, in their original order."""
    if not 0 <= d < 1:
        raise ValueError(f"drop rate must be in [0, 1), got {d}")
    n = len(example)
    keep = kept_count(n, d)
    if keep == n:
        return example
    index = np.sort(rng.choice(n, size=keep, replace=False))
    return example.subset(index)
