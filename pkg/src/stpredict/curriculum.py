"""Sampling curricula: which frames feed the recurrence during training.

Two schedules cooperate over a rollout of T encode and K forecast positions:

- reverse scheduled sampling on encode positions: the probability eps_k of
  feeding the true frame starts low and RISES with the iteration count k,
  so early training forces the encoder to carry long-range dynamics through
  its own predictions;
- classic scheduled sampling on forecast positions: the probability eta_k
  of feeding the true frame starts at 1 and DECAYS, weaning the forecaster
  off the ground truth it will not have at inference.

Strategies bundle conventions: "standard" disables the encode-side
curriculum entirely, "rss_1" starts eps at 0.0, "rss_2" at 0.5. They share
one code path; only the schedule constants differ.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import ContractError

RSS_MODES = ("linear", "exponential", "sigmoid")
STRATEGIES = ("standard", "rss_1", "rss_2")


@dataclass
class RssSchedule:
    mode: str = "exponential"
    eps_start: float = 0.5
    eps_end: float = 1.0
    alpha_l: float = 1e-5    # linear: slope per iteration
    alpha_e: float = 4000.0  # exponential: time constant, iterations
    alpha_s: float = 1000.0  # sigmoid: transition width, iterations
    beta_s: float = 10000.0  # sigmoid: midpoint iteration

    def __post_init__(self):
        if self.mode not in RSS_MODES:
            raise ContractError(f"unknown rss mode {self.mode!r}")
        if not 0.0 <= self.eps_start <= self.eps_end <= 1.0:
            raise ContractError(f"need 0 <= eps_start <= eps_end <= 1, got "
                                f"{self.eps_start}, {self.eps_end}")
        if min(self.alpha_l, self.alpha_e, self.alpha_s) <= 0 or self.beta_s <= 0:
            raise ContractError("schedule factors must be positive")


@dataclass
class SsSchedule:
    eta_start: float = 1.0
    decay: float = 1e-4      # linear decay per iteration
    floor: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.floor <= self.eta_start <= 1.0:
            raise ContractError(f"need 0 <= floor <= eta_start <= 1, got "
                                f"{self.floor}, {self.eta_start}")
        if self.decay < 0:
            raise ContractError("decay must be >= 0")


def epsilon_at(s: RssSchedule, k: int) -> float:
    if k < 0:
        raise ContractError("iteration must be >= 0")
    if s.mode == "linear":
        return min(s.eps_start + s.alpha_l * k, s.eps_end)
    if s.mode == "exponential":
        return s.eps_end - (s.eps_end - s.eps_start) * math.exp(-k / s.alpha_e)
    z = (s.beta_s - k) / s.alpha_s
    if z > 60.0:
        # the sigmoid term is below 1e-26 here; avoid exp overflow
        return s.eps_start
    return s.eps_start + (s.eps_end - s.eps_start) / (1.0 + math.exp(z))


def eta_at(s: SsSchedule, k: int) -> float:
    if k < 0:
        raise ContractError("iteration must be >= 0")
    return max(s.floor, s.eta_start - s.decay * k)


def rss_for_budget(budget: int, mode: str = "exponential",
                   eps_start: float = 0.5, eps_end: float = 1.0) -> RssSchedule:
    """Schedule constants tuned so the curriculum is essentially finished by
    half the training budget (not values from any reference; see README)."""
    if budget < 2:
        raise ContractError("budget must be >= 2 iterations")
    half = budget / 2.0
    gap = max(eps_end - eps_start, 1e-6)
    # exponential: remaining gap at half budget is 1% of eps_end
    alpha_e = half / math.log(gap / max(0.01 * eps_end, 1e-9))
    return RssSchedule(mode=mode, eps_start=eps_start, eps_end=eps_end,
                       alpha_l=gap / half,
                       alpha_e=max(alpha_e, 1e-9),
                       alpha_s=max(budget / 20.0, 1e-9),
                       beta_s=budget / 4.0)


def ss_for_budget(budget: int, eta_start: float = 1.0,
                  floor: float = 0.0) -> SsSchedule:
    """Linear decay hitting the floor at half the training budget."""
    if budget < 2:
        raise ContractError("budget must be >= 2 iterations")
    return SsSchedule(eta_start=eta_start,
                      decay=(eta_start - floor) / (budget / 2.0),
                      floor=floor)


def strategy_eps_start(strategy: str) -> float:
    if strategy == "rss_1":
        return 0.0
    if strategy == "rss_2":
        return 0.5
    raise ContractError(f"no rss preset for strategy {strategy!r}")


@dataclass
class SamplingMask:
    """values[n, t-1] decides input position t: true = real frame X_t,
    false = previous prediction. Position 1 is always true; encode
    positions 2..T follow Bernoulli(eps), forecast positions T+1..T+K-1
    follow Bernoulli(eta)."""
    values: np.ndarray


def draw_mask(eps: float, eta: float, T: int, K: int, strategy: str,
              rng: Rng, n_seq: int = 1) -> SamplingMask:
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    if not 0.0 <= eps <= 1.0 or not 0.0 <= eta <= 1.0:
        raise ContractError(f"probabilities outside [0,1]: eps={eps}, eta={eta}")
    if T < 2 or K < 1:
        raise ContractError(f"need T >= 2 and K >= 1, got T={T}, K={K}")
    if n_seq < 1:
        raise ContractError("n_seq must be >= 1")
    values = np.ones((n_seq, T + K - 1), dtype=bool)
    if strategy != "standard":
        values[:, 1:T] = rng.split("encode").bernoulli(eps, (n_seq, T - 1))
    if K > 1:
        values[:, T:] = rng.split("forecast").bernoulli(eta, (n_seq, K - 1))
    return SamplingMask(values)
