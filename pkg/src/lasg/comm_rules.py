"""Upload trigger conditions for lazily aggregated SGD.

Every rule compares an innovation measure (left-hand side) against the same
threshold built from the last D squared model steps::

    rhs = (1 / M^2) * sum_{d=1..D} c_d * ||theta^{k+1-d} - theta^{k-d}||^2

A check returns True when the worker may *skip* its upload; ties skip.
"""
import enum
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from lasg.errors import ConfigError


class Variant(str, enum.Enum):
    SYNC_SGD = "SyncSGD"
    LAG_WK = "LagWK"
    LASG_WK1 = "LasgWK1"
    LASG_WK2 = "LasgWK2"
    LASG_PS = "LasgPS"
    LASG_PSE = "LasgPSE"
    LOCAL_SGD = "LocalSGD"

    @property
    def worker_side(self):
        return self in (Variant.LAG_WK, Variant.LASG_WK1, Variant.LASG_WK2)

    @property
    def server_side(self):
        return self in (Variant.LASG_PS, Variant.LASG_PSE)

    @property
    def lazy(self):
        return self.worker_side or self.server_side


@dataclass(frozen=True)
class RuleConfig:
    variant: Variant
    D: int = 1
    c: tuple = (0.0,)
    M: int = 1
    H: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "c", tuple(float(x) for x in self.c))
        if self.D < 1:
            raise ConfigError("max delay D must be >= 1")
        if self.H < 1:
            raise ConfigError("averaging period H must be >= 1")
        if self.M < 1:
            raise ConfigError("worker count M must be >= 1")
        if len(self.c) != self.D:
            raise ConfigError(f"c must have exactly D={self.D} entries, got {len(self.c)}")
        if any(not (x >= 0 and math.isfinite(x)) for x in self.c):
            raise ConfigError("all c_d must be finite and nonnegative")

    @classmethod
    def with_padding(cls, variant, D, c, M, H=1):
        """Build a config from a c prefix, padding with zeros up to D."""
        c = tuple(c)
        if len(c) > D:
            raise ConfigError(f"c has {len(c)} entries but D={D}")
        return cls(variant, D, c + (0.0,) * (D - len(c)), M, H)


def recipe_c(eta, M, D, active=10, scale=0.1):
    """Experimental recipe: c_d = scale / eta^2 / M^2 for d <= active, else 0."""
    value = scale / eta**2 / M**2
    return tuple(value if d < active else 0.0 for d in range(D))


class StepHistory:
    """The last D squared step norms, most recent first.

    Starts at all zeros, i.e. the iterates before theta^0 all equal theta^0.
    """

    def __init__(self, D):
        self._steps = deque([0.0] * D, maxlen=D)

    def push(self, sq_step):
        if not sq_step >= 0:
            raise ValueError("squared step norm must be nonnegative")
        self._steps.appendleft(float(sq_step))

    def values(self):
        return np.fromiter(self._steps, dtype=np.float64, count=len(self._steps))

    def __len__(self):
        return len(self._steps)


def rhs_threshold(history, config):
    """Shared right-hand side of all trigger conditions."""
    steps = history.values() if isinstance(history, StepHistory) else np.asarray(history, float)
    if len(steps) != config.D:
        raise ValueError(f"history has {len(steps)} entries, expected D={config.D}")
    return float(np.dot(config.c, steps)) / config.M**2


def sq_dist(a, b):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(diff @ diff)


def check_lag_wk(g_fresh, g_stale, rhs):
    """Naive stochastic LAG: fresh vs last uploaded gradient (different samples)."""
    return sq_dist(g_fresh, g_stale) <= rhs


def check_wk1(delta_fresh, delta_stale, rhs):
    """Snapshot-corrected gradient differences, fresh vs stored at last upload."""
    return sq_dist(delta_fresh, delta_stale) <= rhs


def check_wk2(g_fresh, g_stale_iterate_same_sample, rhs):
    """Gradients at the current and last-upload iterates, on the same sample."""
    return sq_dist(g_fresh, g_stale_iterate_same_sample) <= rhs


def check_model_innovation(L, theta_now, theta_stale, rhs):
    """Server-side rule: L^2 ||theta^k - theta^{k-tau}||^2 <= rhs."""
    if L < 0:
        raise ValueError("smoothness constant must be nonnegative")
    return L * L * sq_dist(theta_now, theta_stale) <= rhs


def update_smoothness_estimate(est, g_fresh, g_stale_iterate_same_sample,
                               theta_now, theta_stale, tol=1e-12):
    """Running max of observed gradient-difference / iterate-difference ratios."""
    step = math.sqrt(sq_dist(theta_now, theta_stale))
    if step < tol:
        return est
    ratio = math.sqrt(sq_dist(g_fresh, g_stale_iterate_same_sample)) / step
    return max(est, ratio)


def validate_config(config, schedule, L, M=None, quantized=False):
    """Warnings for each convergence-theorem constraint the config violates.

    Constant-step runs are checked against c_d <= min(1/(12 D eta^2),
    sqrt(M) L^2 / 18); strongly convex schedules use 1/(24 D eta_0^2) for the
    first bound; quantized constant-step runs use 1/(16 D eta^2) and
    sqrt(M) L^2 / 24. Only the rules covered by the theorems are checked.
    """
    covered = (Variant.LASG_WK1, Variant.LASG_WK2, Variant.LASG_PS)
    if config.variant not in covered:
        return []
    M = config.M if M is None else M
    c_max = max(config.c)
    if c_max == 0:
        return []
    D = config.D
    eta0 = schedule.eta_at(0)
    if quantized:
        step_bound, step_text = 1.0 / (16 * D * eta0**2), "1/(16 D eta^2)"
        smooth_bound, smooth_text = math.sqrt(M) * L**2 / 24, "sqrt(M) L^2/24"
        label = "quantized"
    elif schedule.kind == "strongly_convex":
        step_bound, step_text = 1.0 / (24 * D * eta0**2), "1/(24 D eta_0^2)"
        smooth_bound, smooth_text = math.sqrt(M) * L**2 / 18, "sqrt(M) L^2/18"
        label = "strongly convex"
    else:
        step_bound, step_text = 1.0 / (12 * D * eta0**2), "1/(12 D eta^2)"
        smooth_bound, smooth_text = math.sqrt(M) * L**2 / 18, "sqrt(M) L^2/18"
        label = "nonconvex"
    warnings = []
    if c_max > step_bound:
        warnings.append(
            f"{label} bound: max c_d = {c_max:.6g} exceeds {step_text} = {step_bound:.6g}")
    if c_max > smooth_bound:
        warnings.append(
            f"{label} bound: max c_d = {c_max:.6g} exceeds {smooth_text} = {smooth_bound:.6g}")
    return warnings
