"""Epoch-driven update-rate controllers.

Rates are packets per second, durations are nanoseconds. Every policy reacts
once per epoch: it sees the epoch's average age and average backlog together
with the current RTT / inter-ACK estimates and picks the rate and length of
the next epoch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

NS_PER_S = 1_000_000_000


class PolicyError(ValueError):
    pass


class InitAbort(RuntimeError):
    """Raised when the initialization phase never got an ACK back."""


class PolicyKind(str, enum.Enum):
    FIXED = "fixed"
    LAZY = "lazy"
    ACP = "acp"
    ACP_PLUS = "acp+"
    ACP_PLUS_MOD = "acp+mod"

    @property
    def is_acp_plus(self) -> bool:
        return self in (PolicyKind.ACP_PLUS, PolicyKind.ACP_PLUS_MOD)

    @property
    def uses_table(self) -> bool:
        return self in (PolicyKind.ACP, PolicyKind.ACP_PLUS, PolicyKind.ACP_PLUS_MOD)


# (lo, hi) multipliers around the previous rate
CLAMP_BOUNDS = {
    PolicyKind.ACP_PLUS: (0.75, 1.25),
    PolicyKind.ACP_PLUS_MOD: (0.9, 1.1),
}


class ActionKind(str, enum.Enum):
    INC = "INC"
    DEC = "DEC"
    MDEC = "MDEC"


class Action(NamedTuple):
    kind: ActionKind
    gamma: int = 0

    def __str__(self) -> str:
        if self.kind is ActionKind.MDEC:
            return f"MDEC({self.gamma})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "Action":
        if text.startswith("MDEC(") and text.endswith(")"):
            return cls(ActionKind.MDEC, int(text[5:-1]))
        return cls(ActionKind(text))


INC = Action(ActionKind.INC)
DEC = Action(ActionKind.DEC)


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind = PolicyKind.ACP
    kappa: float = 0.1
    epoch_multiplier: int = 30
    clamp_lo: Optional[float] = None  # None -> per-kind default
    clamp_hi: Optional[float] = None
    ewma_alpha: float = 0.125
    lambda_min: float = 0.1
    lambda_max: float = 1000.0
    min_epoch_ns: int = 50_000_000
    fixed_rate: float = 10.0
    feedback: bool = False
    peak_age_threshold_ns: int = 200_000_000
    tie_positive: bool = True
    gamma_cap: int = 10
    loss_reorder_threshold: int = 3
    init_packets: int = 10
    init_spacing_ns: int = 100_000_000
    init_timeout_ns: int = 1_000_000_000
    init_retries: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kappa <= 0:
            raise PolicyError(f"kappa must be positive, got {self.kappa}")
        if self.epoch_multiplier <= 0:
            raise PolicyError(f"epoch_multiplier must be positive, got {self.epoch_multiplier}")
        if not 0 < self.lambda_min < self.lambda_max:
            raise PolicyError(f"need 0 < lambda_min < lambda_max, got [{self.lambda_min}, {self.lambda_max}]")
        if self.min_epoch_ns <= 0:
            raise PolicyError("min_epoch_ns must be positive")
        if self.fixed_rate <= 0:
            raise PolicyError("fixed_rate must be positive")
        if self.gamma_cap < 1:
            raise PolicyError("gamma_cap must be at least 1")
        if self.init_packets < 1 or self.init_retries < 0:
            raise PolicyError("init phase needs at least one packet and non-negative retries")
        if self.kind.is_acp_plus:
            lo, hi = self.clamp_bounds
            if not lo < 1.0 < hi:
                raise PolicyError(f"clamp bounds must satisfy lo < 1 < hi, got ({lo}, {hi})")

    @property
    def clamp_bounds(self) -> Optional[tuple[float, float]]:
        if not self.kind.is_acp_plus:
            return None
        lo, hi = CLAMP_BOUNDS[self.kind]
        return (self.clamp_lo if self.clamp_lo is not None else lo,
                self.clamp_hi if self.clamp_hi is not None else hi)

    @property
    def effective_kappa(self) -> float:
        # ACP+ fixes the step size at one packet
        return 1.0 if self.kind.is_acp_plus else self.kappa


@dataclass
class PolicyState:
    config: PolicyConfig
    lam: float = 0.0
    k: int = 0
    phase: str = "init"
    prev_avg_age: Optional[float] = None
    prev_avg_backlog: Optional[float] = None
    last_action: Optional[Action] = None
    gamma: int = 0
    target_backlog_change: float = 0.0


class Transition(NamedTuple):
    lam: float
    epoch_len: int
    action: Optional[Action]
    b_star: float
    clamped: bool
    delta_k: Optional[float]
    b_k: Optional[float]


def bound_rate(lam: float, lo: float, hi: float) -> float:
    return min(max(lam, lo), hi)


def init_phase(rtt_samples: Sequence[int], config: PolicyConfig = PolicyConfig()) -> tuple[float, float]:
    """Initial rate and RTT estimate from the init-phase round trips."""
    if not rtt_samples:
        raise InitAbort("no ACK received during the initialization phase")
    rtt_bar = sum(rtt_samples) / len(rtt_samples)
    lam = NS_PER_S / rtt_bar
    return bound_rate(lam, config.lambda_min, config.lambda_max), rtt_bar


def _positive(x: float, tie_positive: bool) -> bool:
    return x > 0 or (x == 0 and tie_positive)


def targets_increase(delta_k: float, b_k: float, tie_positive: bool = True) -> bool:
    """Decision table: raise the backlog iff age and backlog moved in opposite directions."""
    return _positive(delta_k, tie_positive) != _positive(b_k, tie_positive)


def decide_action(state: PolicyState, delta_k: float, b_k: float) -> Action:
    cfg = state.config
    if targets_increase(delta_k, b_k, cfg.tie_positive):
        return INC
    prev = state.last_action
    if prev is not None and prev.kind is not ActionKind.INC and _positive(b_k, cfg.tie_positive):
        # backlog refused to fall under the previous decrease
        gamma = prev.gamma + 1 if prev.kind is ActionKind.MDEC else 1
        return Action(ActionKind.MDEC, min(gamma, cfg.gamma_cap))
    return DEC


def target_backlog_change(action: Action, kappa: float, backlog: float) -> float:
    if backlog < 0:
        raise PolicyError(f"average backlog cannot be negative, got {backlog}")
    if action.kind is ActionKind.INC:
        return kappa
    if action.kind is ActionKind.DEC:
        return -kappa
    if action.gamma < 1:
        raise PolicyError(f"MDEC needs gamma >= 1, got {action.gamma}")
    return -(1.0 - 2.0 ** -action.gamma) * backlog


def next_lambda(
    config: PolicyConfig, z_bar: float, rtt_bar: float, b_star: float, lambda_prev: float
) -> tuple[float, bool]:
    """Rate for the next epoch, ``z_bar``/``rtt_bar`` in ns.

    Returns ``(lambda, clamped)``; ``clamped`` is set when the ACP+ band or the
    non-positive fallback engaged.
    """
    if z_bar <= 0 or rtt_bar <= 0 or lambda_prev <= 0:
        raise PolicyError("z_bar, rtt_bar and lambda_prev must be positive")
    kind = config.kind
    z_s = z_bar / NS_PER_S
    rtt_s = rtt_bar / NS_PER_S
    clamped = False
    if kind is PolicyKind.ACP:
        lam = 1.0 / z_s + b_star / min(rtt_s, z_s)
    elif kind.is_acp_plus:
        lam = 1.0 / z_s + b_star / rtt_s
        lo, hi = config.clamp_bounds
        if lam > hi * lambda_prev:
            lam, clamped = hi * lambda_prev, True
        elif lam < lo * lambda_prev:
            lam, clamped = lo * lambda_prev, True
    else:
        raise PolicyError(f"next_lambda does not apply to {kind.value}")
    if lam <= 0:
        return config.lambda_min, True
    return bound_rate(lam, config.lambda_min, config.lambda_max), clamped


def next_epoch_length(config: PolicyConfig, z_bar: float, rtt_bar: float, lam: float) -> int:
    m = config.epoch_multiplier
    if config.kind.is_acp_plus or config.kind is PolicyKind.FIXED:
        length = m * NS_PER_S / lam
    else:
        length = m * min(rtt_bar, z_bar)
    return max(int(math.ceil(length)), config.min_epoch_ns)


def lazy_epoch_end(rtt_bar: float) -> float:
    if rtt_bar <= 0:
        raise PolicyError("rtt_bar must be positive")
    return NS_PER_S / rtt_bar


def epoch_transition(
    state: PolicyState, avg_age: float, avg_backlog: float, rtt_bar: float, z_bar: float
) -> Transition:
    """Close epoch ``state.k`` and move the state to the next epoch.

    On the very first epoch there is no predecessor to difference against, so
    table-driven policies probe upward with ``b* = kappa``.
    """
    cfg = state.config
    kind = cfg.kind
    delta_k = b_k = None
    action = None
    b_star = 0.0
    clamped = False

    if kind is PolicyKind.FIXED:
        lam = state.lam
    elif kind is PolicyKind.LAZY:
        lam = bound_rate(lazy_epoch_end(rtt_bar), cfg.lambda_min, cfg.lambda_max)
    else:
        kappa = cfg.effective_kappa
        if state.prev_avg_age is None:
            action = INC
        else:
            delta_k = avg_age - state.prev_avg_age
            b_k = avg_backlog - state.prev_avg_backlog
            action = decide_action(state, delta_k, b_k)
        b_star = target_backlog_change(action, kappa, avg_backlog)
        lam, clamped = next_lambda(cfg, z_bar, rtt_bar, b_star, state.lam)
        state.last_action = action
        state.gamma = action.gamma
        state.target_backlog_change = b_star

    epoch_len = next_epoch_length(cfg, z_bar, rtt_bar, lam)
    state.prev_avg_age = avg_age
    state.prev_avg_backlog = avg_backlog
    state.lam = lam
    state.k += 1
    return Transition(lam, epoch_len, action, b_star, clamped, delta_k, b_k)
