"""Injection timing and the control-ratio guarantee.

With a system prompt of ``s_p`` tokens and ``s_ice``-token control text added
every ``t`` tokens of context, the control share of an ``l``-token context is

    (s_p + floor(l / t) * s_ice) / l

whose continuous form ``s_p / l + s_ice / t`` tends to ``s_ice / t``. Because
``floor(l / t) > l / t - 1`` the measured share never drops below
``s_ice / t - s_ice / l`` once ``l >= t``.

All arithmetic here is exact (:class:`fractions.Fraction`); callers convert
to float at the reporting edge.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from typing import Iterable, Union

from ice_gateway.errors import IceError, PolicyInvalid
from ice_gateway.transcript import EmptyTranscript, Visibility

logger = logging.getLogger(__name__)

Rational = Union[int, float, str, Decimal, Fraction]


class Infeasible(IceError):
    """No integer period longer than the control text reaches the target ratio."""


class BoundUndefined(IceError):
    """Fewer than ``t`` tokens of context: no injection is guaranteed yet."""


class Scope(str, enum.Enum):
    CONVERSATION = "conversation"
    CHAIN_OF_THOUGHT = "chain_of_thought"


def as_fraction(value: Rational) -> Fraction:
    """Exact rational for ``value``; floats go through ``str`` so 0.05 means 1/20."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"not a finite number: {value}")
        return Fraction(str(value))
    return Fraction(value)


def predicted_ratio(s_p: int, s_ice: int, t: int, l: int) -> Fraction:
    if l <= 0 or t <= 0:
        raise ValueError("predicted_ratio needs l > 0 and t > 0")
    return Fraction(s_p, l) + Fraction(s_ice, t)


def asymptotic_q(s_ice: int, t: int) -> Fraction:
    if t <= 0:
        raise ValueError("asymptotic_q needs t > 0")
    return Fraction(s_ice, t)


def solve_period(target_q: Rational, s_ice: int) -> int:
    """Largest period ``t`` with ``s_ice / t >= target_q``.

    Raises :class:`Infeasible` when that period would not exceed ``s_ice``,
    since a control text at least as long as its period re-triggers itself.
    """
    q = as_fraction(target_q)
    if not 0 < q < 1:
        raise ValueError(f"target_q must lie in (0, 1), got {q}")
    if s_ice < 1:
        raise ValueError("s_ice must be at least 1 token")
    t = math.floor(Fraction(s_ice) / q)
    if t <= s_ice:
        raise Infeasible(f"q={q} with s_ice={s_ice} needs t <= {t}, not longer than the control text")
    return t


def guaranteed_lower_bound(s_ice: int, t: int, l: int) -> Fraction:
    if t <= 0:
        raise ValueError("t must be positive")
    if l < t:
        raise BoundUndefined(f"context of {l} tokens is shorter than one period ({t})")
    return Fraction(s_ice, t) - Fraction(s_ice, l)


def ice_overhead(s_ice: int, t: int, l: int) -> Fraction:
    """Share of an ``l``-token context spent on control text after ``floor(l / t)`` injections."""
    if l <= 0 or t <= 0:
        raise ValueError("ice_overhead needs l > 0 and t > 0")
    return Fraction((l // t) * s_ice, l)


@dataclass(frozen=True)
class InjectionPlan:
    period_t: int
    injections_so_far: int = 0
    ice_tokens_so_far: int = 0
    min_ice_tokens: int | None = None

    @property
    def next_trigger_at(self) -> int:
        return (self.injections_so_far + 1) * self.period_t


def should_inject(plan: InjectionPlan, total_tokens_now: int) -> bool:
    return total_tokens_now >= plan.next_trigger_at


def record_injection(plan: InjectionPlan, actual_ice_tokens: int) -> InjectionPlan:
    low = actual_ice_tokens if plan.min_ice_tokens is None else min(plan.min_ice_tokens, actual_ice_tokens)
    return replace(
        plan,
        injections_so_far=plan.injections_so_far + 1,
        ice_tokens_so_far=plan.ice_tokens_so_far + actual_ice_tokens,
        min_ice_tokens=low,
    )


@dataclass(frozen=True)
class IcePolicy:
    """Operator parameters for one gateway.

    ``ice_source`` names the selection strategy over the control store; it is
    kept opaque here so the scheduler stays free of store details. An empty
    ``scope`` disables injection entirely.
    """

    period_t: int
    nominal_s_ice: int
    target_q: Fraction | None = None
    scope: frozenset[Scope] = field(default_factory=lambda: frozenset({Scope.CONVERSATION}))
    visibility: Visibility = Visibility.HIDDEN
    ice_source: object = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "scope", frozenset(Scope(s) for s in self.scope))
        object.__setattr__(self, "visibility", Visibility(self.visibility))
        if self.target_q is not None:
            object.__setattr__(self, "target_q", as_fraction(self.target_q))
        if self.period_t < 1:
            raise PolicyInvalid("period t must be a positive number of tokens")
        if self.nominal_s_ice < 0:
            raise PolicyInvalid("s_ice must be nonnegative")
        if self.enabled and self.period_t <= self.nominal_s_ice:
            raise PolicyInvalid(
                f"period t={self.period_t} must exceed the control length s_ice={self.nominal_s_ice}"
            )
        if self.target_q is not None and Fraction(self.nominal_s_ice, self.period_t) < self.target_q:
            raise PolicyInvalid(
                f"s_ice/t = {self.nominal_s_ice}/{self.period_t} is below target q={self.target_q}"
            )

    @classmethod
    def for_target(cls, target_q: Rational, nominal_s_ice: int, **kwargs) -> IcePolicy:
        try:
            t = solve_period(target_q, nominal_s_ice)
        except (Infeasible, ValueError) as exc:
            raise PolicyInvalid(str(exc)) from exc
        return cls(period_t=t, nominal_s_ice=nominal_s_ice, target_q=as_fraction(target_q), **kwargs)

    @property
    def enabled(self) -> bool:
        return bool(self.scope)

    @property
    def asymptotic_q(self) -> Fraction:
        return asymptotic_q(self.nominal_s_ice if self.enabled else 0, self.period_t)

    def new_plan(self) -> InjectionPlan:
        return InjectionPlan(self.period_t)

    def check_lengths(self, lengths: Iterable[int]) -> None:
        """Validate the token lengths of the control texts this policy may inject.

        A text as long as the period would keep re-triggering; that is fatal.
        A text more than 10% off the nominal length only weakens the exact
        ratio identity, so it is logged.
        """
        if not self.enabled:
            return
        for n in lengths:
            if n >= self.period_t:
                raise PolicyInvalid(f"control text of {n} tokens is not shorter than t={self.period_t}")
            if abs(n - self.nominal_s_ice) * 10 > self.nominal_s_ice:
                logger.warning(
                    "control text of %d tokens differs from nominal s_ice=%d by more than 10%%",
                    n, self.nominal_s_ice,
                )


@dataclass(frozen=True)
class RatioReport:
    measured_ratio: Fraction
    asymptotic_q: Fraction
    lower_bound: Fraction | None
    overhead: Fraction
    total_tokens: int
    ice_injections: int

    @property
    def bound_holds(self) -> bool:
        return self.lower_bound is None or self.measured_ratio >= self.lower_bound

    def to_json(self) -> dict:
        return {
            "measured_ratio": float(self.measured_ratio),
            "asymptotic_q": float(self.asymptotic_q),
            "lower_bound": None if self.lower_bound is None else float(self.lower_bound),
            "overhead": float(self.overhead),
            "total_tokens": self.total_tokens,
            "ice_injections": self.ice_injections,
        }


def effective_s_ice(ice_lengths: Iterable[int], nominal_s_ice: int) -> int:
    """Control length the guarantee is stated for: the shortest injected text, else nominal."""
    lengths = list(ice_lengths)
    return min(lengths) if lengths else nominal_s_ice


def ratio_report(total_tokens: int, control_tokens: int, ice_lengths: Iterable[int],
                 period_t: int, nominal_s_ice: int) -> RatioReport:
    """Report for a context of ``total_tokens`` holding ``control_tokens`` of control text.

    Pass ``nominal_s_ice=0`` for a policy that never injects.
    """
    if total_tokens <= 0:
        raise EmptyTranscript("no tokens to report on")
    lengths = list(ice_lengths)
    s_ice = effective_s_ice(lengths, nominal_s_ice)
    try:
        bound = guaranteed_lower_bound(s_ice, period_t, total_tokens)
    except BoundUndefined:
        bound = None
    return RatioReport(
        measured_ratio=Fraction(control_tokens, total_tokens),
        asymptotic_q=asymptotic_q(s_ice, period_t),
        lower_bound=bound,
        overhead=Fraction(sum(lengths), total_tokens),
        total_tokens=total_tokens,
        ice_injections=len(lengths),
    )
