"""Adaptive freezing of projection matrices.

Each eligible projection matrix (PM) carries a pair of exponential moving
averages: a smoothed gradient magnitude and a smoothed uncertainty, i.e. the
deviation of the current magnitude from its smoothed value. The freezing score
is the mean of their elementwise product. A cubic schedule sets what fraction
of PMs must be frozen at each step; the controller meets that target by
freezing the lowest-scoring PMs across the whole model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import MATRICES, SITES, AdapterLayer
from .errors import ConfigError, ContractError, DimensionError, ScheduleError

GRAD_OVER_PARAM_EPS = 1e-8


class ScoreVariant(str, enum.Enum):
    ABS_GRAD = "abs_grad"
    ABS_PARAM_TIMES_GRAD = "abs_param_times_grad"
    ABS_GRAD_OVER_PARAM = "abs_grad_over_param"

    @classmethod
    def parse(cls, value) -> ScoreVariant:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown score variant {value!r}; expected one of {names}") from None


class Pairing(str, enum.Enum):
    INDEPENDENT = "independent"
    SIMULTANEOUS = "simultaneous"

    @classmethod
    def parse(cls, value) -> Pairing:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown pairing {value!r}; expected independent or simultaneous") from None


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def score_variant_eval(param, grad, variant: ScoreVariant | str = ScoreVariant.ABS_GRAD) -> np.ndarray:
    """Per-element sensitivity: ``|g|``, ``|p * g|`` or ``|g| / (|p| + 1e-8)``."""
    p, g = _array(param), _array(grad)
    if p.shape != g.shape:
        raise DimensionError(f"param shape {p.shape} does not match grad shape {g.shape}")
    variant = ScoreVariant.parse(variant)
    if variant is ScoreVariant.ABS_GRAD:
        return np.abs(g)
    if variant is ScoreVariant.ABS_PARAM_TIMES_GRAD:
        return np.abs(p * g)
    return np.abs(g) / (np.abs(p) + GRAD_OVER_PARAM_EPS)


@dataclass
class ScoreState:
    ema_i: np.ndarray
    ema_u: np.ndarray
    beta1: float = 0.85
    beta2: float = 0.95
    step: int = 0

    @classmethod
    def zeros(cls, shape, beta1: float = 0.85, beta2: float = 0.95) -> ScoreState:
        for name, beta in (("beta1", beta1), ("beta2", beta2)):
            if not 0.0 < beta < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {beta}")
        return cls(np.zeros(shape), np.zeros(shape), beta1, beta2)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ema_i.shape


def update_score_state(state: ScoreState, grad, param, variant: ScoreVariant | str = ScoreVariant.ABS_GRAD) -> None:
    g = _array(grad)
    if g.shape != state.shape:
        raise DimensionError(f"grad shape {g.shape} does not match tracked shape {state.shape}")
    sensitivity = score_variant_eval(param, g, variant)
    state.ema_i = state.beta1 * state.ema_i + (1.0 - state.beta1) * sensitivity
    uncertainty = np.abs(sensitivity - state.ema_i)
    state.ema_u = state.beta2 * state.ema_u + (1.0 - state.beta2) * uncertainty
    state.step += 1


def freezing_score(state: ScoreState) -> float:
    if state.step == 0:
        raise ContractError("freezing score requested before any update")
    return float(np.mean(state.ema_i * state.ema_u))


@dataclass(frozen=True)
class FreezeSchedule:
    """Cubic ramp from 0 at ``t_i`` to 1 at ``total_steps - t_f``."""

    t_i: int
    t_f: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.t_i < self.total_steps - self.t_f <= self.total_steps:
            raise ScheduleError(
                f"freezing schedule needs 0 <= t_i < T - t_f <= T, got t_i={self.t_i}, "
                f"t_f={self.t_f}, T={self.total_steps}"
            )

    @property
    def plateau_start(self) -> int:
        return self.total_steps - self.t_f

    @classmethod
    def from_epochs(cls, t_i_epochs: float, t_f_epochs: float, epochs: int, steps_per_epoch: int) -> FreezeSchedule:
        return cls(
            t_i=int(round(t_i_epochs * steps_per_epoch)),
            t_f=int(round(t_f_epochs * steps_per_epoch)),
            total_steps=epochs * steps_per_epoch,
        )


def freeze_fraction(t: int, schedule: FreezeSchedule) -> float:
    t_i, end = schedule.t_i, schedule.plateau_start
    if t < t_i:
        return 0.0
    if t >= end:
        return 1.0
    progress = (t - t_i) / (end - t_i)
    return 1.0 - (1.0 - progress) ** 3


def target_frozen(fraction: float, n_eligible: int) -> int:
    return math.floor(fraction * n_eligible)


@dataclass(frozen=True)
class PMHandle:
    """Identity of one projection matrix; the owning layer rides along uncompared."""

    block: int
    site: str
    matrix: str
    layer: AdapterLayer = field(compare=False, hash=False, repr=False)

    @property
    def order_key(self) -> tuple[int, int, int]:
        return (self.block, SITES.index(self.site), MATRICES.index(self.matrix))

    @property
    def label(self) -> str:
        return f"block{self.block}.{self.site}.{self.matrix}"

    @property
    def tensor(self):
        return self.layer.pm(self.matrix)


@dataclass(frozen=True)
class FreezeEvent:
    step: int
    block: int
    site: str
    matrix: str
    score: float


class FreezeController:
    """Tracks scores for eligible PMs and freezes them on schedule.

    With ``pairing="simultaneous"`` the A/B matrices of one adapter form a single
    unit ranked by the mean of their two scores; the schedule target then counts
    units instead of matrices.
    """

    def __init__(
        self,
        handles,
        schedule: FreezeSchedule,
        variant: ScoreVariant | str = ScoreVariant.ABS_GRAD,
        pairing: Pairing | str = Pairing.INDEPENDENT,
        beta1: float = 0.85,
        beta2: float = 0.95,
    ):
        self.schedule = schedule
        self.variant = ScoreVariant.parse(variant)
        self.pairing = Pairing.parse(pairing)
        self.handles: list[PMHandle] = sorted(handles, key=lambda h: h.order_key)
        self.states = {h: ScoreState.zeros(h.tensor.shape, beta1, beta2) for h in self.handles}
        self.frozen: dict[PMHandle, int] = {}
        self.last_score: dict[PMHandle, float] = {}
        self.events: list[FreezeEvent] = []

        units: dict[tuple, list[PMHandle]] = {}
        for h in self.handles:
            key = (h.block, h.site) if self.pairing is Pairing.SIMULTANEOUS else (h.block, h.site, h.matrix)
            units.setdefault(key, []).append(h)
        self.units = list(units.values())

    @property
    def n_eligible(self) -> int:
        """Number of freezing units: matrices, or A/B pairs when freezing simultaneously."""
        return len(self.units)

    @property
    def n_frozen_units(self) -> int:
        return sum(1 for unit in self.units if unit[0] in self.frozen)

    def update_scores(self) -> None:
        """Fold the current gradients of all unfrozen tracked PMs into their EMAs."""
        for h in self.handles:
            if h in self.frozen:
                continue
            tensor = h.tensor
            grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            state = self.states[h]
            update_score_state(state, grad, tensor.data, self.variant)
            self.last_score[h] = freezing_score(state)

    def unit_score(self, unit: list[PMHandle]) -> float:
        return float(np.mean([freezing_score(self.states[h]) for h in unit]))

    def apply_freezing(self, t: int) -> list[PMHandle]:
        """Freeze lowest-scoring units until ``floor(r(t) * N)`` are frozen."""
        target = target_frozen(freeze_fraction(t, self.schedule), self.n_eligible)
        deficit = target - self.n_frozen_units
        if deficit <= 0:
            return []
        candidates = [u for u in self.units if u[0] not in self.frozen]
        ranked = sorted(candidates, key=lambda u: (self.unit_score(u), u[0].order_key))
        newly: list[PMHandle] = []
        for unit in ranked[:deficit]:
            score = self.unit_score(unit)
            for h in unit:
                h.layer.freeze(h.matrix, t)
                self.frozen[h] = t
                self.events.append(FreezeEvent(t, h.block, h.site, h.matrix, score))
                newly.append(h)
        return newly
