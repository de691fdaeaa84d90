"""Closed-form parameter and FLOPs accounting for adapted transformer encoders.

Conventions:

* parameter counts cover adapter components only (projection matrices and
  vectors); the classification head and the frozen backbone are excluded;
* one multiply-add is 2 FLOPs; elementwise scalings and adds count 1 per element;
* the backbone always propagates input gradients, never weight gradients;
* a projection matrix contributes weight-gradient FLOPs only while unfrozen;
* attention score/context products and nonlinearities are reported separately
  by :func:`auxiliary_flops` and are not part of the ratios.

Frozen-state mappings are keyed ``(block, site, matrix)``. A value may be a
bool or a fraction in ``[0, 1]`` (the expected frozen share of that matrix).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .adapters import MATRICES, SITES, AdapterMode, site_group
from .errors import ContractError
from .freezing import FreezeSchedule, freeze_fraction, target_frozen

Key = tuple[int, str, str]

HEATMAP_SITE_LABELS = {
    "q": "q",
    "k": "k",
    "v": "v",
    "o": "o",
    "ffn_inter": "inter",
    "ffn_out": "out",
}


@dataclass(frozen=True)
class ShapeSpec:
    n_blocks: int
    d_model: int
    d_ffn: int
    rank: int
    mode: AdapterMode = AdapterMode.AFLORA
    pm_trainable_sites: tuple[str, ...] = ("ffn",)
    sites: tuple[str, ...] = SITES
    seq_len: int = 1
    batch: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", AdapterMode.parse(self.mode))
        object.__setattr__(self, "pm_trainable_sites", tuple(self.pm_trainable_sites))

    @classmethod
    def from_model_config(cls, config, seq_len: int = 1, batch: int = 1) -> ShapeSpec:
        return cls(
            n_blocks=config.n_blocks,
            d_model=config.d_model,
            d_ffn=config.d_ffn,
            rank=config.rank,
            mode=config.mode,
            pm_trainable_sites=tuple(config.pm_trainable_sites),
            seq_len=seq_len,
            batch=batch,
        )

    @classmethod
    def deberta_v3_base(cls, mode, rank: int, pm_trainable_sites=("ffn",), seq_len: int = 256, batch: int = 64):
        return cls(12, 768, 3072, rank, mode, tuple(pm_trainable_sites), SITES, seq_len, batch)

    def site_dims(self, site: str) -> tuple[int, int]:
        if site == "ffn_inter":
            return self.d_model, self.d_ffn
        if site == "ffn_out":
            return self.d_ffn, self.d_model
        return self.d_model, self.d_model

    def pm_size(self, site: str, matrix: str) -> int:
        d_in, d_out = self.site_dims(site)
        return self.rank * (d_in if matrix == "A" else d_out)

    def is_eligible(self, site: str) -> bool:
        return self.mode is AdapterMode.AFLORA and site_group(site) in self.pm_trainable_sites

    def keys(self) -> list[Key]:
        return [(b, s, m) for b in range(self.n_blocks) for s in self.sites for m in MATRICES]

    def eligible_keys(self) -> list[Key]:
        return [k for k in self.keys() if self.is_eligible(k[1])]


def default_frozen(spec: ShapeSpec) -> dict[Key, bool]:
    """Frozen flags at step 0 for the shape's mode."""
    if spec.mode is AdapterMode.LORA:
        return {k: False for k in spec.keys()}
    if spec.mode is AdapterMode.ELORA:
        return {k: True for k in spec.keys()}
    return {k: not spec.is_eligible(k[1]) for k in spec.keys()}


def frozen_flags(model) -> dict[Key, bool]:
    return {
        (block, site, m): layer.is_frozen(m)
        for block, sites in enumerate(model.blocks)
        for site, layer in sites.items()
        for m in MATRICES
    }


def _frozen_share(spec: ShapeSpec, frozen: Mapping | None, key: Key):
    if spec.mode is AdapterMode.LORA:
        return 0
    if spec.mode is AdapterMode.ELORA or not spec.is_eligible(key[1]):
        return 1
    if frozen is None:
        return 0
    value = frozen.get(key, frozen.get((key[1], key[2]), frozen.get(key[1], 0)))
    return Fraction(value) if isinstance(value, float) else int(value)


def analytic_param_count(spec: ShapeSpec, frozen_pm_fraction: Mapping | None = None) -> int:
    """Trainable adapter parameters, head excluded.

    ``frozen_pm_fraction`` may be keyed ``(block, site, matrix)``, ``(site, matrix)``
    or ``site`` and gives the frozen share of eligible projection matrices.
    """
    total = Fraction(0)
    for block, site, matrix in spec.keys():
        share = _frozen_share(spec, frozen_pm_fraction, (block, site, matrix))
        total += (1 - Fraction(share)) * spec.pm_size(site, matrix)
    if spec.mode.has_vectors:
        for site in spec.sites:
            total += spec.n_blocks * (spec.rank + spec.site_dims(site)[1])
    return int(round(total))


def _site_flops(spec: ShapeSpec, site: str, direction: str, share_a, share_b):
    d_in, d_out = spec.site_dims(site)
    r = spec.rank
    backbone = 2 * d_in * d_out
    if r == 0:
        return backbone
    vectors = spec.mode.has_vectors
    if direction == "forward":
        scalings = r + 2 * d_out if vectors else d_out
        return backbone + 2 * r * d_in + 2 * r * d_out + scalings
    if direction != "backward":
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    input_grads = backbone + 2 * r * d_out + 2 * r * d_in + d_in
    vector_terms = 2 * (r + d_out) if vectors else 0
    weight_grads = (1 - share_a) * 2 * r * d_in + (1 - share_b) * 2 * r * d_out
    return input_grads + vector_terms + weight_grads


def adapter_flops(spec: ShapeSpec, frozen: Mapping | None = None, direction: str = "forward"):
    """Per-token FLOPs over all adapted linear sites.

    ``frozen=None`` uses the mode's step-0 state. Returns an ``int`` whenever the
    frozen shares are all whole.
    """
    total = 0
    for block in range(spec.n_blocks):
        for site in spec.sites:
            share_a = _frozen_share(spec, frozen, (block, site, "A"))
            share_b = _frozen_share(spec, frozen, (block, site, "B"))
            total += _site_flops(spec, site, direction, share_a, share_b)
    return int(total) if Fraction(total).denominator == 1 else float(total)


def weight_grad_flops(spec: ShapeSpec, key: Key) -> int:
    """Per-token weight-gradient FLOPs saved by freezing one projection matrix."""
    return 2 * spec.pm_size(key[1], key[2])


def _trace_steps(spec: ShapeSpec, freeze_trace) -> dict[Key, int]:
    if isinstance(freeze_trace, Mapping):
        return {tuple(k): int(v) for k, v in freeze_trace.items()}
    return {(e.block, e.site, e.matrix): int(e.step) for e in freeze_trace}


def total_training_flops(
    spec: ShapeSpec,
    schedule: FreezeSchedule | None = None,
    freeze_trace=None,
    total_steps: int | None = None,
):
    """Forward plus backward FLOPs summed over all steps.

    A PM with freeze step ``s`` counts as frozen for steps ``t >= s``. Without a
    trace, the analytic frozen share ``floor(r(t) N) / N`` is applied uniformly to
    the eligible matrices.
    """
    if total_steps is None:
        if schedule is None:
            raise ContractError("total_steps or a schedule is required")
        total_steps = schedule.total_steps
    tokens = spec.seq_len * spec.batch
    base = adapter_flops(spec, None, "forward") + adapter_flops(spec, None, "backward")
    eligible = spec.eligible_keys()
    if not eligible:
        return total_steps * tokens * base

    if freeze_trace is not None:
        steps = _trace_steps(spec, freeze_trace)
        eligible_set = set(eligible)
        deadline = schedule.plateau_start if schedule is not None else total_steps
        for key, s in steps.items():
            if key not in eligible_set:
                raise ContractError(f"freeze trace names {key}, which is not an eligible PM")
            if not 0 <= s < total_steps:
                raise ContractError(f"freeze step {s} for {key} lies outside [0, {total_steps})")
        missing = [k for k in eligible if k not in steps or steps[k] > deadline]
        if schedule is not None and missing:
            raise ContractError(f"{len(missing)} eligible PMs are not frozen by the plateau step {deadline}")
        saved = sum(weight_grad_flops(spec, k) * (total_steps - steps[k]) for k in steps)
        return tokens * (total_steps * base - saved)

    if schedule is None:
        raise ContractError("analytic accounting needs a schedule")
    pool = sum(weight_grad_flops(spec, k) for k in eligible)
    n = len(eligible)
    frozen_steps = sum(target_frozen(freeze_fraction(t, schedule), n) for t in range(total_steps))
    return float(tokens * (total_steps * base - Fraction(pool * frozen_steps, n)))


def average_trainable_params(records: Sequence) -> float:
    if not records:
        raise ContractError("cannot average an empty step stream")
    counts = [getattr(r, "trainable_param_count", r) for r in records]
    return math.fsum(counts) / len(counts)


def site_fraction_trace(freeze_events: Iterable, n_blocks: int, total_steps: int) -> list[dict]:
    """Per step, the share of blocks whose ``(site, matrix)`` PM has frozen."""
    by_step: dict[int, list] = {}
    for e in freeze_events:
        by_step.setdefault(int(e.step), []).append((e.site, e.matrix))
    current: dict[tuple[str, str], Fraction] = {}
    trace = []
    for t in range(total_steps):
        for key in by_step.get(t, ()):
            current[key] = current.get(key, Fraction(0)) + Fraction(1, n_blocks)
        trace.append(dict(current))
    return trace


def mapped_average_params(spec: ShapeSpec, fraction_trace: Sequence[Mapping]) -> float:
    """Average trainable parameters of ``spec`` when it follows a measured freezing trace."""
    if not fraction_trace:
        raise ContractError("empty fraction trace")
    counts = []
    for shares in fraction_trace:
        total = Fraction(0)
        for block, site, matrix in spec.keys():
            share = _frozen_share(spec, None, (block, site, matrix))
            if spec.is_eligible(site):
                share = shares.get((site, matrix), 0)
            total += (1 - Fraction(share)) * spec.pm_size(site, matrix)
        if spec.mode.has_vectors:
            total += sum(spec.n_blocks * (spec.rank + spec.site_dims(s)[1]) for s in spec.sites)
        counts.append(total)
    return float(sum(counts) / len(counts))


def auxiliary_flops(spec: ShapeSpec) -> dict[str, int]:
    """Per-token FLOPs outside the linear sites (forward only), reported apart from ratios."""
    n, d = spec.seq_len, spec.d_model
    return {
        "attention_products": spec.n_blocks * 4 * n * d,
        "softmax": spec.n_blocks * 5 * n,
        "gelu": spec.n_blocks * 8 * spec.d_ffn,
        "layer_norm": (2 * spec.n_blocks + 1) * 5 * d,
        "residual_adds": spec.n_blocks * 2 * d,
    }


def model_freeze_steps(model) -> dict[Key, int | None]:
    return {
        (block, site, m): layer.freeze_step(m)
        for block, sites in enumerate(model.blocks)
        for site, layer in sites.items()
        for m in MATRICES
    }


def heatmap_rows(pm_trainable_sites: Iterable[str]) -> list[tuple[str, str]]:
    """Rows shown in the freeze heatmap: FFN PMs always, attention PMs when they were trainable."""
    groups = set(pm_trainable_sites) | {"ffn"}
    return [(s, m) for s in SITES if site_group(s) in groups for m in MATRICES]


def freeze_heatmap(freeze_steps: Mapping[Key, int | None], n_blocks: int, rows=None):
    """Grid of freeze steps, rows ``site.matrix`` and one column per block.

    Returns ``(row_labels, grid)``; a PM that never froze is marked ``-1``.
    """
    rows = rows if rows is not None else heatmap_rows(())
    labels = [f"{HEATMAP_SITE_LABELS[s]}.{m}" for s, m in rows]
    grid = []
    for site, matrix in rows:
        row = []
        for block in range(n_blocks):
            step = freeze_steps.get((block, site, matrix))
            row.append(-1 if step is None else int(step))
        grid.append(row)
    return labels, grid


@dataclass
class CostReport:
    trainable_params_now: int
    avg_trainable_params: float
    fwd_flops_per_token: int
    bwd_input_flops_per_token: int
    bwd_weight_flops_per_token: int
    total_training_flops: float
    wall_time_seconds: float | None = None


def cost_report(spec: ShapeSpec, schedule=None, freeze_trace=None, total_steps=None, wall_time=None) -> CostReport:
    steps = total_steps or (schedule.total_steps if schedule else 0)
    bwd = adapter_flops(spec, None, "backward")
    weight = sum(
        weight_grad_flops(spec, k) * (1 - _frozen_share(spec, None, k)) for k in spec.keys()
    )
    eligible = spec.eligible_keys()
    now = analytic_param_count(spec)
    if eligible and freeze_trace is not None:
        frozen_at = _trace_steps(spec, freeze_trace)
        sizes = [
            now - sum(spec.pm_size(k[1], k[2]) for k, s in frozen_at.items() if s <= t) for t in range(steps)
        ]
        avg = average_trainable_params(sizes)
    elif eligible and schedule is not None:
        n = len(eligible)
        pool = sum(spec.pm_size(k[1], k[2]) for k in eligible)
        avg = float(
            sum(now - Fraction(pool * target_frozen(freeze_fraction(t, schedule), n), n) for t in range(steps)) / steps
        )
    else:
        avg = float(now)
    return CostReport(
        trainable_params_now=now,
        avg_trainable_params=avg,
        fwd_flops_per_token=adapter_flops(spec, None, "forward"),
        bwd_input_flops_per_token=bwd - weight,
        bwd_weight_flops_per_token=weight,
        total_training_flops=float(total_training_flops(spec, schedule, freeze_trace, steps or None)),
        wall_time_seconds=wall_time,
    )


def normalize(rows: list[dict], reference: int = 0) -> list[dict]:
    """Add ``normalized_params/flops/runtime`` columns relative to ``rows[reference]``."""
    ref = rows[reference]
    out = []
    for row in rows:
        row = dict(row)
        for column, source in (
            ("normalized_params", "avg_params"),
            ("normalized_flops", "total_flops"),
            ("normalized_runtime", "wall_seconds"),
        ):
            denom = ref.get(source)
            row[column] = (row[source] / denom) if denom else None
        out.append(row)
    return out
