"""Fine-tuning loop: forward, loss, backward, score update, freezing, AdamW step."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from . import accounting
from .errors import ConfigError, ContractError
from .freezing import FreezeController, FreezeEvent, FreezeSchedule, Pairing, ScoreVariant, freeze_fraction
from .model import TransformerModel, enumerate_pms, model_forward
from .tasks import Dataset
from .tensor import SeededRng, Tensor, backward, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-2
    clf_lr: float = 4e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_fraction: float = 0.06
    t_i_epochs: float = 1.0
    t_f_epochs: float | None = None
    score_beta1: float = 0.85
    score_beta2: float = 0.95
    score_variant: ScoreVariant = ScoreVariant.ABS_GRAD
    pairing: Pairing = Pairing.INDEPENDENT

    def __post_init__(self):
        self.score_variant = ScoreVariant.parse(self.score_variant)
        self.pairing = Pairing.parse(self.pairing)
        if self.t_f_epochs is None:
            self.t_f_epochs = 0.7 * self.epochs
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["score_variant"] = self.score_variant.value
        d["pairing"] = self.pairing.value
        return d


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    freeze_fraction: float
    n_frozen_pms: int
    trainable_param_count: int
    adapter_flops_this_step: int


@dataclass
class ExperimentReport:
    mode: str
    seed: int
    total_steps: int
    steps_per_epoch: int
    t_i: int | None
    t_f: int | None
    n_eligible: int
    head_params: int
    avg_trainable_params: float
    total_adapter_flops: int
    final_loss: float
    train_accuracy: float
    eval_accuracy: float | None
    records: list[StepRecord] = field(default_factory=list)
    freeze_events: list[FreezeEvent] = field(default_factory=list)
    config_hash: str = ""

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        d["freeze_events"] = [asdict(e) for e in self.freeze_events]
        d["frozen_fraction_trace"] = frozen_fraction_trace(self)
        return d


def frozen_fraction_trace(report: ExperimentReport) -> list[float]:
    """Per-step fraction of eligible PMs frozen after that step's freeze decision."""
    if report.n_eligible == 0:
        return [0.0] * len(report.records)
    return [r.n_frozen_pms / report.n_eligible for r in report.records]


def lr_at(step: int, total: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up from 0 to ``base_lr``, then linear decay to 0 at ``total``."""
    warmup = int(round(warmup_fraction * total))
    if step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0, total - step) / (total - warmup)


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Moment state is keyed by tensor identity; :meth:`forget` drops it when a
    tensor is frozen so that it can never be advanced again.
    """

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[int, dict] = {}

    def forget(self, tensor: Tensor) -> None:
        self.state.pop(id(tensor), None)

    def step(self, params: list[Tensor], lr: float) -> None:
        for p in params:
            if p.grad is None:
                raise ContractError(f"trainable parameter {p!r} has no gradient")
            st = self.state.setdefault(id(p), {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
            optimizer_step(p, p.grad, st, lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def optimizer_step(
    param: Tensor,
    grad: np.ndarray,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    if not param.requires_grad:
        return
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1 - beta2) * grad * grad
    m_hat = state["m"] / (1 - beta1**t)
    v_hat = state["v"] / (1 - beta2**t)
    if weight_decay:
        param.data -= lr * weight_decay * param.data
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def evaluate(model: TransformerModel, dataset: Dataset, batch_size: int = 256) -> float:
    """Argmax accuracy; records no graph and leaves gradients untouched."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            logits = model_forward(model, dataset.tokens[start : start + batch_size])
            correct += int((logits.data.argmax(axis=1) == dataset.labels[start : start + batch_size]).sum())
    return correct / len(dataset)


def build_schedule(config: TrainConfig, steps_per_epoch: int) -> FreezeSchedule:
    return FreezeSchedule.from_epochs(config.t_i_epochs, config.t_f_epochs, config.epochs, steps_per_epoch)


def train(
    model: TransformerModel,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
    on_step: Callable[[int, TransformerModel], None] | None = None,
) -> ExperimentReport:
    """Run the full loop. ``on_step(step, model)`` fires after each optimizer update."""
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total = config.epochs * steps_per_epoch

    handles = [e.handle for e in enumerate_pms(model) if e.eligible]
    controller = None
    schedule = None
    if handles:
        schedule = build_schedule(config, steps_per_epoch)
        controller = FreezeController(
            handles, schedule, config.score_variant, config.pairing, config.score_beta1, config.score_beta2
        )

    shape = accounting.ShapeSpec.from_model_config(model.config, seq_len=dataset.tokens.shape[1], batch=1)
    optimizer = AdamW((config.adam_beta1, config.adam_beta2), config.adam_eps, config.weight_decay)
    head = model.head_parameters()
    data_rng = SeededRng(config.seed).child("data")
    records: list[StepRecord] = []

    step = 0
    for epoch in range(config.epochs):
        order = data_rng.permutation(len(dataset))
        for start in range(0, len(dataset), config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            logits = model_forward(model, dataset.tokens[idx])
            loss = softmax_cross_entropy(logits, dataset.labels[idx])
            backward(loss)

            fraction = 0.0
            if controller is not None:
                controller.update_scores()
                for h in controller.apply_freezing(step):
                    optimizer.forget(h.tensor)
                fraction = freeze_fraction(step, schedule)

            lr = lr_at(step, total, config.lr, config.warmup_fraction)
            clf_lr = lr_at(step, total, config.clf_lr, config.warmup_fraction)
            adapter_params = [t for layer in model.layers() for t in layer.trainable_tensors()]
            optimizer.step(adapter_params, lr)
            optimizer.step(head, clf_lr)

            frozen = accounting.frozen_flags(model)
            tokens = len(idx) * dataset.tokens.shape[1]
            flops = tokens * (
                accounting.adapter_flops(shape, frozen, "forward") + accounting.adapter_flops(shape, frozen, "backward")
            )
            records.append(
                StepRecord(
                    step=step,
                    epoch=epoch,
                    loss=loss.item(),
                    lr=lr,
                    freeze_fraction=fraction,
                    n_frozen_pms=len(controller.frozen) if controller else 0,
                    trainable_param_count=model.adapter_trainable_count(),
                    adapter_flops_this_step=int(flops),
                )
            )
            if on_step is not None:
                on_step(step, model)
            step += 1
        log.debug("epoch %d loss %.4f", epoch, records[-1].loss)

    return ExperimentReport(
        mode=model.config.mode.value,
        seed=config.seed,
        total_steps=total,
        steps_per_epoch=steps_per_epoch,
        t_i=schedule.t_i if schedule else None,
        t_f=schedule.t_f if schedule else None,
        n_eligible=len(handles),
        head_params=sum(t.size for t in head),
        avg_trainable_params=accounting.average_trainable_params(records),
        total_adapter_flops=sum(r.adapter_flops_this_step for r in records),
        final_loss=records[-1].loss,
        train_accuracy=evaluate(model, dataset),
        eval_accuracy=evaluate(model, eval_dataset) if eval_dataset is not None and len(eval_dataset) else None,
        records=records,
        freeze_events=list(controller.events) if controller else [],
    )
