import numpy as np
import pytest

from aflora.model import ModelConfig
from aflora.tensor import Tensor, backward

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def numeric_grad(loss_fn, tensor: Tensor, index, h: float = 1e-6) -> float:
    """Central difference of ``loss_fn()`` in one entry of ``tensor``."""
    old = tensor.data[index]
    tensor.data[index] = old + h
    plus = loss_fn().item()
    tensor.data[index] = old - h
    minus = loss_fn().item()
    tensor.data[index] = old
    return (plus - minus) / (2 * h)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def analytic_grad(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    return [t.grad.copy() for t in tensors]


@pytest.fixture
def tiny_config():
    return ModelConfig(n_blocks=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=12, max_seq_len=6, rank=3)


@pytest.fixture
def rng_np():
    return np.random.default_rng(1234)
