import numpy as np
import pytest

from aflora.adapters import AdapterLayer, AdapterMode, adapter_forward, adapter_init, effective_delta, trainable_param_count
from aflora.errors import ConfigError, DimensionError
from aflora.tensor import SeededRng, Tensor, backward, tsum

from .conftest import numeric_grad, relative_error


def hand_layer(mode=AdapterMode.AFLORA):
    return AdapterLayer(
        w0=Tensor(np.eye(2)),
        a=Tensor([[1.0, 0.0]]),
        b=Tensor([[1.0], [0.0]]),
        vec_d=Tensor([1.0]),
        vec_b=Tensor([1.0, 1.0]),
        mode=mode,
    )


def test_hand_example():
    out = adapter_forward(hand_layer(), Tensor([[1.0], [2.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [2.0]])


def test_row_and_column_layouts_agree():
    layer = adapter_init(5, 3, 2, "aflora", SeededRng(1))
    layer.vec_b.data[...] = [0.5, -1.0, 2.0]
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(layer(Tensor(x.T)).data.T, adapter_forward(layer, Tensor(x)).data, atol=1e-12)


@pytest.mark.parametrize("mode", list(AdapterMode))
def test_zero_init_is_transparent(mode):
    layer = adapter_init(6, 4, 2, mode, SeededRng(9))
    x = Tensor(np.random.default_rng(2).normal(size=(6, 3)))
    assert np.array_equal(adapter_forward(layer, x).data, layer.w0.data @ x.data)


def test_lora_mode_uses_unit_vectors():
    layer = adapter_init(4, 4, 2, "lora", SeededRng(0))
    layer.b.data[...] = np.random.default_rng(3).normal(size=layer.b.shape)
    x = np.random.default_rng(4).normal(size=(4, 2))
    expected = layer.w0.data @ x + layer.b.data @ layer.a.data @ x
    np.testing.assert_allclose(adapter_forward(layer, Tensor(x)).data, expected, atol=1e-12)
    assert layer.vectors() == [] and not layer.vec_b.requires_grad


def test_elora_frozen_at_step_zero():
    layer = adapter_init(8, 8, 8, "elora", SeededRng(0))
    assert layer.frozen_a and layer.frozen_b
    assert layer.freeze_step("A") == layer.freeze_step("B") == 0
    assert not layer.eligible


def test_seeded_init_is_deterministic():
    one, two = (adapter_init(7, 5, 3, "aflora", SeededRng(42)) for _ in range(2))
    assert one.a.data.tobytes() == two.a.data.tobytes()
    assert one.b.data.tobytes() == two.b.data.tobytes()


def test_init_errors():
    with pytest.raises(ConfigError):
        adapter_init(4, 4, 0, "lora", SeededRng(0))
    with pytest.raises(ConfigError):
        adapter_init(4, 8, 5, "aflora", SeededRng(0))
    # frozen random projections may exceed the width
    adapter_init(4, 8, 16, "elora", SeededRng(0))
    with pytest.raises(DimensionError):
        adapter_forward(hand_layer(), Tensor(np.ones((3, 1))))


def test_effective_delta_special_cases():
    layer = adapter_init(3, 3, 3, "aflora", SeededRng(0))
    assert np.array_equal(effective_delta(layer).data, np.zeros((3, 3)))
    layer.a.data[...] = np.eye(3)
    layer.b.data[...] = np.eye(3)
    layer.vec_d.data[...] = 1.0
    layer.vec_b.data[...] = 1.0
    np.testing.assert_array_equal(effective_delta(layer).data, np.eye(3))


def test_effective_delta_matches_forward():
    rng = np.random.default_rng(5)
    layer = adapter_init(6, 9, 3, "aflora", SeededRng(5))
    layer.vec_d.data[...] = rng.normal(size=3)
    layer.vec_b.data[...] = rng.normal(size=9)
    dense = layer.w0.data + effective_delta(layer).data
    worst = max(
        np.abs(adapter_forward(layer, Tensor(x)).data - dense @ x).max()
        for x in (rng.normal(size=(6, 1)) for _ in range(100))
    )
    assert worst < 1e-10


def test_parameter_counts():
    layer = adapter_init(768, 3072, 4, "aflora", SeededRng(0), w0=Tensor(np.zeros((3072, 768))))
    assert trainable_param_count(layer) == 3072 + 12288 + 4 + 3072 == 18_436
    layer.freeze("A", 5)
    layer.freeze("B", 5)
    assert trainable_param_count(layer) == 3_076
    lora = adapter_init(768, 768, 8, "lora", SeededRng(0), w0=Tensor(np.zeros((768, 768))))
    assert trainable_param_count(lora) == 12_288


def test_freeze_keeps_data_and_drops_grad():
    layer = adapter_init(4, 4, 2, "aflora", SeededRng(0))
    before = layer.a.data.copy()
    layer.a.grad = np.ones_like(before)
    layer.freeze("A", 3)
    assert np.array_equal(layer.a.data, before) and layer.a.grad is None
    assert layer.a not in layer.trainable_tensors()


def test_gradients_of_all_adapter_tensors():
    rng = np.random.default_rng(8)
    layer = adapter_init(5, 4, 2, "aflora", SeededRng(8))
    layer.vec_b.data[...] = rng.normal(size=4)
    x = Tensor(rng.normal(size=(5, 3)))
    weights = Tensor(rng.normal(size=(4, 3)))
    fn = lambda: tsum(adapter_forward(layer, x) * adapter_forward(layer, x) * weights)  # noqa: E731
    backward(fn())
    for t in (layer.a, layer.b, layer.vec_d, layer.vec_b):
        for index in np.ndindex(t.shape):
            assert relative_error(t.grad[index], numeric_grad(fn, t, index)) < 1e-5
