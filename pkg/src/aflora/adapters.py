"""Low-rank adapter layers with feature-transformation vectors.

An adapted linear site computes

    Y = W0 X + diag(vec_b) B diag(vec_d) A X

with ``W0`` frozen, ``A`` the rank-r down-projection and ``B`` the
up-projection. The three supported modes share this one forward:

* ``lora``   - A, B trainable for the whole run; vectors fixed at one and not counted.
* ``elora``  - A, B frozen at random init from step 0; vectors trainable.
* ``aflora`` - A, B trainable at eligible sites until the freeze controller
  freezes them; vectors trainable throughout. Non-eligible sites keep their
  projection matrices frozen at random init.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import SeededRng, Tensor, init_kaiming_uniform, matmul, scale_by_vector_rows

SITES = ("q", "k", "v", "o", "ffn_inter", "ffn_out")
ATTENTION_SITES = frozenset({"q", "k", "v", "o"})
FFN_SITES = frozenset({"ffn_inter", "ffn_out"})
MATRICES = ("A", "B")

VEC_D_INIT = 0.1


class AdapterMode(str, enum.Enum):
    LORA = "lora"
    ELORA = "elora"
    AFLORA = "aflora"

    @property
    def has_vectors(self) -> bool:
        return self is not AdapterMode.LORA

    @classmethod
    def parse(cls, value) -> AdapterMode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown adapter mode {value!r}; expected lora, elora or aflora") from None


def site_group(site: str) -> str:
    """Return ``"attention"`` or ``"ffn"`` for a linear site name."""
    if site in ATTENTION_SITES:
        return "attention"
    if site in FFN_SITES:
        return "ffn"
    raise ValueError(f"unknown site {site!r}")


@dataclass(eq=False)
class AdapterLayer:
    w0: Tensor
    a: Tensor
    b: Tensor
    vec_d: Tensor
    vec_b: Tensor
    mode: AdapterMode
    layer_id: tuple[int, str] = (0, "q")
    eligible: bool = False
    frozen_a: bool = False
    frozen_b: bool = False
    freeze_step_a: int | None = None
    freeze_step_b: int | None = None

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def pm(self, matrix: str) -> Tensor:
        if matrix == "A":
            return self.a
        if matrix == "B":
            return self.b
        raise ValueError(f"matrix must be 'A' or 'B', got {matrix!r}")

    def is_frozen(self, matrix: str) -> bool:
        return self.frozen_a if matrix == "A" else self.frozen_b

    def freeze_step(self, matrix: str) -> int | None:
        return self.freeze_step_a if matrix == "A" else self.freeze_step_b

    def freeze(self, matrix: str, step: int) -> None:
        """Stop training one projection matrix. Its data is left untouched."""
        tensor = self.pm(matrix)
        tensor.requires_grad = False
        tensor.grad = None
        if matrix == "A":
            self.frozen_a, self.freeze_step_a = True, step
        else:
            self.frozen_b, self.freeze_step_b = True, step

    def vectors(self) -> list[Tensor]:
        return [self.vec_d, self.vec_b] if self.mode.has_vectors else []

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in (self.a, self.b, self.vec_d, self.vec_b) if t.requires_grad]

    def __call__(self, h: Tensor) -> Tensor:
        """Row-layout forward: ``h`` is ``(..., d_in)``, the result ``(..., d_out)``."""
        if h.shape[-1] != self.d_in:
            raise DimensionError(f"input feature size {h.shape[-1]} does not match d_in={self.d_in}")
        base = matmul(h, self.w0.T)
        low = matmul(h, self.a.T) * self.vec_d
        up = matmul(low, self.b.T) * self.vec_b
        return base + up


def adapter_forward(layer: AdapterLayer, x: Tensor) -> Tensor:
    """Column-layout forward: ``x`` is ``d_in x n``, the result ``d_out x n``."""
    if x.ndim != 2 or x.shape[0] != layer.d_in:
        raise DimensionError(f"input shape {x.shape} does not have d_in={layer.d_in} rows")
    path = matmul(layer.a, x)
    path = scale_by_vector_rows(layer.vec_d, path)
    path = matmul(layer.b, path)
    path = scale_by_vector_rows(layer.vec_b, path)
    return matmul(layer.w0, x) + path


def adapter_init(
    d_in: int,
    d_out: int,
    r: int,
    mode: AdapterMode | str,
    rng: SeededRng,
    *,
    pm_trainable: bool = True,
    layer_id: tuple[int, str] = (0, "q"),
    w0: Tensor | None = None,
) -> AdapterLayer:
    """Build one adapted site.

    ``pm_trainable`` only matters in AFLoRA mode; it marks the site's projection
    matrices as eligible for adaptive freezing. ``w0`` defaults to a fresh
    Kaiming-uniform backbone weight.
    """
    mode = AdapterMode.parse(mode)
    if r < 1:
        raise ConfigError(f"rank must be at least 1, got {r}")
    trainable_pms = mode is AdapterMode.LORA or (mode is AdapterMode.AFLORA and pm_trainable)
    if trainable_pms and r > min(d_in, d_out):
        raise ConfigError(f"rank {r} exceeds min(d_in, d_out) = {min(d_in, d_out)} for trainable projections")

    if w0 is None:
        w0 = init_kaiming_uniform(d_out, d_in, d_in, rng)
    elif w0.shape != (d_out, d_in):
        raise DimensionError(f"w0 shape {w0.shape} does not match ({d_out}, {d_in})")
    w0.requires_grad = False

    a = init_kaiming_uniform(r, d_in, d_in, rng)
    b = init_kaiming_uniform(d_out, r, r, rng)
    if mode is AdapterMode.LORA:
        # standard LoRA start: B = 0 keeps the adapted model equal to the backbone
        b.data[...] = 0.0
        vec_d = Tensor(np.ones(r))
        vec_b = Tensor(np.ones(d_out))
    else:
        vec_d = Tensor(np.full(r, VEC_D_INIT), requires_grad=True)
        vec_b = Tensor(np.zeros(d_out), requires_grad=True)

    layer = AdapterLayer(w0=w0, a=a, b=b, vec_d=vec_d, vec_b=vec_b, mode=mode, layer_id=layer_id)
    if trainable_pms:
        a.requires_grad = b.requires_grad = True
        layer.eligible = mode is AdapterMode.AFLORA
    else:
        layer.freeze("A", 0)
        layer.freeze("B", 0)
    return layer


def effective_delta(layer: AdapterLayer) -> Tensor:
    """Dense ``diag(vec_b) B diag(vec_d) A`` of shape ``d_out x d_in``."""
    return Tensor(layer.vec_b.data[:, None] * (layer.b.data @ (layer.vec_d.data[:, None] * layer.a.data)))


def trainable_param_count(layer: AdapterLayer) -> int:
    return sum(t.size for t in layer.trainable_tensors())
