"""A small pre-norm transformer encoder whose six linear sites per block are adapters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .adapters import MATRICES, SITES, AdapterLayer, AdapterMode, adapter_init, site_group
from .errors import ConfigError
from .freezing import PMHandle
from .tensor import (
    SeededRng,
    Tensor,
    embedding,
    gelu,
    init_kaiming_uniform,
    layer_norm,
    matmul,
    softmax,
)

PLACEMENTS = {"attention", "ffn"}


def parse_sites(value) -> tuple[str, ...]:
    """Normalize a placement (``"ffn"``, ``"attention,ffn"``, ``"none"``, an iterable) to a sorted tuple."""
    if isinstance(value, str):
        items = [v.strip().lower() for v in value.replace("+", ",").split(",")]
    else:
        items = [str(v).strip().lower() for v in value]
    aliases = {"attn": "attention", "mlp": "ffn", "both": "attention,ffn"}
    out: set[str] = set()
    for item in items:
        if item in ("", "none"):
            continue
        for part in aliases.get(item, item).split(","):
            if part not in PLACEMENTS:
                raise ConfigError(f"unknown PM site group {part!r}; expected attention and/or ffn")
            out.add(part)
    return tuple(sorted(out))


@dataclass
class ModelConfig:
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 32
    max_seq_len: int = 16
    n_classes: int = 2
    rank: int = 4
    mode: AdapterMode = AdapterMode.AFLORA
    pm_trainable_sites: tuple[str, ...] = ("ffn",)

    def __post_init__(self):
        self.mode = AdapterMode.parse(self.mode)
        self.pm_trainable_sites = parse_sites(self.pm_trainable_sites)
        for name in ("n_blocks", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq_len", "n_classes", "rank"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def site_dims(self, site: str) -> tuple[int, int]:
        """``(d_in, d_out)`` of a linear site."""
        if site == "ffn_inter":
            return self.d_model, self.d_ffn
        if site == "ffn_out":
            return self.d_ffn, self.d_model
        return self.d_model, self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["pm_trainable_sites"] = list(self.pm_trainable_sites)
        return d


class PMEntry(NamedTuple):
    handle: PMHandle
    block: int
    site: str
    matrix: str
    eligible: bool


@dataclass(eq=False)
class TransformerModel:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[dict[str, AdapterLayer]]
    head_w: Tensor
    head_b: Tensor
    _handles: list[PMHandle] = field(default_factory=list, repr=False)

    def layers(self) -> list[AdapterLayer]:
        return [block[site] for block in self.blocks for site in SITES]

    def head_parameters(self) -> list[Tensor]:
        return [self.head_w, self.head_b]

    def trainable_parameters(self) -> list[Tensor]:
        params = [t for layer in self.layers() for t in layer.trainable_tensors()]
        return params + self.head_parameters()

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        """Partition every parameter into backbone, PM, vector and head groups."""
        layers = self.layers()
        return {
            "backbone": [self.tok_emb, self.pos_emb] + [layer.w0 for layer in layers],
            "pm": [t for layer in layers for t in (layer.a, layer.b)],
            "vector": [t for layer in layers for t in layer.vectors()],
            "head": self.head_parameters(),
        }

    def adapter_trainable_count(self) -> int:
        return sum(t.size for layer in self.layers() for t in layer.trainable_tensors())

    def trainable_count(self) -> int:
        return self.adapter_trainable_count() + sum(t.size for t in self.head_parameters())

    def zero_grad(self) -> None:
        for group in self.parameter_groups().values():
            for t in group:
                t.grad = None

    def __call__(self, tokens, adapters: bool = True) -> Tensor:
        return model_forward(self, tokens, adapters=adapters)


def build_model(config: ModelConfig, rng: SeededRng) -> TransformerModel:
    d = config.d_model
    emb_rng = rng.child("embedding")
    bound = math.sqrt(3.0)
    tok_emb = Tensor(emb_rng.uniform(-bound, bound, (config.vocab_size, d)))
    pos_emb = Tensor(emb_rng.uniform(-bound, bound, (config.max_seq_len, d)))

    blocks = []
    for index in range(config.n_blocks):
        block_rng = rng.child(f"block{index}")
        block = {}
        for site in SITES:
            d_in, d_out = config.site_dims(site)
            block[site] = adapter_init(
                d_in,
                d_out,
                config.rank,
                config.mode,
                block_rng,
                pm_trainable=site_group(site) in config.pm_trainable_sites,
                layer_id=(index, site),
            )
        blocks.append(block)

    head_rng = rng.child("head")
    head_w = init_kaiming_uniform(config.n_classes, d, d, head_rng)
    head_w.requires_grad = True
    head_b = Tensor(np.zeros(config.n_classes), requires_grad=True)
    model = TransformerModel(config, tok_emb, pos_emb, blocks, head_w, head_b)
    model._handles = [
        PMHandle(index, site, matrix, block[site])
        for index, block in enumerate(blocks)
        for site in SITES
        for matrix in MATRICES
    ]
    return model


def _linear(layer: AdapterLayer, x: Tensor, adapters: bool) -> Tensor:
    return layer(x) if adapters else matmul(x, layer.w0.T)


def model_forward(model: TransformerModel, tokens, adapters: bool = True) -> Tensor:
    """Logits ``batch x n_classes`` for an integer token batch ``batch x seq``.

    ``adapters=False`` evaluates the frozen backbone alone.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"token batch must be 2-D, got shape {tokens.shape}")
    batch, seq = tokens.shape
    if seq > cfg.max_seq_len:
        raise IndexError(f"sequence length {seq} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")

    heads, d = cfg.n_heads, cfg.d_model
    dh = d // heads
    h = embedding(model.tok_emb, tokens) + model.pos_emb.data[:seq]
    for block in model.blocks:
        x = layer_norm(h)
        q, k, v = (
            _linear(block[s], x, adapters).reshape(batch, seq, heads, dh).transpose(0, 2, 1, 3)
            for s in ("q", "k", "v")
        )
        att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
        ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(batch, seq, d)
        h = h + _linear(block["o"], ctx, adapters)
        x = layer_norm(h)
        h = h + _linear(block["ffn_out"], gelu(_linear(block["ffn_inter"], x, adapters)), adapters)
    pooled = layer_norm(h)[:, 0, :]
    return matmul(pooled, model.head_w.T) + model.head_b


def enumerate_pms(model: TransformerModel) -> list[PMEntry]:
    """All projection matrices: block ascending, sites q,k,v,o,ffn_inter,ffn_out, A before B."""
    return [PMEntry(h, h.block, h.site, h.matrix, h.layer.eligible) for h in model._handles]
