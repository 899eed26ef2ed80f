"""Person-relation heads: token construction, shared encoder block, classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .backbone import PersonFeature
from .tensor import DegenerateInputError, Parameter, Tensor

HEAD_TYPES = ("linear", "s_only", "t_only")


class HeadConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    head_type: str = "t_only"
    agg: str = "mean"
    num_classes: int = 3
    use_memory: bool = False
    num_heads: int = 4
    ff_mult: int = 4

    def validate(self) -> None:
        if self.head_type not in HEAD_TYPES:
            raise HeadConfigError(f"unknown head type {self.head_type!r}")
        if self.agg not in ("mean", "max"):
            raise HeadConfigError(f"unknown aggregation {self.agg!r}")
        if self.head_type == "s_only" and self.use_memory:
            raise HeadConfigError("s_only heads cannot use the memory bank")
        if self.use_memory and self.head_type == "linear":
            raise HeadConfigError("the linear head has no token sequence to extend with memory")
        if self.num_classes < 1:
            raise HeadConfigError("num_classes must be positive")


@dataclass
class TokenSequence:
    tokens: Tensor  # L x C'
    sources: list = field(default_factory=list)  # person index, or ("mem", j)


class EncoderBlockParams:
    """Pre-norm multi-head self-attention + feed-forward, one instance shared by all positions."""

    def __init__(self, dim: int, num_heads: int, ff_mult: int, rng: np.random.Generator, prefix: str = "head.encoder"):
        if dim % num_heads:
            raise HeadConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim, self.num_heads = dim, num_heads
        s = 1.0 / np.sqrt(dim)
        hid = ff_mult * dim

        def P(name, arr):
            return Parameter(arr, f"{prefix}.{name}")

        self.wq = P("attn.wq", rng.normal(0, s, (dim, dim)))
        self.wk = P("attn.wk", rng.normal(0, s, (dim, dim)))
        self.wv = P("attn.wv", rng.normal(0, s, (dim, dim)))
        self.wo = P("attn.wo", rng.normal(0, s, (dim, dim)))
        self.bq, self.bk, self.bv, self.bo = (P(f"attn.b{c}", np.zeros(dim)) for c in "qkvo")
        self.w1 = P("ff.w1", rng.normal(0, s, (dim, hid)))
        self.b1 = P("ff.b1", np.zeros(hid))
        self.w2 = P("ff.w2", rng.normal(0, 1.0 / np.sqrt(hid), (hid, dim)))
        self.b2 = P("ff.b2", np.zeros(dim))
        self.ln1_g, self.ln1_b = P("ln1.weight", np.ones(dim)), P("ln1.bias", np.zeros(dim))
        self.ln2_g, self.ln2_b = P("ln2.weight", np.ones(dim)), P("ln2.bias", np.zeros(dim))

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
                self.w1, self.b1, self.w2, self.b2, self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]

    def zero_projections(self) -> None:
        for p in (self.wo, self.bo, self.w2, self.b2):
            p.data[...] = 0.0


class Classifier:
    """Two fully connected layers with a GELU in between."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, prefix: str = "classifier"):
        self.w1 = Parameter(rng.normal(0, np.sqrt(2.0 / dim), (dim, dim)), f"{prefix}.fc1.weight")
        self.b1 = Parameter(np.zeros(dim), f"{prefix}.fc1.bias")
        self.w2 = Parameter(rng.normal(0, 1.0 / np.sqrt(dim), (dim, num_classes)), f"{prefix}.fc2.weight")
        self.b2 = Parameter(np.zeros(num_classes), f"{prefix}.fc2.bias")

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        h = tn.gelu(tn.add_bias(tn.matmul(x, self.w1), self.b1))
        return tn.add_bias(tn.matmul(h, self.w2), self.b2)


def _stack_persons(persons) -> Tensor:
    if isinstance(persons, Tensor):
        if persons.shape[0] == 0:
            raise DegenerateInputError("no persons")
        return persons
    if not persons:
        raise DegenerateInputError("no persons")
    vals = [p.values if isinstance(p, PersonFeature) else p for p in persons]
    return tn.stack(vals, axis=0)


def token_batch(persons, head_type: str, agg: str) -> Tensor:
    """Positions x persons x C' token tensor for the s_only / t_only heads."""
    x = _stack_persons(persons)
    P, C, T, h, w = x.shape
    if head_type == "t_only":
        tok = tn.reduce(x, (3, 4), agg)  # P x C x T
        return tn.transpose(tok, (2, 0, 1))
    if head_type == "s_only":
        tok = tn.reduce(x, (2,), agg)  # P x C x h x w
        tok = tn.reshape(tok, (P, C, h * w))
        return tn.transpose(tok, (2, 0, 1))
    raise HeadConfigError(f"no tokens for head type {head_type!r}")


def _as_sequences(batch: Tensor) -> list[TokenSequence]:
    n = batch.shape[1]
    return [TokenSequence(tn.take(batch, i, axis=0), list(range(n))) for i in range(batch.shape[0])]


def build_tokens_s_only(persons: Sequence[PersonFeature], agg: str = "mean") -> list[TokenSequence]:
    """One sequence per spatial cell; token i aggregates person i over time."""
    return _as_sequences(token_batch(persons, "s_only", agg))


def build_tokens_t_only(persons: Sequence[PersonFeature], agg: str = "mean") -> list[TokenSequence]:
    """One sequence per temporal index; token i aggregates person i over space."""
    return _as_sequences(token_batch(persons, "t_only", agg))


def encoder_forward(x: Tensor, p: EncoderBlockParams, eps: float = 1e-5) -> Tensor:
    """Apply the block to a batch of sequences S x L x C'."""
    S, L, C = x.shape
    nh = p.num_heads
    dh = C // nh
    h = tn.layer_norm(x, p.ln1_g, p.ln1_b, eps)

    def split(t):
        return tn.reshape(tn.transpose(tn.reshape(t, (S, L, nh, dh)), (0, 2, 1, 3)), (S * nh, L, dh))

    q = split(tn.add_bias(tn.matmul(h, p.wq), p.bq))
    k = split(tn.add_bias(tn.matmul(h, p.wk), p.bk))
    v = split(tn.add_bias(tn.matmul(h, p.wv), p.bv))
    att = tn.softmax_last(tn.scale(tn.matmul(q, tn.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh)))
    o = tn.matmul(att, v)
    o = tn.reshape(tn.transpose(tn.reshape(o, (S, nh, L, dh)), (0, 2, 1, 3)), (S, L, C))
    x = x + tn.add_bias(tn.matmul(o, p.wo), p.bo)
    h2 = tn.layer_norm(x, p.ln2_g, p.ln2_b, eps)
    f = tn.gelu(tn.add_bias(tn.matmul(h2, p.w1), p.b1))
    return x + tn.add_bias(tn.matmul(f, p.w2), p.b2)


def encoder_block(seq: TokenSequence, params: EncoderBlockParams) -> TokenSequence:
    L, C = seq.tokens.shape
    out = encoder_forward(tn.reshape(seq.tokens, (1, L, C)), params)
    return TokenSequence(tn.reshape(out, (L, C)), list(seq.sources))


def head_forward(persons, memory_features, config: HeadConfig, encoder: EncoderBlockParams | None,
                 classifier: Classifier) -> Tensor:
    """Logits |I| x K for the current-clip persons.

    ``memory_features`` (M x C' array or Tensor, possibly empty) is appended to
    every position's sequence; memory tokens produce no logits.
    """
    config.validate()
    x = _stack_persons(persons)
    P = x.shape[0]
    if memory_features is not None and not isinstance(memory_features, Tensor):
        memory_features = np.asarray(memory_features, dtype=np.float64)
    n_mem = 0 if memory_features is None else memory_features.shape[0]
    if n_mem and not config.use_memory:
        raise HeadConfigError("memory features given to a head configured without memory")
    if config.head_type == "linear":
        pooled = tn.reduce(x, (2, 3, 4), "mean")
        return classifier(pooled)
    tokens = token_batch(x, config.head_type, config.agg)  # S x P x C
    S, _, C = tokens.shape
    if n_mem:
        mem = memory_features if isinstance(memory_features, Tensor) else Tensor(memory_features)
        mem = tn.broadcast_to(tn.reshape(mem, (1, n_mem, C)), (S, n_mem, C))
        tokens = tn.concat([tokens, mem], axis=1)
    out = encoder_forward(tokens, encoder)
    if n_mem:
        out = tn.slice_axis(out, 0, P, axis=1)
    person_repr = tn.reduce(out, (0,), "mean")  # P x C
    return classifier(person_repr)


def predict_scores(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return tn._sigmoid(np.array(z, dtype=np.float64))
