"""Miniature trainable transformer encoder.

Pre-norm blocks (masked multi-head self-attention + GELU feed-forward, both
with residuals), learned positional embeddings, and a text representation
built by concatenating the [CLS] position's hidden state from the last
``concat_layers`` layers, followed by a high-rate dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as t
from .errors import ConfigError, ContractError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden: int
    n_layers: int
    n_heads: int
    ff_dim: int
    max_positions: int
    dropout: float = 0.5  # on the concatenated representation
    block_dropout: float = 0.1  # inside attention/feed-forward blocks
    concat_layers: int = 5

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ConfigError(
                f"hidden dim {self.hidden} not divisible by {self.n_heads} heads"
            )
        # shallower stacks concatenate every layer they have
        self.concat_layers = min(self.concat_layers, self.n_layers)
        if self.concat_layers < 1:
            raise ConfigError("need at least one layer to concatenate")

    @property
    def rep_width(self) -> int:
        return self.concat_layers * self.hidden


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """normal(0, 0.02) for embeddings/linear weights, ones/zeros for layer norm."""
    params: dict[str, Tensor] = {}

    def normal(name, shape):
        params[name] = Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def fill(name, shape, value):
        params[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    normal("encoder.tok_emb", (config.vocab_size, config.hidden))
    normal("encoder.pos_emb", (config.max_positions, config.hidden))
    # final norm, applied to every tapped [CLS] state: a pre-norm stack keeps
    # its residual stream unnormalized, which would saturate the downstream
    # sigmoid bottleneck as depth grows
    fill("encoder.lnf.gamma", (config.hidden,), 1.0)
    fill("encoder.lnf.beta", (config.hidden,), 0.0)
    h, f = config.hidden, config.ff_dim
    for i in range(config.n_layers):
        prefix = f"encoder.layer{i}"
        fill(f"{prefix}.ln1.gamma", (h,), 1.0)
        fill(f"{prefix}.ln1.beta", (h,), 0.0)
        for proj in ("q", "k", "v", "o"):
            normal(f"{prefix}.attn.{proj}.w", (h, h))
            fill(f"{prefix}.attn.{proj}.b", (h,), 0.0)
        fill(f"{prefix}.ln2.gamma", (h,), 1.0)
        fill(f"{prefix}.ln2.beta", (h,), 0.0)
        normal(f"{prefix}.ff.w1", (h, f))
        fill(f"{prefix}.ff.b1", (f,), 0.0)
        normal(f"{prefix}.ff.w2", (f, h))
        fill(f"{prefix}.ff.b2", (h,), 0.0)
    return params


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    batch, seq, din = x.shape
    flat = t.reshape(x, (batch * seq, din))
    out = t.add(t.matmul(flat, w), b)
    return t.reshape(out, (batch, seq, w.shape[1]))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, seq, hidden = x.shape
    per_head = hidden // n_heads
    return t.transpose(t.reshape(x, (batch, seq, n_heads, per_head)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, seq, per_head = x.shape
    return t.reshape(t.transpose(x, (0, 2, 1, 3)), (batch, seq, heads * per_head))


def encode(
    token_ids: np.ndarray,
    mask: np.ndarray,
    config: EncoderConfig,
    params: dict[str, Tensor],
    training: bool,
    rng: np.random.Generator,
) -> Tensor:
    """Text representation of shape (batch, concat_layers * hidden).

    Padded key positions are masked out of every attention row, so pad token
    ids can never influence the representation.
    """
    token_ids = np.asarray(token_ids)
    batch, seq = token_ids.shape
    if seq > config.max_positions:
        raise ContractError(f"sequence length {seq} exceeds max positions {config.max_positions}")
    if np.any(token_ids >= config.vocab_size) or np.any(token_ids < 0):
        raise ContractError("token id outside vocabulary")
    mask = np.asarray(mask, dtype=bool)

    x = t.add(
        t.embedding(params["encoder.tok_emb"], token_ids),
        t.embedding(params["encoder.pos_emb"], np.arange(seq)),
    )
    key_keep = mask[:, None, None, :]  # broadcast over heads and query positions
    inv_sqrt = 1.0 / math.sqrt(config.hidden // config.n_heads)

    cls_states: list[Tensor] = []
    for i in range(config.n_layers):
        prefix = f"encoder.layer{i}"
        pre = t.layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
        q = _split_heads(_linear(pre, params[f"{prefix}.attn.q.w"], params[f"{prefix}.attn.q.b"]), config.n_heads)
        k = _split_heads(_linear(pre, params[f"{prefix}.attn.k.w"], params[f"{prefix}.attn.k.b"]), config.n_heads)
        v = _split_heads(_linear(pre, params[f"{prefix}.attn.v.w"], params[f"{prefix}.attn.v.b"]), config.n_heads)
        scores = t.scale(t.matmul(q, t.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        scores = t.masked_fill(scores, key_keep, t.MASK_FILL)
        weights = t.dropout(t.softmax(scores, axis=-1), config.block_dropout, training, rng)
        ctx = _merge_heads(t.matmul(weights, v))
        ctx = _linear(ctx, params[f"{prefix}.attn.o.w"], params[f"{prefix}.attn.o.b"])
        ctx = t.dropout(ctx, config.block_dropout, training, rng)
        x = t.add(x, ctx)

        pre2 = t.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
        ff = _linear(pre2, params[f"{prefix}.ff.w1"], params[f"{prefix}.ff.b1"])
        ff = t.gelu(ff)
        ff = _linear(ff, params[f"{prefix}.ff.w2"], params[f"{prefix}.ff.b2"])
        ff = t.dropout(ff, config.block_dropout, training, rng)
        x = t.add(x, ff)

        cls_states.append(
            t.layer_norm(t.take(x, 0, axis=1), params["encoder.lnf.gamma"], params["encoder.lnf.beta"])
        )

    # last layer first, then progressively earlier layers
    chosen = cls_states[-config.concat_layers :][::-1]
    rep = chosen[0] if len(chosen) == 1 else t.concat(chosen, axis=1)
    return t.dropout(rep, config.dropout, training, rng)


def micro_config(vocab_size: int = 50, max_positions: int = 8) -> EncoderConfig:
    """Tiny configuration used by gradient-fidelity checks."""
    return EncoderConfig(
        vocab_size=vocab_size,
        hidden=8,
        n_layers=2,
        n_heads=2,
        ff_dim=16,
        max_positions=max_positions,
        dropout=0.5,
        block_dropout=0.1,
        concat_layers=5,
    )


def encoder_grad_check(seed: int = 0, h: float = 1e-5) -> float:
    """End-to-end gradient check of a scalar head on the text representation.

    Runs a 2-layer micro encoder on a batch of 2 (one row padded), with all
    dropout active but deterministically re-seeded per evaluation so the
    masks are identical across finite-difference probes.  Returns the max
    relative error over every encoder parameter.
    """
    config = micro_config()
    rng = np.random.default_rng(seed)
    params = init_encoder_params(config, rng)
    token_ids = np.array([[1, 5, 9, 13, 17], [1, 7, 3, 0, 0]])
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    probe = rng.normal(size=(2, config.rep_width))

    def forward():
        rep = encode(token_ids, mask, config, params, training=True, rng=np.random.default_rng(1234))
        return t.sum_all(t.mul(rep, t.constant(probe)))

    return t.grad_check(forward, list(params.values()), h=h)
