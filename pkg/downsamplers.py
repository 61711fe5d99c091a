"""
Character-block downsamplers.

GBST: embed characters, build mean candidates over non-overlapping n-gram
windows anchored at position 0, score each candidate with one learned vector,
mix the candidates by a softmax over orders, then mean-pool blocks of delta
positions. The decoder-safe variants differ only in which candidates exist
(``removal``), how they are averaged (``masking``) or how much BOS padding the
context gets (``padding``). ``lee`` is the causal-convolution + max-pool
downsampler. All layers take token ids of shape (batch, L) and return a block
tensor of shape (batch, L / delta, d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import numcore as nc
from bytedata import BOS

VARIANTS = ("non_causal", "padding", "removal", "masking", "lee")
CAUSAL_VARIANTS = ("padding", "removal", "masking", "lee")
POS_KINDS = ("sinusoidal", "conv")
MAX_DEFAULT_ORDER = 4


@dataclass
class DownsamplerConfig:
    """
    Every hyperparameter of one downsampling layer.

    :param delta: downsampling factor (characters per block).
    :param variant: non_causal | padding | removal | masking | lee.
    :param pos_embedding: sinusoidal | conv (conv only for non_causal).
    :param model_dim: width d of characters and blocks.
    :param orders: explicit n-gram orders; None uses the role default.
    :param role: decoder (orders 1..min(4, delta)) or encoder (orders 1..4).
    :param conv_kernel: width of the positional convolution (default 2*delta - 1).
    :param lee_kernel_widths: causal convolution widths of the lee variant.
    """
    delta: int = 1
    variant: str = "non_causal"
    pos_embedding: str = "sinusoidal"
    model_dim: int = 64
    orders: tuple | None = None
    role: str = "decoder"
    conv_kernel: int | None = None
    lee_kernel_widths: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pos_embedding not in POS_KINDS:
            raise ValueError(f"unknown positional embedding {self.pos_embedding!r}")
        if self.variant in CAUSAL_VARIANTS and self.pos_embedding != "sinusoidal":
            raise ValueError(f"variant {self.variant!r} requires sinusoidal positions")
        if self.role not in ("decoder", "encoder"):
            raise ValueError(f"role must be decoder or encoder, got {self.role!r}")
        if self.model_dim < 1:
            raise ValueError(f"model_dim must be >= 1, got {self.model_dim}")
        if self.orders is not None:
            self.orders = tuple(sorted(set(int(n) for n in self.orders)))
            if not self.orders or self.orders[0] < 1:
                raise ValueError(f"orders must be positive integers, got {self.orders}")
        self.lee_kernel_widths = tuple(int(w) for w in self.lee_kernel_widths)
        if self.variant == "lee" and (not self.lee_kernel_widths or min(self.lee_kernel_widths) < 1):
            raise ValueError(f"bad lee kernel widths {self.lee_kernel_widths}")
        if self.variant == "lee" and len(self.lee_kernel_widths) > self.model_dim:
            raise ValueError("model_dim is smaller than the number of lee kernel widths")
        if self.conv_kernel is not None and self.conv_kernel < 1:
            raise ValueError(f"conv_kernel must be >= 1, got {self.conv_kernel}")

    @property
    def kept_orders(self):
        return kept_orders(self.delta, self.variant, self.role, self.orders)

    @property
    def pos_kernel(self):
        return self.conv_kernel or 2 * self.delta - 1

    @property
    def context_padding(self):
        return 2 * self.delta if self.variant == "padding" else self.delta

    @property
    def is_causal(self):
        return self.variant in CAUSAL_VARIANTS

    def fingerprint(self):
        return f"{self.variant}-{self.pos_embedding}-d{self.delta}"


def default_orders(delta, role="decoder"):
    top = MAX_DEFAULT_ORDER if role == "encoder" else min(MAX_DEFAULT_ORDER, delta)
    return tuple(range(1, top + 1))


def kept_orders(delta, variant, role="decoder", orders=None):
    """
    N-gram orders a variant keeps. ``removal`` drops every order that does not
    divide delta, so no window crosses a block boundary.
    """
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    base = tuple(orders) if orders else default_orders(delta, role)
    if variant == "removal":
        return tuple(n for n in base if delta % n == 0)
    return base


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def lee_channel_split(model_dim, widths):
    """Channels per kernel width: an equal split, remainder to the first widths."""
    base, extra = divmod(model_dim, len(widths))
    return [base + (1 if i < extra else 0) for i in range(len(widths))]


def init_downsampler_params(store, config, vocab_size, rng, prefix=""):
    """Register the layer's parameters in ``store`` under ``prefix``."""
    d = config.model_dim
    store.add(f"{prefix}embed", rng.normal(0.0, 1.0, size=(vocab_size, d)))
    if config.variant == "lee":
        for width, channels in zip(config.lee_kernel_widths, lee_channel_split(d, config.lee_kernel_widths)):
            scale = 1.0 / np.sqrt(width * d)
            store.add(f"{prefix}lee_w{width}", rng.normal(0.0, scale, size=(width, d, channels)))
            store.add(f"{prefix}lee_b{width}", np.zeros(channels))
        return store
    store.add(f"{prefix}score", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d,)))
    if config.pos_embedding == "conv":
        store.add(f"{prefix}pos_conv", rng.normal(0.0, 1.0 / np.sqrt(config.pos_kernel), size=(config.pos_kernel, d)))
    return store


# ---------------------------------------------------------------------------
# positions
# ---------------------------------------------------------------------------
def sinusoidal_table(length, dim):
    """The fixed sin/cos table: even channels sin, odd channels cos."""
    pos = np.arange(length)[:, None].astype(np.float64)
    rates = np.exp(-np.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)
    angles = pos * rates[None, :]
    table = np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(nc.default_dtype())


def position_embed(E, kind, config, params=None, prefix=""):
    """
    ``sinusoidal``: E plus the fixed table. ``conv``: the per-position signal
    of a centered depthwise convolution of width ``config.pos_kernel``; the
    caller decides where to inject it.
    """
    E = nc.tensor(E)
    if kind == "sinusoidal":
        return E + sinusoidal_table(E.shape[1], E.shape[2])
    if kind == "conv":
        kernel = params[f"{prefix}pos_conv"]
        if kernel.shape[0] != config.pos_kernel:
            raise ValueError(f"kernel width {kernel.shape[0]} does not match config {config.pos_kernel}")
        return nc.depthwise_conv1d(E, kernel, padding="centered")
    raise ValueError(f"unknown positional embedding {kind!r}")


# ---------------------------------------------------------------------------
# n-gram candidates
# ---------------------------------------------------------------------------
def candidate_operator(length, n, delta=None):
    """
    (L, L) averaging matrix for order ``n``. Row i averages position i's
    window [floor(i/n)*n, floor(i/n)*n + n) clipped to L. With ``delta`` the
    window is restricted to members whose block is not later than i's block.
    """
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    op = np.zeros((length, length))
    for i in range(length):
        start = (i // n) * n
        members = [j for j in range(start, min(start + n, length))
                   if delta is None or j // delta <= i // delta]
        op[i, members] = 1.0 / len(members)
    return op


def _batched(E):
    E = nc.tensor(E)
    if E.ndim == 2:
        return nc.reshape(E, (1,) + E.shape), True
    return E, False


def ngram_candidates(E, n):
    """C_n: every position replaced by the mean of its order-n window."""
    E3, squeeze = _batched(E)
    out = nc.positional_mean(E3, candidate_operator(E3.shape[1], n))
    return nc.reshape(out, out.shape[1:]) if squeeze else out


def masked_ngram_candidates(E, n, delta):
    """C_n under the block-causal mask: window members from later blocks are ignored."""
    E3, squeeze = _batched(E)
    out = nc.positional_mean(E3, candidate_operator(E3.shape[1], n, delta))
    return nc.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# GBST
# ---------------------------------------------------------------------------
def _check_length(tokens, delta):
    length = np.shape(tokens)[-1]
    if length % delta:
        raise ValueError(f"sequence length {length} is not divisible by delta {delta}")
    return length


def _embed(tokens, params, prefix, embed_offset):
    E = nc.embedding(params[f"{prefix}embed"], tokens)
    if embed_offset is not None:
        E = E + embed_offset
    return E


def gbst_mix(tokens, config, params, prefix="", embed_offset=None):
    """
    Position-level half of GBST: returns (X, weights) where X (batch, L, d)
    is the mixed representation before pooling and weights (batch, L, orders)
    are the softmax mixing probabilities.
    """
    if config.variant == "lee":
        raise ValueError("gbst_mix does not handle the lee variant")
    _check_length(tokens, config.delta)
    E = _embed(tokens, params, prefix, embed_offset)
    if config.pos_embedding == "sinusoidal":
        E = position_embed(E, "sinusoidal", config)

    length = E.shape[1]
    mask_delta = config.delta if config.variant == "masking" else None
    candidates = [nc.positional_mean(E, candidate_operator(length, n, mask_delta)) for n in config.kept_orders]
    stacked = nc.stack(candidates, axis=2)                       # (B, L, N, d)
    scores = nc.matmul(stacked, params[f"{prefix}score"])        # (B, L, N)
    weights = nc.softmax(scores, axis=-1)
    X = nc.tsum(stacked * nc.reshape(weights, weights.shape + (1,)), axis=2)

    if config.pos_embedding == "conv":
        X = X + position_embed(E, "conv", config, params, prefix)
    return X, weights


def gbst_forward(tokens, config, params, prefix="", embed_offset=None):
    """Full GBST layer: mixed character representations mean-pooled into blocks."""
    X, _ = gbst_mix(tokens, config, params, prefix, embed_offset)
    return nc.pool_mean(X, config.delta)


def block_mixing_weights(tokens, config, params, prefix=""):
    return gbst_mix(tokens, config, params, prefix)[1]


# ---------------------------------------------------------------------------
# convolutional downsampler (lee variant)
# ---------------------------------------------------------------------------
def lee_downsample(tokens, config, params, prefix="", embed_offset=None):
    """
    Embed with sinusoidal positions, run one causal convolution per kernel
    width, concatenate the channel groups back to d, apply relu and max-pool
    blocks of delta positions.
    """
    _check_length(tokens, config.delta)
    E = _embed(tokens, params, prefix, embed_offset)
    E = position_embed(E, "sinusoidal", config)
    branches = [nc.conv1d(E, params[f"{prefix}lee_w{w}"], params[f"{prefix}lee_b{w}"], padding="causal")
                for w in config.lee_kernel_widths]
    H = nc.relu(nc.concat(branches, axis=-1))
    return nc.pool_max(H, config.delta)


def downsample(tokens, config, params, prefix="", embed_offset=None):
    """Dispatch to GBST or the lee layer by ``config.variant``."""
    if config.variant == "lee":
        return lee_downsample(tokens, config, params, prefix, embed_offset)
    return gbst_forward(tokens, config, params, prefix, embed_offset)


# ---------------------------------------------------------------------------
# upsampling and decoder context
# ---------------------------------------------------------------------------
def init_upsampler_params(store, model_dim, delta, out_vocab, rng, prefix="up_"):
    store.add(f"{prefix}w", rng.normal(0.0, 1.0 / np.sqrt(model_dim), size=(model_dim, delta * out_vocab)))
    store.add(f"{prefix}b", np.zeros(delta * out_vocab))
    return store


def upsample_linear(blocks, delta, out_vocab, params, prefix="up_"):
    """
    One affine map d -> delta * out_vocab per block, reshaped so that block b
    predicts character positions [b*delta, (b+1)*delta): (batch, m, delta, V).
    """
    blocks = nc.tensor(blocks)
    batch, m, _ = blocks.shape
    logits = nc.linear(blocks, params[f"{prefix}w"], params[f"{prefix}b"])
    return nc.reshape(logits, (batch, m, delta, out_vocab))


def causal_context(tokens, delta, variant):
    """
    Decoder input for gold ``tokens`` (1-D or batch x L): left-pad BOS x delta
    (BOS x 2*delta for the padding variant) and cut back to the original length.
    """
    tokens = np.asarray(tokens)
    pad = 2 * delta if variant == "padding" else delta
    length = tokens.shape[-1]
    bos = np.full(tokens.shape[:-1] + (pad,), BOS, dtype=tokens.dtype if tokens.size else np.int64)
    return np.concatenate([bos, tokens], axis=-1)[..., :length]
