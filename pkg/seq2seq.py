"""
Desk-scale transformer encoder-decoder over byte ids with a downsampler on
each side.

The decoder runs on blocks: its input is the BOS-shifted gold target
(``causal_context``), downsampled to L/delta blocks, with block-causal
self-attention and cross-attention to the encoder blocks. The two-step head
is an LSTM over character positions that receives, at character t, the
hidden state of t's block and the embedding of character t-1, so each block
can emit delta characters one at a time. The direct head maps each block
straight to logits and is only allowed at delta == 1.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

import numcore as nc
from bytedata import BOS, EOS, PAD, VOCAB_SIZE, batch_pad, pad_to_multiple
from downsamplers import DownsamplerConfig, causal_context, downsample, init_downsampler_params
from early_stop import PatienceTracker
from leakaudit import leaked_offsets
from progress import StepAggregator
from runlog import log

CHECKPOINT_VERSION = 1
HEADS = ("direct", "two_step")


@dataclass
class ModelConfig:
    """
    Transformer dims plus one downsampler per side.

    :param unsafe: allow a non-causal decoder (only for demonstrating the leak).
    """
    enc_layers: int = 2
    dec_layers: int = 2
    model_dim: int = 128
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0
    encoder: DownsamplerConfig = field(default_factory=lambda: DownsamplerConfig(
        delta=1, variant="non_causal", model_dim=128, role="encoder", orders=(1,)))
    decoder: DownsamplerConfig = field(default_factory=lambda: DownsamplerConfig(
        delta=1, variant="removal", model_dim=128))
    head: str = "direct"
    tie_embeddings: bool = False
    unsafe: bool = False
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = DownsamplerConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DownsamplerConfig(**self.decoder)
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        for side in (self.encoder, self.decoder):
            if side.model_dim != self.model_dim:
                raise ValueError(f"downsampler width {side.model_dim} differs from model_dim {self.model_dim}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.decoder.delta > 1 and self.head != "two_step":
            raise ValueError("a decoder with delta > 1 needs the two_step head")
        if not self.decoder.is_causal and not self.unsafe:
            raise ValueError(f"decoder variant {self.decoder.variant!r} leaks future characters; "
                             "set unsafe=True to build it anyway")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def for_variant(cls, delta, variant, head=None, model_dim=128, heads=4, ffn_dim=256,
                    enc_layers=2, dec_layers=2, unsafe=None, pos_embedding="sinusoidal", **kwargs):
        """Both sides downsampled by ``delta``; decoder variant as given, encoder non-causal GBST (or lee)."""
        enc_variant = "lee" if variant == "lee" else "non_causal"
        encoder = DownsamplerConfig(
            delta=delta, variant=enc_variant, model_dim=model_dim, role="encoder",
            pos_embedding="conv" if delta > 1 and enc_variant == "non_causal" else "sinusoidal",
            orders=(1,) if delta == 1 else None)
        decoder = DownsamplerConfig(delta=delta, variant=variant, model_dim=model_dim, pos_embedding=pos_embedding)
        return cls(enc_layers=enc_layers, dec_layers=dec_layers, model_dim=model_dim, heads=heads,
                   ffn_dim=ffn_dim, encoder=encoder, decoder=decoder,
                   head=head or ("direct" if delta == 1 else "two_step"),
                   unsafe=(variant == "non_causal") if unsafe is None else unsafe, **kwargs)

    def to_dict(self):
        data = asdict(self)
        for side in ("encoder", "decoder"):
            data[side]["orders"] = list(data[side]["orders"]) if data[side]["orders"] else None
            data[side]["lee_kernel_widths"] = list(data[side]["lee_kernel_widths"])
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def _add_layer_norm(store, name, d):
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def _add_attention(store, name, d, rng):
    for part in ("wq", "wk", "wv", "wo"):
        store.add(f"{name}.{part}", _dense(rng, d, d))


def _add_ffn(store, name, d, f, rng):
    store.add(f"{name}.w1", _dense(rng, d, f))
    store.add(f"{name}.b1", np.zeros(f))
    store.add(f"{name}.w2", _dense(rng, f, d))
    store.add(f"{name}.b2", np.zeros(d))


def init_model_params(config, seed=0):
    rng = np.random.default_rng(seed)
    d, store = config.model_dim, nc.ParamStore()
    init_downsampler_params(store, config.encoder, config.vocab_size, rng, prefix="enc.")
    init_downsampler_params(store, config.decoder, config.vocab_size, rng, prefix="dec.")
    for layer in range(config.enc_layers):
        name = f"enc{layer}"
        _add_layer_norm(store, f"{name}.ln1", d)
        _add_attention(store, f"{name}.self", d, rng)
        _add_layer_norm(store, f"{name}.ln2", d)
        _add_ffn(store, f"{name}.ffn", d, config.ffn_dim, rng)
    _add_layer_norm(store, "enc.ln_f", d)
    for layer in range(config.dec_layers):
        name = f"dec{layer}"
        _add_layer_norm(store, f"{name}.ln1", d)
        _add_attention(store, f"{name}.self", d, rng)
        _add_layer_norm(store, f"{name}.ln2", d)
        _add_attention(store, f"{name}.cross", d, rng)
        _add_layer_norm(store, f"{name}.ln3", d)
        _add_ffn(store, f"{name}.ffn", d, config.ffn_dim, rng)
    _add_layer_norm(store, "dec.ln_f", d)
    if config.head == "two_step":
        store.add("head.lstm_wx", _dense(rng, 2 * d, 4 * d))
        store.add("head.lstm_wh", _dense(rng, d, 4 * d))
        bias = np.zeros(4 * d)
        bias[d:2 * d] = 1.0  # forget gate
        store.add("head.lstm_b", bias)
    if not config.tie_embeddings:
        store.add("head.w", _dense(rng, d, config.vocab_size))
    store.add("head.b", np.zeros(config.vocab_size))
    return store


class Seq2Seq:
    """A ModelConfig with its parameters."""

    def __init__(self, config, store=None, seed=0):
        self.config = config
        self.store = store if store is not None else init_model_params(config, seed)

    def params(self, requires_grad=True):
        return self.store.tensors(requires_grad=requires_grad)

    def logits(self, src, tgt, params=None, rng=None):
        return forward_logits(self, params or self.params(requires_grad=False), src, tgt, rng)


def build_model(config, seed=0):
    """Validated config -> freshly initialised model."""
    if not isinstance(config, ModelConfig):
        raise ValueError(f"expected a ModelConfig, got {type(config).__name__}")
    return Seq2Seq(config, seed=seed)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------
def _ln(params, name, x):
    return nc.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def attention(params, name, xq, xkv, mask, heads):
    """Multi-head attention; ``mask`` is a bool array, True where attention is blocked."""
    batch, lq, d = xq.shape
    lk = xkv.shape[1]
    dh = d // heads
    q = nc.transpose(nc.reshape(xq @ params[f"{name}.wq"], (batch, lq, heads, dh)), (0, 2, 1, 3))
    k = nc.transpose(nc.reshape(xkv @ params[f"{name}.wk"], (batch, lk, heads, dh)), (0, 2, 3, 1))
    v = nc.transpose(nc.reshape(xkv @ params[f"{name}.wv"], (batch, lk, heads, dh)), (0, 2, 1, 3))
    scores = (q @ k) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = nc.masked_fill(scores, mask)
    context = nc.softmax(scores, axis=-1) @ v
    merged = nc.reshape(nc.transpose(context, (0, 2, 1, 3)), (batch, lq, d))
    return merged @ params[f"{name}.wo"]


def _ffn(params, name, x):
    hidden = nc.relu(nc.linear(x, params[f"{name}.w1"], params[f"{name}.b1"]))
    return nc.linear(hidden, params[f"{name}.w2"], params[f"{name}.b2"])


def encode(model, params, src, rng=None):
    """Encoder blocks (batch, m_src, d) and the block padding mask (batch, m_src)."""
    cfg = model.config
    src = np.asarray(src)
    x = downsample(src, cfg.encoder, params, prefix="enc.")
    batch, blocks = x.shape[0], x.shape[1]
    pad_blocks = (src == PAD).reshape(batch, blocks, cfg.encoder.delta).all(axis=-1)
    mask = pad_blocks[:, None, None, :]
    for layer in range(cfg.enc_layers):
        name = f"enc{layer}"
        h = _ln(params, f"{name}.ln1", x)
        x = x + nc.dropout(attention(params, f"{name}.self", h, h, mask, cfg.heads), cfg.dropout, rng)
        x = x + nc.dropout(_ffn(params, f"{name}.ffn", _ln(params, f"{name}.ln2", x)), cfg.dropout, rng)
    return _ln(params, "enc.ln_f", x), pad_blocks


def decode_blocks(model, params, context, memory, src_pad_blocks, rng=None):
    """Decoder hidden state per block for a decoder input ``context`` (batch, L)."""
    cfg = model.config
    y = downsample(np.asarray(context), cfg.decoder, params, prefix="dec.")
    blocks = y.shape[1]
    causal = np.triu(np.ones((blocks, blocks), dtype=bool), k=1)[None, None]
    cross_mask = src_pad_blocks[:, None, None, :]
    for layer in range(cfg.dec_layers):
        name = f"dec{layer}"
        h = _ln(params, f"{name}.ln1", y)
        y = y + nc.dropout(attention(params, f"{name}.self", h, h, causal, cfg.heads), cfg.dropout, rng)
        h = _ln(params, f"{name}.ln2", y)
        y = y + nc.dropout(attention(params, f"{name}.cross", h, memory, cross_mask, cfg.heads), cfg.dropout, rng)
        y = y + nc.dropout(_ffn(params, f"{name}.ffn", _ln(params, f"{name}.ln3", y)), cfg.dropout, rng)
    return _ln(params, "dec.ln_f", y)


def output_projection(model, params, h):
    if model.config.tie_embeddings:
        table = params["dec.embed"]
        weight = nc.transpose(table, (1, 0)) * (1.0 / math.sqrt(model.config.model_dim))
    else:
        weight = params["head.w"]
    return nc.linear(h, weight, params["head.b"])


def lstm_step(model, params, block_state, prev_ids, state):
    """
    One step of the two-step head: input is [block hidden state, embedding of
    the previous character]; returns ((h, c), logits).
    """
    d = model.config.model_dim
    x = nc.concat([block_state, nc.embedding(params["dec.embed"], prev_ids)], axis=-1)
    z_x = nc.linear(x, params["head.lstm_wx"], params["head.lstm_b"])
    return _lstm_cell(params, z_x, state, d)


def _lstm_cell(params, z_x, state, d):
    batch = z_x.shape[0]
    if state is None:
        zeros = np.zeros((batch, d), dtype=nc.default_dtype())
        state = (nc.Tensor(zeros), nc.Tensor(zeros))
    h, c = state
    z = nc.reshape(z_x + h @ params["head.lstm_wh"], (batch, 4, d))
    i, f, g, o = (z[:, 0], z[:, 1], z[:, 2], z[:, 3])
    c = nc.sigmoid(f) * c + nc.sigmoid(i) * nc.tanh(g)
    h = nc.sigmoid(o) * nc.tanh(c)
    return (h, c), h


def two_step_head(model, params, hidden, tgt):
    """Teacher-forced LSTM over character positions; returns hidden states (batch, L, d)."""
    d, delta = model.config.model_dim, model.config.decoder.delta
    tgt = np.asarray(tgt)
    batch, length = tgt.shape
    prev = np.concatenate([np.full((batch, 1), BOS, dtype=tgt.dtype), tgt[:, :-1]], axis=1)
    block_states = hidden[:, np.arange(length) // delta]
    x = nc.concat([block_states, nc.embedding(params["dec.embed"], prev)], axis=-1)
    z_x = nc.linear(x, params["head.lstm_wx"], params["head.lstm_b"])
    state, outputs = None, []
    for t in range(length):
        state, h = _lstm_cell(params, z_x[:, t], state, d)
        outputs.append(h)
    return nc.stack(outputs, axis=1)


def forward_logits(model, params, src, tgt, rng=None):
    """Teacher-forced logits (batch, L_tgt, V) aligned with ``tgt``."""
    cfg = model.config
    tgt = np.asarray(tgt)
    memory, src_pad = encode(model, params, src, rng)
    context = causal_context(tgt, cfg.decoder.delta, cfg.decoder.variant)
    hidden = decode_blocks(model, params, context, memory, src_pad, rng)
    if cfg.head == "direct":
        return output_projection(model, params, hidden)
    return output_projection(model, params, two_step_head(model, params, hidden, tgt))


def sequence_loss(model, params, batch, smoothing=0.0, rng=None):
    return nc.smoothed_ce(forward_logits(model, params, batch.src, batch.tgt, rng), batch.tgt, smoothing)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
@dataclass
class Checkpoint:
    config: ModelConfig
    store: nc.ParamStore
    step: int = 0
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def model(self):
        return Seq2Seq(self.config, self.store)


def save_checkpoint(ckpt, path):
    """
    Single file: 8-byte little-endian header length, a JSON manifest, then the
    raw little-endian float32 payload (parameters and Adam moments).
    """
    arrays, chunks, offset = [], [], 0
    for slot, table in (("param", ckpt.store.params), ("adam_m", ckpt.store.m), ("adam_v", ckpt.store.v)):
        for name, arr in table.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            arrays.append({"name": f"{slot}/{name}", "shape": list(arr.shape), "dtype": "<f4",
                           "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
    manifest = {"version": ckpt.version, "config": ckpt.config.to_dict(), "step": ckpt.step,
                "history": ckpt.history, "metadata": ckpt.metadata, "arrays": arrays}
    header = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise RuntimeError(f"{path} is not a checkpoint")
    (size,) = struct.unpack("<Q", raw[:8])
    manifest = json.loads(raw[8:8 + size].decode("utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise RuntimeError(f"unsupported checkpoint version {manifest.get('version')}")
    payload = memoryview(raw)[8 + size:]
    store = nc.ParamStore()
    slots = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise RuntimeError(f"checkpoint payload truncated at {entry['name']}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=entry["dtype"]).reshape(entry["shape"])
        slot, name = entry["name"].split("/", 1)
        slots[slot][name] = arr.astype(np.float32)
    for name, arr in slots["param"].items():
        store.add(name, arr)
        store.m[name] = slots["adam_m"].get(name, np.zeros_like(arr))
        store.v[name] = slots["adam_v"].get(name, np.zeros_like(arr))
    return Checkpoint(config=ModelConfig.from_dict(manifest["config"]), store=store, step=manifest["step"],
                      history=manifest["history"], metadata=manifest.get("metadata", {}),
                      version=manifest["version"])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
def split_holdout(pairs, fraction=0.1, seed=0):
    """Shuffle and cut off ``fraction`` of the pairs (at least one) for validation."""
    if len(pairs) < 2:
        raise ValueError("need at least two pairs to split off a validation set")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_valid = min(len(pairs) - 1, max(1, int(round(len(pairs) * fraction))))
    valid = [pairs[i] for i in order[:n_valid]]
    train = [pairs[i] for i in order[n_valid:]]
    return train, valid


def validation_loss(model, pairs, batch_size=64):
    """Token-weighted plain cross-entropy of teacher-forced predictions."""
    total, count = 0.0, 0
    with nc.no_grad():
        params = model.params(requires_grad=False)
        for batch in batch_pad(pairs, batch_size, model.config.encoder.delta, model.config.decoder.delta):
            tokens = int((batch.tgt != PAD).sum())
            total += sequence_loss(model, params, batch).item() * tokens
            count += tokens
    return total / max(count, 1)


def train_translation(model, pairs, hyper, valid_pairs=None, out_dir=None, holdout=0.1, log_every=50):
    """
    Teacher-forced training with label-smoothed cross-entropy, gradient
    clipping and early stopping on validation loss. Parameters of the best
    validation epoch are restored into ``model`` and returned in the checkpoint.
    """
    if not pairs:
        raise ValueError("empty training corpus")
    if valid_pairs is None:
        pairs, valid_pairs = split_holdout(pairs, holdout, hyper.seed)
    if not valid_pairs:
        raise ValueError("empty validation set")
    cfg = model.config
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    tracker = PatienceTracker(str(out_dir / "validation.json") if out_dir else None, hyper.patience)
    tracker.reset()  # fresh history per run
    aggregator = StepAggregator(log_every)
    shuffle_rng = np.random.default_rng(hyper.seed)
    dropout_rng = np.random.default_rng(hyper.seed + 1) if cfg.dropout > 0 else None
    best = model.store.copy()
    step, epoch = 0, 0
    started = time.time()

    for epoch in range(1, hyper.max_epochs + 1):
        order = shuffle_rng.permutation(len(pairs))
        batches = batch_pad([pairs[i] for i in order], hyper.batch_size, cfg.encoder.delta, cfg.decoder.delta)
        for batch in batches:
            step += 1
            params = model.params()
            loss = sequence_loss(model, params, batch, hyper.label_smoothing, dropout_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise RuntimeError(f"training diverged at step {step}: loss={value}")
            loss.backward()
            grads = nc.collect_grads(params)
            nc.clip_grad_norm(grads, hyper.clip_norm)
            nc.optimizer_step(model.store, grads, hyper, step)
            aggregator.add(step, value, hyper.learning_rate * nc.lr_schedule(step, hyper))
            if aggregator.should_flush():
                log(f"epoch {epoch} {aggregator.flush()}")
            if step >= hyper.max_steps:
                break
        val = validation_loss(model, valid_pairs)
        if tracker.update(val):
            best = model.store.copy()
        log(f"epoch {epoch} step {step} validation loss {val:.4f} (best {tracker.best:.4f}, "
            f"{tracker.bad_epochs}/{hyper.patience} without improvement)")
        if tracker.should_stop() or step >= hyper.max_steps:
            break
    if aggregator.buffer:
        log(f"epoch {epoch} {aggregator.flush()}")

    model.store = best
    metadata = {"schedule": hyper.schedule, "epochs": epoch, "seconds": round(time.time() - started, 3),
                "train_log": aggregator.records}
    return Checkpoint(config=cfg, store=best, step=step, history=list(tracker.history), metadata=metadata)


# ---------------------------------------------------------------------------
# evaluation and generation
# ---------------------------------------------------------------------------
@dataclass
class OffsetAccuracy:
    """Next-character accuracy under gold context, split by offset inside the block."""
    per_offset: list
    overall: Fraction
    hits: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def as_floats(self):
        return [float(a) for a in self.per_offset]


def teacher_forced_accuracy(model, pairs, batch_size=64):
    delta = model.config.decoder.delta
    hits, totals = np.zeros(delta, dtype=np.int64), np.zeros(delta, dtype=np.int64)
    with nc.no_grad():
        params = model.params(requires_grad=False)
        for batch in batch_pad(pairs, batch_size, model.config.encoder.delta, delta):
            predicted = forward_logits(model, params, batch.src, batch.tgt).data.argmax(axis=-1)
            valid = batch.tgt != PAD
            offsets = np.arange(batch.tgt.shape[1]) % delta
            for k in range(delta):
                column = valid & (offsets == k)[None, :]
                hits[k] += int((predicted[column] == batch.tgt[column]).sum())
                totals[k] += int(column.sum())
    per_offset = [Fraction(int(h), int(t)) if t else Fraction(0) for h, t in zip(hits, totals)]
    overall = Fraction(int(hits.sum()), int(totals.sum())) if totals.sum() else Fraction(0)
    return OffsetAccuracy(per_offset=per_offset, overall=overall, hits=hits.tolist(), totals=totals.tolist())


def leaked_offsets_accuracy(model, pairs, batch_size=64):
    """Teacher-forced accuracy pooled over the block offsets the decoder downsampler leaks."""
    offsets = leaked_offsets(model.config.decoder)
    result = teacher_forced_accuracy(model, pairs, batch_size)
    total = sum(result.totals[k] for k in offsets)
    return Fraction(sum(result.hits[k] for k in offsets), total) if total else Fraction(0)


@dataclass
class GenerationResult:
    ids: list
    truncated: bool


def _decode_loop(model, params, src, max_len, forced=None):
    """
    Block-synchronous greedy decoding for a padded source batch. Each round
    runs the decoder on the context built from already emitted characters
    only, then the head emits the next delta characters one at a time.
    ``forced`` (batch, >= max_len) replaces argmax choices by gold ids.
    Returns (emitted ids (batch, n), list of per-character logits arrays).
    """
    cfg = model.config
    delta, pad = cfg.decoder.delta, cfg.decoder.context_padding
    memory, src_pad = encode(model, params, src)
    batch = src.shape[0]
    emitted = np.zeros((batch, 0), dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    state, step_logits = None, []

    while emitted.shape[1] < max_len and not done.all():
        block = emitted.shape[1] // delta
        context = np.concatenate([np.full((batch, pad), BOS, dtype=np.int64), emitted], axis=1)
        context = context[:, :(block + 1) * delta]
        block_state = decode_blocks(model, params, context, memory, src_pad)[:, block]
        for _ in range(delta):
            if emitted.shape[1] >= max_len:
                break
            if cfg.head == "direct":
                logits = output_projection(model, params, block_state)
            else:
                prev = emitted[:, -1] if emitted.shape[1] else np.full(batch, BOS, dtype=np.int64)
                state, h = lstm_step(model, params, block_state, prev, state)
                logits = output_projection(model, params, h)
            position = emitted.shape[1]
            choice = forced[:, position] if forced is not None else logits.data.argmax(axis=-1)
            emitted = np.concatenate([emitted, choice[:, None].astype(np.int64)], axis=1)
            step_logits.append(logits.data)
            done |= choice == EOS
    return emitted, step_logits


def _strip(row):
    ids = row.tolist()
    if EOS in ids:
        return GenerationResult(ids=ids[:ids.index(EOS)], truncated=False)
    return GenerationResult(ids=ids, truncated=True)


def greedy_generate_batch(model, sources, max_len, batch_size=64):
    """Greedy outputs for many sources; ids exclude EOS, ``truncated`` marks max_len exhaustion."""
    results = []
    with nc.no_grad():
        params = model.params(requires_grad=False)
        for start in range(0, len(sources), batch_size):
            src, _ = pad_to_multiple(sources[start:start + batch_size], model.config.encoder.delta)
            if max_len <= 0:
                results.extend(GenerationResult(ids=[], truncated=True) for _ in range(src.shape[0]))
                continue
            emitted, _ = _decode_loop(model, params, src, max_len)
            results.extend(_strip(row) for row in emitted)
    return results


def greedy_generate(model, src, max_len):
    return greedy_generate_batch(model, [list(src)], max_len)[0]


def forced_decode_logits(model, src, tgt):
    """Logits from the generation code path with gold characters fed back, (1, len(tgt), V)."""
    with nc.no_grad():
        params = model.params(requires_grad=False)
        src_ids, _ = pad_to_multiple([list(src)], model.config.encoder.delta)
        forced = np.asarray([list(tgt)], dtype=np.int64)
        _, step_logits = _decode_loop(model, params, src_ids, len(tgt), forced=forced)
    return np.stack(step_logits, axis=1)


# ---------------------------------------------------------------------------
# speed
# ---------------------------------------------------------------------------
def default_bench_variants(model_dim=128, heads=4, ffn_dim=256):
    dims = {"model_dim": model_dim, "heads": heads, "ffn_dim": ffn_dim}
    return {
        "char direct d=1": ModelConfig.for_variant(1, "removal", head="direct", **dims),
        "char two_step d=1": ModelConfig.for_variant(1, "removal", head="two_step", **dims),
        "r-GBST d=2": ModelConfig.for_variant(2, "removal", **dims),
        "r-GBST d=4": ModelConfig.for_variant(4, "removal", **dims),
        "lee d=2": ModelConfig.for_variant(2, "lee", **dims),
        "lee d=4": ModelConfig.for_variant(4, "lee", **dims),
    }


def benchmark_step_time(variants, pairs, hyper, steps=5, warmup=1, gen_sentences=4, seed=0):
    """
    Median wall-clock per optimizer step and per generated sentence for each
    named ModelConfig on the same corpus.
    """
    if not pairs:
        raise ValueError("benchmark needs a non-empty corpus")
    rows = []
    for label, config in variants.items():
        model = build_model(config, seed=seed)
        batches = batch_pad(pairs[:hyper.batch_size], hyper.batch_size, config.encoder.delta, config.decoder.delta)
        timings = []
        for step in range(1, warmup + steps + 1):
            started = time.perf_counter()
            params = model.params()
            loss = sequence_loss(model, params, batches[0], hyper.label_smoothing)
            loss.backward()
            nc.optimizer_step(model.store, nc.collect_grads(params), hyper, step)
            if step > warmup:
                timings.append(time.perf_counter() - started)
        gen_times = []
        for pair in pairs[:gen_sentences]:
            started = time.perf_counter()
            greedy_generate(model, pair.src, max_len=len(pair.tgt))
            gen_times.append(time.perf_counter() - started)
        rows.append({"variant": label, "delta": config.decoder.delta, "head": config.head,
                     "ms_per_step": 1000 * float(np.median(timings)),
                     "ms_per_generation": 1000 * float(np.median(gen_times)) if gen_times else float("nan")})
    frame = pd.DataFrame(rows)
    if not frame.empty:
        frame["relative_step"] = frame["ms_per_step"] / frame["ms_per_step"].iloc[0]
    return frame
