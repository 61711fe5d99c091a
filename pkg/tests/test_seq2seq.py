import json
import struct

import numpy as np
import pytest

import numcore as nc
from bytedata import EOS, batch_pad, gen_toy_pairs, pad_to_multiple
from downsamplers import DownsamplerConfig
from metrics import char_accuracy, sequence_accuracy
from seq2seq import (
    Checkpoint,
    ModelConfig,
    Seq2Seq,
    benchmark_step_time,
    build_model,
    default_bench_variants,
    forced_decode_logits,
    greedy_generate,
    greedy_generate_batch,
    leaked_offsets_accuracy,
    load_checkpoint,
    save_checkpoint,
    sequence_loss,
    split_holdout,
    teacher_forced_accuracy,
    train_translation,
    validation_loss,
)

TINY = {"model_dim": 16, "heads": 2, "ffn_dim": 32, "enc_layers": 1, "dec_layers": 1}


def _tiny(delta=1, variant="removal", **kwargs):
    return ModelConfig.for_variant(delta, variant, **dict(TINY, **kwargs))


def _toy(count=24, seed=0, high=7):
    return gen_toy_pairs("copy", count, (2, high), 8, seed=seed)


# ---------------------------------------------------------------------------
# configuration guards
# ---------------------------------------------------------------------------
def test_direct_head_rejected_above_delta_one():
    with pytest.raises(ValueError):
        _tiny(2, head="direct")


def test_non_causal_decoder_needs_unsafe():
    with pytest.raises(ValueError):
        _tiny(2, "non_causal", unsafe=False)
    assert _tiny(2, "non_causal").unsafe


def test_config_rejects_mismatched_widths_and_heads():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=16, heads=3, encoder=DownsamplerConfig(model_dim=16, orders=(1,)),
                    decoder=DownsamplerConfig(variant="removal", model_dim=16))
    with pytest.raises(ValueError):
        ModelConfig(model_dim=16, heads=2)
    with pytest.raises(ValueError):
        build_model({"model_dim": 16})


def test_config_dict_round_trip():
    config = _tiny(4, "lee")
    again = ModelConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert again == config
    assert again.encoder.variant == "lee" and again.head == "two_step"


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("delta,variant", [(1, "removal"), (2, "removal"), (2, "masking"), (2, "padding"), (4, "lee")])
def test_logit_shapes(delta, variant):
    model = build_model(_tiny(delta, variant), seed=1)
    (batch,) = batch_pad(_toy(3), 3, delta)
    logits = model.logits(batch.src, batch.tgt)
    assert logits.shape == batch.tgt.shape + (model.config.vocab_size,)
    assert np.isfinite(logits.data).all()


def test_removal_halves_decoder_blocks():
    from seq2seq import decode_blocks, encode

    model = build_model(_tiny(2), seed=0)
    (batch,) = batch_pad(_toy(2), 2, 2)
    with nc.no_grad():
        params = model.params(requires_grad=False)
        memory, pad = encode(model, params, batch.src)
        hidden = decode_blocks(model, params, batch.tgt, memory, pad)
    assert hidden.shape[1] == batch.tgt.shape[1] // 2
    assert memory.shape[1] == batch.src.shape[1] // 2


@pytest.mark.parametrize("delta,variant", [(1, "removal"), (2, "removal"), (3, "masking"), (2, "padding"), (2, "lee")])
def test_prefix_freeze(delta, variant):
    """Changing target character j never moves the logits of positions 0..j."""
    model = build_model(_tiny(delta, variant), seed=2)
    rng = np.random.default_rng(delta)
    src, _ = pad_to_multiple([list(rng.integers(40, 60, size=9))], delta)
    tgt, _ = pad_to_multiple([list(rng.integers(40, 60, size=12))], delta)
    base = model.logits(src, tgt).data
    for j in range(tgt.shape[1]):
        changed = tgt.copy()
        changed[0, j] = 3 + (changed[0, j] + 17) % 250
        moved = model.logits(src, changed).data
        np.testing.assert_allclose(moved[0, :j + 1], base[0, :j + 1], atol=1e-5, rtol=0)


def test_non_causal_decoder_sees_the_future():
    model = build_model(_tiny(2, "non_causal", pos_embedding="conv"), seed=2)
    src = np.array([[50, 51, 52, EOS]])
    tgt = np.array([[60, 61, 62, 63, 64, 65]])
    base = model.logits(src, tgt).data
    changed = tgt.copy()
    changed[0, 2] = 90
    assert np.abs(model.logits(src, changed).data[0, 2] - base[0, 2]).max() > 1e-4


@pytest.mark.parametrize("delta,head", [(1, "direct"), (1, "two_step"), (2, "two_step"), (4, "two_step")])
def test_forced_generation_matches_teacher_forcing(delta, head):
    model = build_model(_tiny(delta, head=head), seed=3)
    src = [45, 46, 47, 48, 49, EOS]
    tgt = [70, 71, 72, 73, 74, 75, 76, EOS]
    free = forced_decode_logits(model, src, tgt)
    src_ids, _ = pad_to_multiple([src], delta)
    tgt_ids, _ = pad_to_multiple([tgt], delta)
    forced = model.logits(src_ids, tgt_ids).data[:, :len(tgt)]
    assert free.shape == forced.shape
    np.testing.assert_allclose(free, forced, atol=1e-4, rtol=1e-4)


def test_tied_embeddings_share_the_decoder_table():
    model = build_model(_tiny(2, tie_embeddings=True), seed=0)
    assert "head.w" not in model.store
    (batch,) = batch_pad(_toy(2), 2, 2)
    assert model.logits(batch.src, batch.tgt).shape[-1] == model.config.vocab_size


# ---------------------------------------------------------------------------
# gradients through the two-step head
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(20))
def test_two_step_head_gradients(seed):
    config = ModelConfig.for_variant(2, "removal", model_dim=4, heads=1, ffn_dim=8, enc_layers=1, dec_layers=1)
    model = Seq2Seq(config, seed=seed)
    (batch,) = batch_pad(gen_toy_pairs("copy", 2, (2, 3), 5, seed=seed), 2, 2)
    checked = [n for n in model.store if n.startswith("head.") or n == "dec.embed"]

    def fn(p):
        tensors = {n: nc.Tensor(np.asarray(a, dtype=np.float64)) for n, a in model.store.params.items()}
        tensors.update(p)
        return sequence_loss(model, tensors, batch, smoothing=0.1)

    report = nc.grad_check(fn, {n: model.store[n] for n in checked}, eps=1e-4, seed=seed, max_elements=24)
    assert report.passed, report.errors


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    model = build_model(_tiny(2), seed=4)
    model.store.m["head.b"] += 0.25
    ckpt = Checkpoint(config=model.config, store=model.store, step=17, history=[3.2, 2.9], metadata={"k": "v"})
    path = save_checkpoint(ckpt, tmp_path / "model.bin")
    loaded = load_checkpoint(path)
    assert loaded.step == 17 and loaded.history == [3.2, 2.9] and loaded.metadata == {"k": "v"}
    assert loaded.config == model.config
    for name in model.store:
        np.testing.assert_array_equal(loaded.store[name], model.store[name])
    np.testing.assert_array_equal(loaded.store.m["head.b"], model.store.m["head.b"])
    (batch,) = batch_pad(_toy(3), 3, 2)
    np.testing.assert_array_equal(loaded.model().logits(batch.src, batch.tgt).data,
                                  model.logits(batch.src, batch.tgt).data)


def test_checkpoint_framing(tmp_path):
    model = build_model(_tiny(), seed=0)
    raw = save_checkpoint(Checkpoint(config=model.config, store=model.store), tmp_path / "m.bin").read_bytes()
    (length,) = struct.unpack("<Q", raw[:8])
    manifest = json.loads(raw[8:8 + length].decode("utf-8"))
    payload = raw[8 + length:]
    last = max(manifest["arrays"], key=lambda a: a["offset"])
    assert len(payload) == last["offset"] + last["nbytes"]


def test_checkpoint_rejects_other_versions_and_truncation(tmp_path):
    model = build_model(_tiny(), seed=0)
    path = save_checkpoint(Checkpoint(config=model.config, store=model.store, version=99), tmp_path / "old.bin")
    with pytest.raises(RuntimeError):
        load_checkpoint(path)
    good = save_checkpoint(Checkpoint(config=model.config, store=model.store), tmp_path / "good.bin")
    cut = tmp_path / "cut.bin"
    cut.write_bytes(good.read_bytes()[:-16])
    with pytest.raises(RuntimeError):
        load_checkpoint(cut)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
def test_split_holdout():
    pairs = _toy(10)
    train, valid = split_holdout(pairs, 0.1, seed=0)
    assert len(train) == 9 and len(valid) == 1
    assert valid[0] not in train or pairs.count(valid[0]) > 1
    with pytest.raises(ValueError):
        split_holdout(pairs[:1])


def _hyper(**kwargs):
    base = {"optimizer": "adam", "learning_rate": 3e-3, "batch_size": 8, "max_steps": 30, "max_epochs": 10,
            "patience": 10, "clip_norm": 1.0, "seed": 0}
    return nc.TrainHyper(**dict(base, **kwargs))


def test_training_reduces_validation_loss(tmp_path):
    pairs = _toy(32, seed=1)
    model = build_model(_tiny(), seed=0)
    before = validation_loss(model, pairs)
    ckpt = train_translation(model, pairs, _hyper(), valid_pairs=pairs, out_dir=tmp_path, log_every=10)
    assert validation_loss(model, pairs) < before
    assert 0 < ckpt.step <= 30
    assert ckpt.history and min(ckpt.history) < before
    assert (tmp_path / "validation.json").exists()
    assert ckpt.metadata["train_log"]


def test_training_is_deterministic():
    pairs = _toy(16, seed=2)
    runs = []
    for _ in range(2):
        model = build_model(_tiny(2), seed=5)
        runs.append(train_translation(model, pairs, _hyper(max_steps=6), valid_pairs=pairs[:4]).history)
    assert runs[0] == runs[1]


def test_rerun_into_same_directory_reproduces(tmp_path):
    pairs = _toy(32, seed=1)
    runs = []
    for _ in range(2):
        model = build_model(_tiny(), seed=0)
        ckpt = train_translation(model, pairs, _hyper(), valid_pairs=pairs, out_dir=tmp_path)
        runs.append((ckpt.step, ckpt.history, validation_loss(model, pairs)))
    assert runs[0] == runs[1]
    assert json.loads((tmp_path / "validation.json").read_text())["history"] == runs[1][1]


def test_training_rejects_empty_corpus():
    with pytest.raises(ValueError):
        train_translation(build_model(_tiny()), [], _hyper())


# ---------------------------------------------------------------------------
# evaluation and generation
# ---------------------------------------------------------------------------
def test_untrained_accuracy_near_chance():
    model = build_model(_tiny(2), seed=0)
    result = teacher_forced_accuracy(model, _toy(40, seed=3))
    assert len(result.per_offset) == 2
    assert float(result.overall) < 0.2


def test_greedy_generate_flags_truncation():
    model = build_model(_tiny(2), seed=0)
    result = greedy_generate(model, [50, 51, EOS], max_len=5)
    if result.truncated:
        assert len(result.ids) == 5
    else:
        assert len(result.ids) < 5 and EOS not in result.ids
    empty = greedy_generate(model, [50, EOS], max_len=0)
    assert empty.ids == [] and empty.truncated


def test_batched_generation_matches_single():
    model = build_model(_tiny(2), seed=6)
    sources = [[50, 51, 52, 53, 54, EOS], [60, 61, 62, 63, 64, EOS]]
    batched = greedy_generate_batch(model, sources, max_len=6, batch_size=2)
    for src, result in zip(sources, batched):
        assert greedy_generate(model, src, max_len=6).ids == result.ids


def test_benchmark_table_columns():
    variants = {k: v for k, v in default_bench_variants(**{k: TINY[k] for k in ("model_dim", "heads", "ffn_dim")}).items()
                if k in ("char direct d=1", "r-GBST d=2")}
    frame = benchmark_step_time(variants, _toy(8), _hyper(batch_size=4), steps=2, warmup=1, gen_sentences=1)
    assert list(frame["variant"]) == ["char direct d=1", "r-GBST d=2"]
    assert frame["relative_step"].iloc[0] == 1.0
    assert (frame["ms_per_step"] > 0).all()
    with pytest.raises(ValueError):
        benchmark_step_time(variants, [], _hyper())


# ---------------------------------------------------------------------------
# toy copy task
# ---------------------------------------------------------------------------
def _copy_corpus():
    pairs = gen_toy_pairs("copy", 20000, (1, 32), 32, seed=0)
    return pairs[:19000], pairs[19000:19200]


def _train_copy(config, max_steps=6000):
    train, valid = _copy_corpus()
    model = build_model(config, seed=0)
    hyper = nc.TrainHyper(optimizer="adam", learning_rate=1e-3, warmup_steps=200, batch_size=32,
                          max_steps=max_steps, patience=3, seed=0)
    train_translation(model, train, hyper, valid_pairs=valid[:100], log_every=500)
    return model, valid


def _free_running(model, pairs):
    results = greedy_generate_batch(model, [p.src for p in pairs], max_len=40)
    hyps = [r.ids for r in results]
    refs = [p.tgt[:-1] for p in pairs]
    return char_accuracy(hyps, refs), sequence_accuracy(hyps, refs)


@pytest.mark.slow
def test_char_level_copy():
    model, valid = _train_copy(ModelConfig.for_variant(1, "removal", model_dim=64, heads=4, ffn_dim=128))
    chars, _ = _free_running(model, valid)
    assert chars.value >= 0.99


@pytest.mark.slow
def test_removal_gbst_copy():
    model, valid = _train_copy(ModelConfig.for_variant(2, "removal", model_dim=64, heads=4, ffn_dim=128))
    chars, _ = _free_running(model, valid)
    assert chars.value >= 0.95


@pytest.mark.slow
def test_non_causal_decoder_cheats():
    config = ModelConfig.for_variant(2, "non_causal", model_dim=64, heads=4, ffn_dim=128, pos_embedding="conv")
    model, valid = _train_copy(config, max_steps=3000)
    assert float(leaked_offsets_accuracy(model, valid)) >= 0.95
    _, sequences = _free_running(model, valid)
    assert sequences.value <= 0.05


@pytest.mark.slow
def test_step_time_trend():
    pairs = gen_toy_pairs("copy", 64, (24, 32), 32, seed=0)
    hyper = nc.TrainHyper(batch_size=32)
    variants = default_bench_variants(model_dim=64, heads=4, ffn_dim=128)
    frame = benchmark_step_time(variants, pairs, hyper, steps=5, warmup=1, gen_sentences=0).set_index("variant")
    ms = frame["ms_per_step"]
    assert ms["r-GBST d=4"] < ms["r-GBST d=2"] < ms["char two_step d=1"]
    assert ms["char two_step d=1"] > ms["char direct d=1"]
