"""
Command-line entry point.

    python cli.py leak-test --grid --steps 800 --out runs/leak
    python cli.py oracle --delta 4 --variant non_causal --pos-emb sinusoidal
    python cli.py gen-toy --task copy --count 20000 --prefix data/copy
    python cli.py train --preset desk --src data/copy.src --tgt data/copy.tgt --out runs/copy
    python cli.py translate --checkpoint runs/copy/checkpoint.bin --src data/test.src --output hyp.txt
    python cli.py evaluate --hyp hyp.txt --ref data/test.tgt
    python cli.py bench --preset desk

Exit codes: 0 success, 1 oracle/probe disagreement or training failure,
2 configuration or input error.
"""
import argparse
import json
import sys
from pathlib import Path

import pandas as pd

import leakaudit
from bytedata import byte_decode, byte_encode, gen_toy_pairs, load_parallel_corpus, read_lines
from downsamplers import POS_KINDS, VARIANTS, DownsamplerConfig
from launcher import run_concurrently
from metrics import evaluate_all
from progress import plot_records, records_to_tsv
from runconfig import (
    RESOLVED_CONFIG_NAME,
    ConfigError,
    PRESETS,
    atomic_write_text,
    load_run_config,
    write_resolved_config,
)
from runlog import log, setup_logging
import seq2seq

EXIT_OK, EXIT_DISAGREEMENT, EXIT_CONFIG = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="gbst-lab", description="Causal downsampling lab for byte-level seq2seq.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON run configuration")
    common.add_argument("--preset", type=str, default=None, choices=sorted(PRESETS))
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--log-level", type=str, default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    leak = sub.add_parser("leak-test", parents=[common], help="probe + oracle leak audit")
    leak.add_argument("--grid", action="store_true", help="every configured delta x variant x pos-emb cell")
    leak.add_argument("--delta", type=int, default=None)
    leak.add_argument("--variant", type=str, default=None, choices=VARIANTS)
    leak.add_argument("--pos-emb", type=str, default=None, choices=POS_KINDS)
    leak.add_argument("--pad-multiplier", type=int, default=None)
    leak.add_argument("--steps", type=int, default=None, help="probe training steps")
    leak.add_argument("--oracle-only", action="store_true", help="skip probe training")
    leak.add_argument("--parallel", type=int, default=1, help="run grid cells as N concurrent processes")
    leak.add_argument("--no-plot", action="store_true")

    oracle = sub.add_parser("oracle", parents=[common], help="static reachability fingerprint")
    oracle.add_argument("--delta", type=int, default=None)
    oracle.add_argument("--variant", type=str, default=None, choices=VARIANTS)
    oracle.add_argument("--pos-emb", type=str, default=None, choices=POS_KINDS)
    oracle.add_argument("--pad-multiplier", type=int, default=None)
    oracle.add_argument("--seq-len", type=int, default=None)

    train = sub.add_parser("train", parents=[common], help="train a translation model")
    train.add_argument("--src", type=str, default=None)
    train.add_argument("--tgt", type=str, default=None)
    train.add_argument("--valid-src", type=str, default=None)
    train.add_argument("--valid-tgt", type=str, default=None)
    train.add_argument("--delta", type=int, default=None)
    train.add_argument("--variant", type=str, default=None, choices=VARIANTS)
    train.add_argument("--pos-emb", type=str, default=None, choices=POS_KINDS)
    train.add_argument("--head", type=str, default=None, choices=seq2seq.HEADS)
    train.add_argument("--unsafe", action="store_true", help="allow a non-causal decoder")
    train.add_argument("--max-steps", type=int, default=None)
    train.add_argument("--epochs", type=int, default=None)

    translate = sub.add_parser("translate", parents=[common], help="greedy decoding of a source file")
    translate.add_argument("--checkpoint", type=str, default=None)
    translate.add_argument("--src", type=str, required=True)
    translate.add_argument("--output", type=str, default=None)
    translate.add_argument("--max-len", type=int, default=None, help="default: 2 * source bytes + 8")
    translate.add_argument("--batch-size", type=int, default=64)

    evaluate = sub.add_parser("evaluate", parents=[common], help="BLEU and accuracies of hypotheses")
    evaluate.add_argument("--hyp", type=str, required=True)
    evaluate.add_argument("--ref", type=str, required=True)

    bench = sub.add_parser("bench", parents=[common], help="relative step and generation time")
    bench.add_argument("--src", type=str, default=None)
    bench.add_argument("--tgt", type=str, default=None)

    toy = sub.add_parser("gen-toy", parents=[common], help="write a toy copy/reverse parallel corpus")
    toy.add_argument("--task", type=str, default="copy", choices=("copy", "reverse"))
    toy.add_argument("--count", type=int, default=20000)
    toy.add_argument("--min-len", type=int, default=1)
    toy.add_argument("--max-len", type=int, default=32)
    toy.add_argument("--vocab", type=int, default=32)
    toy.add_argument("--prefix", type=str, required=True, help="writes <prefix>.src and <prefix>.tgt")
    return parser


def _overrides(args):
    """CLI flags as a nested override dict for load_run_config."""
    data = {}

    def put(section, key, value):
        if value is not None:
            data.setdefault(section, {})[key] = value

    if args.seed is not None:
        data["seed"] = args.seed
    put("paths", "out", args.out)
    if args.command in ("leak-test", "oracle"):
        if args.delta is not None:
            put("probe", "deltas", [args.delta])
        if args.variant is not None:
            put("probe", "variants", [args.variant])
        if args.pos_emb is not None:
            put("probe", "pos_kinds", [args.pos_emb])
        put("probe", "pad_multiplier", args.pad_multiplier)
        put("probe", "steps", getattr(args, "steps", None))
        put("probe", "seq_len", getattr(args, "seq_len", None))
    if args.command == "train":
        put("paths", "src", args.src)
        put("paths", "tgt", args.tgt)
        put("paths", "valid_src", args.valid_src)
        put("paths", "valid_tgt", args.valid_tgt)
        put("model", "delta", args.delta)
        put("model", "variant", args.variant)
        put("model", "pos_embedding", args.pos_emb)
        put("model", "head", args.head)
        if args.unsafe:
            put("model", "unsafe", True)
        put("train", "max_steps", args.max_steps)
        put("train", "max_epochs", args.epochs)
    if args.command == "translate":
        put("paths", "checkpoint", args.checkpoint)
    if args.command == "bench":
        put("paths", "src", args.src)
        put("paths", "tgt", args.tgt)
    return data


def _prepare(args):
    config = load_run_config(args.config, args.preset, _overrides(args))
    out_dir = Path(config.paths.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(out_dir / "run.log", args.log_level)
    _, digest = write_resolved_config(config, out_dir)
    log(f"{args.command}: preset {config.preset}, seed {config.seed}, config sha256 {digest[:12]}")
    return config, out_dir, digest


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------
def cmd_leak_test(args):
    config, out_dir, digest = _prepare(args)
    p = config.probe
    single = args.delta is not None or args.variant is not None or args.pos_emb is not None
    if not args.grid and not single:
        raise ConfigError("leak-test needs --grid or at least one of --delta / --variant / --pos-emb")
    cells = leakaudit.build_grid_cells(p.deltas, p.variants, p.pos_kinds, seq_len=p.seq_len,
                                       probe_vocab=p.probe_vocab, seed=config.seed,
                                       pad_multiplier=p.pad_multiplier)
    if not cells:
        raise ConfigError("the requested grid has no valid cells")
    if args.parallel > 1 and len(cells) > 1:
        return _leak_test_parallel(args, config, cells, out_dir, digest)

    bundle = leakaudit.audit_grid(p.deltas, p.variants, p.pos_kinds, training=config.probe_training(),
                                  seed=config.seed, probe=not args.oracle_only, pad_multiplier=p.pad_multiplier,
                                  seq_len=p.seq_len, probe_vocab=p.probe_vocab, oracle_seeds=tuple(p.oracle_seeds))
    leakaudit.write_reports(bundle, out_dir, digest, plot=not args.no_plot)
    for cell in bundle.cells:
        flagged = sorted(cell.report.flagged()) if cell.report else "-"
        log(f"{cell.config.fingerprint()} pad x{cell.spec.pad_multiplier}: "
            f"oracle {sorted(cell.oracle.fingerprint)} probe {flagged}")
        for warning in cell.warnings:
            log(f"warning: {warning}")
    if not bundle.ok:
        log(f"{len(bundle.disagreements)} oracle/probe disagreements, see {out_dir / 'disagreements.txt'}")
        return EXIT_DISAGREEMENT
    return EXIT_OK


def _leak_test_parallel(args, config, cells, out_dir, digest):
    """One subprocess per cell, then merge their reports."""
    script = str(Path(__file__).resolve())
    resolved = str(out_dir / RESOLVED_CONFIG_NAME)
    cell_dirs, commands = [], []
    for cell_config, spec in cells:
        cell_dir = out_dir / "cells" / f"{cell_config.fingerprint()}-pad{spec.pad_multiplier}"
        cell_dirs.append(cell_dir)
        argv = [script, "leak-test", "--config", resolved, "--out", str(cell_dir),
                "--delta", str(cell_config.delta), "--variant", cell_config.variant,
                "--pos-emb", cell_config.pos_embedding, "--pad-multiplier", str(spec.pad_multiplier),
                "--no-plot", "--log-level", args.log_level]
        if args.oracle_only:
            argv.append("--oracle-only")
        commands.append(argv)
    log(f"running {len(commands)} cells, {args.parallel} at a time")
    codes = run_concurrently(commands, max_parallel=args.parallel)
    failed = [str(d) for d, code in zip(cell_dirs, codes) if code not in (EXIT_OK, EXIT_DISAGREEMENT)]
    if failed:
        raise RuntimeError(f"grid cells failed: {failed}")
    merge_cell_reports(cell_dirs, out_dir, digest, plot=not args.no_plot)
    return EXIT_DISAGREEMENT if any(code == EXIT_DISAGREEMENT for code in codes) else EXIT_OK


def merge_cell_reports(cell_dirs, out_dir, digest=None, plot=True):
    """Concatenate per-cell leak reports into one set of report files in ``out_dir``."""
    frames, oracles, disagreements = [], [], []
    for cell_dir in cell_dirs:
        cell_dir = Path(cell_dir)
        tsv = cell_dir / "leak_report.tsv"
        if tsv.exists() and tsv.stat().st_size:
            frame = leakaudit.read_report_tsv(tsv)
            if not frame.empty:
                frames.append(frame)
        oracles.extend(json.loads((cell_dir / "oracle.json").read_text(encoding="utf-8")))
        disagreements.extend(line for line in (cell_dir / "disagreements.txt").read_text(encoding="utf-8").splitlines()
                             if line)
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=leakaudit.TSV_COLUMNS)
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / "leak_report.tsv", frame.to_csv(sep="\t", index=False, lineterminator="\n"))
    atomic_write_text(out_dir / "leak_report.md", leakaudit.render_markdown(frame, digest))
    atomic_write_text(out_dir / "oracle.json", json.dumps(oracles, indent=2))
    atomic_write_text(out_dir / "disagreements.txt", "".join(f"{d}\n" for d in disagreements))
    if plot and not frame.empty:
        leakaudit.plot_leak_grid(frame, out_dir / "leak_heatmap.png")
    return frame, disagreements


def cmd_oracle(args):
    config, out_dir, _ = _prepare(args)
    p = config.probe
    delta = p.deltas[0] if args.delta is None else args.delta
    variant = p.variants[0] if args.variant is None else args.variant
    kind = p.pos_kinds[0] if args.pos_emb is None else args.pos_emb
    try:
        ds_config = DownsamplerConfig(delta=delta, variant=variant, pos_embedding=kind)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    spec = config.probe_spec(delta, p.pad_multiplier or (2 if variant == "padding" else 1))
    reach = leakaudit.reachability_oracle(ds_config, spec, tuple(p.oracle_seeds))
    atomic_write_text(out_dir / "oracle.json", json.dumps(reach.to_dict(), indent=2))
    print(f"{ds_config.fingerprint()} pad x{spec.pad_multiplier}: {sorted(reach.fingerprint)}")
    return EXIT_OK


def _load_pairs(config, src, tgt):
    if not src or not tgt:
        raise ConfigError("source and target files are required (--src / --tgt or paths.src / paths.tgt)")
    return load_parallel_corpus(src, tgt, config.train.max_src_chars)


def cmd_train(args):
    config, out_dir, digest = _prepare(args)
    pairs = _load_pairs(config, config.paths.src, config.paths.tgt)
    valid = None
    if config.paths.valid_src or config.paths.valid_tgt:
        valid = _load_pairs(config, config.paths.valid_src, config.paths.valid_tgt)
    model = seq2seq.build_model(config.model_config(), seed=config.seed)
    log(f"model {model.config.decoder.fingerprint()} head {model.config.head}: "
        f"{model.store.num_parameters()} parameters, {len(pairs)} pairs")
    ckpt = seq2seq.train_translation(model, pairs, config.train_hyper(), valid_pairs=valid, out_dir=out_dir,
                                     holdout=config.train.holdout, log_every=config.train.log_every)
    ckpt.metadata["config_sha256"] = digest
    path = seq2seq.save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    records = ckpt.metadata.get("train_log", [])
    atomic_write_text(out_dir / "train_log.tsv", records_to_tsv(records))
    if records:
        plot_records(records, out_dir / "train_loss.png")
    log(f"saved {path} after {ckpt.step} steps")
    return EXIT_OK


def _one_line(text):
    """Line breaks inside a hypothesis become spaces so outputs stay line-aligned with sources."""
    return " ".join(text.replace("\r\n", "\n").replace("\r", "\n").split("\n"))


def cmd_translate(args):
    config, out_dir, _ = _prepare(args)
    if not config.paths.checkpoint:
        raise ConfigError("translate needs --checkpoint")
    model = seq2seq.load_checkpoint(config.paths.checkpoint).model()
    sources = [byte_encode(line, add_eos=True) for line in read_lines(args.src)]
    hyps = []
    for start in range(0, len(sources), args.batch_size):
        chunk = sources[start:start + args.batch_size]
        max_len = args.max_len or 2 * max((len(s) for s in chunk), default=1) + 8
        hyps.extend(seq2seq.greedy_generate_batch(model, chunk, max_len, args.batch_size))
    truncated = sum(h.truncated for h in hyps)
    output = Path(args.output) if args.output else out_dir / "hypotheses.txt"
    atomic_write_text(output, "".join(_one_line(byte_decode(h.ids)) + "\n" for h in hyps))
    log(f"translated {len(hyps)} lines into {output} ({truncated} hit the length limit)")
    return EXIT_OK


def cmd_evaluate(args):
    _, out_dir, _ = _prepare(args)
    results = evaluate_all(read_lines(args.hyp), read_lines(args.ref))
    payload = [r.to_dict() for r in results]
    atomic_write_text(out_dir / "metrics.json", json.dumps(payload, indent=2))
    for r in results:
        print(f"{r.metric}\t{r.value:.4f}" if r.metric != "bleu" else f"bleu\t{r.value:.2f}")
    return EXIT_OK


def cmd_bench(args):
    config, out_dir, _ = _prepare(args)
    b = config.bench
    if config.paths.src or config.paths.tgt:
        pairs = _load_pairs(config, config.paths.src, config.paths.tgt)
    else:
        pairs = gen_toy_pairs("copy", b.pairs, (b.max_len, b.max_len), 32, config.seed)
    m = config.model
    variants = seq2seq.default_bench_variants(m.model_dim, m.heads, m.ffn_dim)
    frame = seq2seq.benchmark_step_time(variants, pairs, config.train_hyper(), steps=b.steps, warmup=b.warmup,
                                        gen_sentences=b.gen_sentences, seed=config.seed)
    atomic_write_text(out_dir / "bench.tsv", frame.to_csv(sep="\t", index=False, lineterminator="\n"))
    atomic_write_text(out_dir / "bench.md", markdown_table(frame))
    print(frame.to_string(index=False))
    return EXIT_OK


def markdown_table(frame):
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    rows = ["| " + " | ".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in row) + " |"
            for row in frame.itertuples(index=False)]
    return "\n".join([header, rule] + rows) + "\n"


def cmd_gen_toy(args):
    config, _, _ = _prepare(args)
    pairs = gen_toy_pairs(args.task, args.count, (args.min_len, args.max_len), args.vocab, config.seed)
    prefix = Path(args.prefix)
    atomic_write_text(prefix.with_name(prefix.name + ".src"), "".join(byte_decode(p.src) + "\n" for p in pairs))
    atomic_write_text(prefix.with_name(prefix.name + ".tgt"), "".join(byte_decode(p.tgt) + "\n" for p in pairs))
    log(f"wrote {len(pairs)} {args.task} pairs to {prefix}.src / {prefix}.tgt")
    return EXIT_OK


COMMANDS = {
    "leak-test": cmd_leak_test,
    "oracle": cmd_oracle,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "gen-toy": cmd_gen_toy,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DISAGREEMENT


if __name__ == "__main__":
    sys.exit(main())
