"""
Information-leak auditing for downsamplers.

Two detectors look at the same question: can the block that predicts target
position t see the input position that holds t?

  * the probe: downsampler + linear upsampler trained on random sequences;
    above-chance accuracy at a position (exact binomial tail) is a leak.
  * the reachability oracle: bump one embedding row at a time under random
    parameters and record which blocks move.

audit_grid runs both per configuration and reports every disagreement.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logsumexp

import numcore as nc
from bytedata import OFFSET, PROBE_ID_BASE, ProbeSpec, make_probe_batch
from downsamplers import (
    DownsamplerConfig,
    downsample,
    init_downsampler_params,
    init_upsampler_params,
    upsample_linear,
)
from runconfig import atomic_write_text
from runlog import log

LEAK_P = 1e-10
NO_LEAK_P = 1e-3
SENSITIVITY_TOL = 1e-6
TSV_COLUMNS = ["config", "delta", "variant", "pos", "accuracy", "successes", "n", "p_value", "verdict"]
VERDICT_COLOURS = {"leak": "red", "no_leak": "white", "inconclusive": "grey"}


@dataclass
class ProbeTraining:
    """Probe optimisation settings; defaults are the full leak-test recipe."""
    steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-4
    eval_batches: int = 100
    model_dim: int = 128
    log_every: int = 500


@dataclass
class PositionStat:
    pos: int
    accuracy: float
    successes: int
    n_samples: int
    p_value: float
    verdict: str


@dataclass
class LeakReport:
    config: str
    delta: int
    variant: str
    pos_embedding: str
    seed: int
    chance: float
    positions: list = field(default_factory=list)

    def fingerprint(self, verdict="leak"):
        """1-indexed positions carrying ``verdict``."""
        return {p.pos for p in self.positions if p.verdict == verdict}

    def flagged(self):
        """Positions with p < 1e-3, i.e. anything that is not a clean no_leak."""
        return {p.pos for p in self.positions if p.verdict != "no_leak"}


def cell_fingerprint(report):
    """Flagged target positions (1-indexed) of one probe report."""
    return report.flagged()


@dataclass
class ReachabilitySet:
    """
    Per target position (1-indexed in ``fingerprint``): whether the predicting
    block's receptive field covers the input position that carries it.
    """
    config: str
    seq_len: int
    delta: int
    padding: int
    reachable: list
    derivation: dict
    sensitivity: list

    @property
    def fingerprint(self):
        return {t + 1 for t, hit in enumerate(self.reachable) if hit}

    def to_dict(self):
        data = asdict(self)
        data["fingerprint"] = sorted(self.fingerprint)
        return data


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------
def binom_pvalue(successes, n, chance):
    """
    One-sided exact upper tail P(X >= successes) for X ~ Binomial(n, chance), summed in log space.

    log C(n, k) starts from the exact integer coefficient at k = successes and
    walks forward by the ratio (n - k) / (k + 1).
    """
    if not 0 <= successes <= n:
        raise ValueError(f"need 0 <= successes <= n, got {successes}, {n}")
    if successes == 0:
        return 1.0
    if chance <= 0:
        return 0.0
    if chance >= 1:
        return 1.0
    k = np.arange(successes, n + 1, dtype=np.float64)
    steps = np.log((n - k[:-1]) / (k[:-1] + 1))
    log_comb = math.log(math.comb(n, successes)) + np.concatenate(([0.0], np.cumsum(steps)))
    log_terms = log_comb + k * math.log(chance) + (n - k) * math.log1p(-chance)
    return float(min(1.0, math.exp(logsumexp(log_terms))))


def verdict_for(p_value):
    if p_value < LEAK_P:
        return "leak"
    if p_value > NO_LEAK_P:
        return "no_leak"
    return "inconclusive"


# ---------------------------------------------------------------------------
# the trainable probe
# ---------------------------------------------------------------------------
def probe_model_config(config, training):
    """The downsampler config the probe trains, at the probe's width."""
    data = asdict(config)
    data["model_dim"] = training.model_dim
    return DownsamplerConfig(**data)


def init_probe(config, spec, training, seed):
    rng = np.random.default_rng(seed)
    store = nc.ParamStore()
    init_downsampler_params(store, config, OFFSET + spec.probe_vocab, rng)
    init_upsampler_params(store, config.model_dim, config.delta, spec.probe_vocab, rng)
    return store


def probe_logits(params, inputs, config, spec):
    blocks = downsample(inputs, config, params)[:, :spec.seq_len // config.delta]
    logits = upsample_linear(blocks, config.delta, spec.probe_vocab, params)
    batch = inputs.shape[0]
    return nc.reshape(logits, (batch, spec.seq_len, spec.probe_vocab))


def train_probe(config, spec, training=None, seed=None):
    """
    Train downsampler + upsampler to predict random targets from their
    BOS-shifted copy with Adam. Fresh random batches every step.

    :returns: (ParamStore, DownsamplerConfig actually trained, list of losses)
    """
    training = training or ProbeTraining()
    seed = spec.seed if seed is None else seed
    if spec.seq_len % config.delta or spec.delta != config.delta:
        raise ValueError(f"probe spec delta {spec.delta} / seq_len {spec.seq_len} do not fit config delta {config.delta}")
    config = probe_model_config(config, training)
    store = init_probe(config, spec, training, seed)
    hyper = nc.TrainHyper(optimizer="adam", learning_rate=training.learning_rate,
                          batch_size=training.batch_size, max_steps=training.steps, clip_norm=0.0)
    rng = np.random.default_rng(seed + 1)
    losses = []
    started = time.time()
    for step in range(1, training.steps + 1):
        inputs, targets = make_probe_batch(spec, training.batch_size, rng)
        params = store.tensors()
        loss = nc.smoothed_ce(probe_logits(params, inputs, config, spec), targets - PROBE_ID_BASE, ignore_id=None)
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError(f"probe diverged at step {step} ({config.fingerprint()}): loss={value}")
        loss.backward()
        nc.optimizer_step(store, nc.collect_grads(params), hyper, step)
        losses.append(value)
        if training.log_every and step % training.log_every == 0:
            log(f"probe {config.fingerprint()} step {step}/{training.steps} "
                f"loss {np.mean(losses[-training.log_every:]):.4f} ({time.time() - started:.1f}s)")
    return store, config, losses


def eval_probe(store, config, spec, n_batches=100, batch_size=32, seed=None):
    """Per-position accuracy over n_batches * batch_size fresh samples, with p-values."""
    rng = np.random.default_rng((spec.seed if seed is None else seed) + 7919)
    successes = np.zeros(spec.seq_len, dtype=np.int64)
    with nc.no_grad():
        params = store.tensors(requires_grad=False)
        for _ in range(n_batches):
            inputs, targets = make_probe_batch(spec, batch_size, rng)
            predicted = probe_logits(params, inputs, config, spec).data.argmax(axis=-1)
            successes += (predicted == targets - PROBE_ID_BASE).sum(axis=0)
    n = n_batches * batch_size
    report = LeakReport(config=config.fingerprint(), delta=config.delta, variant=config.variant,
                        pos_embedding=config.pos_embedding, seed=spec.seed, chance=spec.chance)
    for t in range(spec.seq_len):
        k = int(successes[t])
        p = binom_pvalue(k, n, spec.chance)
        report.positions.append(PositionStat(pos=t + 1, accuracy=k / n, successes=k, n_samples=n,
                                             p_value=p, verdict=verdict_for(p)))
    return report


# ---------------------------------------------------------------------------
# the reachability oracle
# ---------------------------------------------------------------------------
def block_sensitivity(config, length, seeds=(0, 1, 2), vocab_size=OFFSET + 100, bump=1.0):
    """
    Boolean (blocks, positions) matrix: entry [b, j] is True when bumping the
    embedding row at input position j moves block b by more than 1e-6 for
    any of the random parameter draws.
    """
    if length % config.delta:
        raise ValueError(f"length {length} is not divisible by delta {config.delta}")
    blocks = length // config.delta
    hit = np.zeros((blocks, length), dtype=bool)
    with nc.no_grad(), nc.precision(np.float64):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            store = init_downsampler_params(nc.ParamStore(np.float64), config, vocab_size, rng)
            params = store.tensors(requires_grad=False)
            tokens = rng.integers(OFFSET, vocab_size, size=(1, length))
            base = downsample(tokens, config, params).data[0]
            for j in range(length):
                offset = np.zeros((1, length, config.model_dim))
                offset[0, j] = rng.normal(0.0, bump, size=config.model_dim)
                moved = downsample(tokens, config, params, embed_offset=offset).data[0]
                hit[:, j] |= np.abs(moved - base).max(axis=-1) > SENSITIVITY_TOL
    return hit


def reachability_oracle(config, spec, seeds=(0, 1, 2)):
    """Which target positions can leak under the probe layout of ``spec``."""
    hit = block_sensitivity(config, spec.input_len, seeds, OFFSET + spec.probe_vocab)[:spec.seq_len // config.delta]
    reachable, derivation = [], {}
    for t in range(spec.seq_len):
        block = t // config.delta
        carrier = t + spec.padding
        derivation[t + 1] = [int(j) + 1 for j in np.flatnonzero(hit[block])]
        reachable.append(bool(hit[block, carrier]))
    return ReachabilitySet(config=config.fingerprint(), seq_len=spec.seq_len, delta=config.delta,
                           padding=spec.padding, reachable=reachable, derivation=derivation,
                           sensitivity=hit.astype(int).tolist())


def leaked_offsets(config, length=None, seeds=(0, 1, 2)):
    """
    Within-block offsets (0-based) whose gold character the block itself can
    see under one-block BOS padding.
    """
    length = length or 4 * config.delta
    spec = ProbeSpec(seq_len=length, delta=config.delta, pad_multiplier=1)
    oracle = reachability_oracle(config, spec, seeds)
    return sorted({(t - 1) % config.delta for t in oracle.fingerprint})


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------
@dataclass
class AuditCell:
    config: DownsamplerConfig
    spec: ProbeSpec
    oracle: ReachabilitySet
    report: LeakReport | None = None
    disagreements: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def label(self):
        if self.config.variant == "non_causal":
            base = "Sin" if self.config.pos_embedding == "sinusoidal" else "Conv"
        else:
            base = self.config.variant
        if self.spec.pad_multiplier != (2 if self.config.variant == "padding" else 1):
            base += f" (pad {self.spec.pad_multiplier}x)"
        return base


@dataclass
class AuditBundle:
    cells: list = field(default_factory=list)

    @property
    def disagreements(self):
        return [d for c in self.cells for d in c.disagreements]

    @property
    def ok(self):
        return not self.disagreements


def build_grid_cells(deltas=(2, 3, 4), variants=("non_causal",), pos_kinds=("sinusoidal", "conv"),
                     seq_len=12, probe_vocab=100, seed=0, pad_multiplier=None):
    """Every valid (delta, variant, positional kind) combination as (config, spec) pairs."""
    cells = []
    for delta in deltas:
        for variant in variants:
            for kind in pos_kinds:
                if variant != "non_causal" and kind != "sinusoidal":
                    continue
                config = DownsamplerConfig(delta=delta, variant=variant, pos_embedding=kind)
                multiplier = pad_multiplier or (2 if variant == "padding" else 1)
                spec = ProbeSpec(seq_len=seq_len, probe_vocab=probe_vocab, delta=delta,
                                 pad_multiplier=multiplier, seed=seed)
                cells.append((config, spec))
    return cells


def compare_detectors(cell):
    """Fill ``cell.disagreements`` / ``cell.warnings`` from oracle vs probe."""
    cell.disagreements, cell.warnings = [], []
    if cell.report is None:
        return cell
    power_required = cell.config.pos_embedding == "conv"
    for stat, reachable in zip(cell.report.positions, cell.oracle.reachable):
        where = f"{cell.config.fingerprint()} pos {stat.pos}"
        if not reachable and stat.verdict == "leak":
            cell.disagreements.append(f"{where}: probe leak (p={stat.p_value:.3g}) at oracle-unreachable position")
        elif not reachable and stat.verdict == "inconclusive":
            cell.warnings.append(f"{where}: inconclusive p={stat.p_value:.3g} at oracle-unreachable position")
        elif reachable and stat.verdict == "no_leak":
            cell.disagreements.append(f"{where}: oracle-reachable position at chance (acc={stat.accuracy:.4f})")
        elif reachable and power_required and (stat.verdict != "leak" or stat.accuracy <= 0.9):
            cell.disagreements.append(f"{where}: conv leak only reached accuracy {stat.accuracy:.4f}")
        elif reachable and stat.verdict == "inconclusive":
            cell.warnings.append(f"{where}: oracle-reachable position only inconclusive (p={stat.p_value:.3g})")
    return cell


def run_cell(config, spec, training=None, oracle_seeds=(0, 1, 2), probe=True):
    training = training or ProbeTraining()
    cell = AuditCell(config=config, spec=spec, oracle=reachability_oracle(config, spec, oracle_seeds))
    if probe:
        store, trained_config, _ = train_probe(config, spec, training)
        cell.report = eval_probe(store, trained_config, spec, training.eval_batches, training.batch_size)
    return compare_detectors(cell)


def audit_grid(deltas=(2, 3, 4), variants=("non_causal",), pos_kinds=("sinusoidal", "conv"),
               training=None, seed=0, probe=True, pad_multiplier=None, seq_len=12, probe_vocab=100,
               oracle_seeds=(0, 1, 2)):
    """Oracle + probe for every grid cell; disagreements are collected, not raised."""
    bundle = AuditBundle()
    cells = build_grid_cells(deltas, variants, pos_kinds, seq_len=seq_len, probe_vocab=probe_vocab,
                             seed=seed, pad_multiplier=pad_multiplier)
    for config, spec in cells:
        log(f"audit cell {config.fingerprint()} pad x{spec.pad_multiplier}")
        cell = run_cell(config, spec, training, oracle_seeds=oracle_seeds, probe=probe)
        for line in cell.disagreements:
            log(f"DISAGREEMENT {line}")
        bundle.cells.append(cell)
    return bundle


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
def report_frame(bundle):
    rows = []
    for cell in bundle.cells:
        if cell.report is None:
            continue
        for stat in cell.report.positions:
            rows.append({"config": cell.label, "delta": cell.config.delta, "variant": cell.config.variant,
                         "pos": stat.pos, "accuracy": stat.accuracy, "successes": stat.successes,
                         "n": stat.n_samples, "p_value": stat.p_value, "verdict": stat.verdict})
    return pd.DataFrame(rows, columns=TSV_COLUMNS)


def read_report_tsv(path):
    return pd.read_csv(path, sep="\t")


def render_markdown(frame, config_hash=None):
    """Verdict grid: one row per (delta, config), one column per target position."""
    lines = []
    if config_hash:
        lines.append(f"<!-- config sha256: {config_hash} -->")
    if frame.empty:
        return "\n".join(lines + ["_no probe results_"]) + "\n"
    positions = sorted(frame["pos"].unique())
    lines.append("| δ | Config | " + " | ".join(str(p) for p in positions) + " |")
    lines.append("|---|---|" + "|".join("---:" for _ in positions) + "|")
    for (delta, config), group in frame.groupby(["delta", "config"], sort=True):
        cells = {int(r.pos): f"{r.accuracy:.4f} {VERDICT_COLOURS[r.verdict]}" for r in group.itertuples()}
        lines.append(f"| {delta} | {config} | " + " | ".join(cells.get(int(p), "") for p in positions) + " |")
    return "\n".join(lines) + "\n"


def plot_leak_grid(frame, path):
    """Heatmap of per-position accuracies; cells flagged as leaks are outlined."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if frame.empty:
        return None
    table = frame.pivot_table(index=["delta", "config"], columns="pos", values="accuracy")
    verdicts = frame.pivot_table(index=["delta", "config"], columns="pos", values="verdict", aggfunc="first")
    fig, ax = plt.subplots(figsize=(12, 0.6 * len(table) + 1.5))
    ax.imshow(table.values, cmap="Reds", vmin=0.0, vmax=1.0, aspect="auto")
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            value = table.values[i, j]
            if np.isnan(value):
                continue
            weight = "bold" if verdicts.values[i, j] == "leak" else "normal"
            ax.text(j, i, f"{value:.2f}", ha="center", va="center", fontsize=8, fontweight=weight)
    ax.set_xticks(range(table.shape[1]))
    ax.set_xticklabels([str(c) for c in table.columns])
    ax.set_yticks(range(table.shape[0]))
    ax.set_yticklabels([f"δ={d} {c}" for d, c in table.index])
    ax.set_title("Leak probe accuracy per target position", fontsize=12)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def oracle_payload(bundle):
    return [dict(cell.oracle.to_dict(), label=cell.label, pad_multiplier=cell.spec.pad_multiplier)
            for cell in bundle.cells]


def write_reports(bundle, out_dir, config_hash=None, plot=True):
    """leak_report.tsv, leak_report.md, oracle.json, disagreements.txt and leak_heatmap.png."""
    out_dir = Path(out_dir)
    frame = report_frame(bundle)
    paths = {
        "tsv": atomic_write_text(out_dir / "leak_report.tsv", frame.to_csv(sep="\t", index=False, lineterminator="\n")),
        "markdown": atomic_write_text(out_dir / "leak_report.md", render_markdown(frame, config_hash)),
        "oracle": atomic_write_text(out_dir / "oracle.json", json.dumps(oracle_payload(bundle), indent=2)),
        "disagreements": atomic_write_text(out_dir / "disagreements.txt",
                                           "".join(f"{d}\n" for d in bundle.disagreements)),
    }
    if plot and not frame.empty:
        paths["heatmap"] = plot_leak_grid(frame, out_dir / "leak_heatmap.png")
    return paths
