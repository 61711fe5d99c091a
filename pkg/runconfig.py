"""
Run configuration: one JSON document layered over a preset, validated
section by section, and written back next to every run's outputs as
resolved_config.json together with its SHA-256 hash.
"""
import copy
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

RESOLVED_CONFIG_NAME = "resolved_config.json"


class ConfigError(ValueError):
    """Schema or value problem in a run configuration."""


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


@dataclass
class ProbeSection:
    seq_len: int = 12
    probe_vocab: int = 100
    steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-4
    eval_batches: int = 100
    model_dim: int = 128
    log_every: int = 500
    pad_multiplier: int = None
    deltas: list = field(default_factory=lambda: [2, 3, 4])
    variants: list = field(default_factory=lambda: ["non_causal"])
    pos_kinds: list = field(default_factory=lambda: ["sinusoidal", "conv"])
    oracle_seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ModelSection:
    enc_layers: int = 2
    dec_layers: int = 2
    model_dim: int = 128
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0
    delta: int = 1
    variant: str = "removal"
    pos_embedding: str = "sinusoidal"
    head: str = None
    tie_embeddings: bool = False
    unsafe: bool = False


@dataclass
class TrainSection:
    optimizer: str = "adamw"
    learning_rate: float = 2e-4
    warmup_steps: int = 4000
    batch_size: int = 128
    label_smoothing: float = 0.1
    max_steps: int = 100000
    patience: int = 10
    weight_decay: float = 0.01
    schedule: str = "constant"
    clip_norm: float = 1.0
    max_epochs: int = 100
    holdout: float = 0.1
    max_src_chars: int = 256
    log_every: int = 50


@dataclass
class BenchSection:
    steps: int = 5
    warmup: int = 1
    gen_sentences: int = 4
    pairs: int = 64
    max_len: int = 32


@dataclass
class PathsSection:
    src: str = None
    tgt: str = None
    valid_src: str = None
    valid_tgt: str = None
    checkpoint: str = None
    out: str = "runs"


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "base"
    probe: ProbeSection = field(default_factory=ProbeSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # builders for the typed objects the modules consume; their own
    # validation errors surface as ConfigError
    def probe_training(self):
        from leakaudit import ProbeTraining
        p = self.probe
        return _validated(ProbeTraining, steps=p.steps, batch_size=p.batch_size, learning_rate=p.learning_rate,
                          eval_batches=p.eval_batches, model_dim=p.model_dim, log_every=p.log_every)

    def probe_spec(self, delta, pad_multiplier=None):
        from bytedata import ProbeSpec
        return _validated(ProbeSpec, seq_len=self.probe.seq_len, probe_vocab=self.probe.probe_vocab, delta=delta,
                          pad_multiplier=pad_multiplier or self.probe.pad_multiplier or 1, seed=self.seed)

    def model_config(self):
        from seq2seq import ModelConfig
        m = self.model
        try:
            return ModelConfig.for_variant(
                m.delta, m.variant, head=m.head, model_dim=m.model_dim, heads=m.heads, ffn_dim=m.ffn_dim,
                enc_layers=m.enc_layers, dec_layers=m.dec_layers, unsafe=m.unsafe,
                pos_embedding=m.pos_embedding, dropout=m.dropout, tie_embeddings=m.tie_embeddings)
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e

    def train_hyper(self):
        from numcore import TrainHyper
        data = asdict(self.train)
        for key in ("holdout", "max_src_chars", "log_every"):
            data.pop(key)
        return _validated(TrainHyper, seed=self.seed, **data)

    def to_dict(self):
        return asdict(self)


def _validated(cls, **kwargs):
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


PRESETS = {
    # Transformer Base dims with the full-scale training recipe
    "base": {
        "model": {"enc_layers": 6, "dec_layers": 6, "model_dim": 512, "heads": 8, "ffn_dim": 2048,
                  "dropout": 0.1},
        "train": {"optimizer": "adamw", "learning_rate": 2e-4, "warmup_steps": 4000, "batch_size": 128,
                  "label_smoothing": 0.1, "patience": 10},
    },
    # small enough for a laptop CPU
    "desk": {
        "model": {"enc_layers": 2, "dec_layers": 2, "model_dim": 128, "heads": 4, "ffn_dim": 256,
                  "dropout": 0.0},
        "train": {"optimizer": "adamw", "learning_rate": 1e-3, "warmup_steps": 200, "batch_size": 32,
                  "label_smoothing": 0.1, "patience": 10, "max_steps": 20000},
    },
}


def _type_ok(default, value):
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def merge_config(base, override, where=""):
    """Recursively merge ``override`` into a copy of ``base``; unknown keys and wrong types are rejected."""
    if not isinstance(override, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    merged = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in merged:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(merged[key], dict):
            merged[key] = merge_config(merged[key], value, path)
        elif not _type_ok(merged[key], value):
            raise ConfigError(f"{path}: expected {type(merged[key]).__name__}, got {value!r}")
        else:
            merged[key] = value
    return merged


def from_dict(data):
    sections = {"probe": ProbeSection, "model": ModelSection, "train": TrainSection,
                "bench": BenchSection, "paths": PathsSection}
    data = merge_config(asdict(RunConfig()), data)
    kwargs = {k: v for k, v in data.items() if k not in sections}
    for name, cls in sections.items():
        kwargs[name] = cls(**data[name])
    config = RunConfig(**kwargs)
    validate(config)
    return config


def validate(config):
    if config.preset not in PRESETS:
        raise ConfigError(f"unknown preset {config.preset!r}; choose from {sorted(PRESETS)}")
    if config.seed < 0 or config.seed >= 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {config.seed}")
    from downsamplers import POS_KINDS, VARIANTS
    p = config.probe
    for delta in p.deltas:
        if not isinstance(delta, int) or delta < 1:
            raise ConfigError(f"probe.deltas: delta must be an integer >= 1, got {delta!r}")
    for variant in p.variants:
        if variant not in VARIANTS:
            raise ConfigError(f"probe.variants: unknown variant {variant!r}")
    for kind in p.pos_kinds:
        if kind not in POS_KINDS:
            raise ConfigError(f"probe.pos_kinds: unknown positional embedding {kind!r}")
    if p.steps < 1 or p.eval_batches < 1 or p.batch_size < 1:
        raise ConfigError("probe steps, batch_size and eval_batches must be >= 1")
    for delta in p.deltas:
        config.probe_spec(delta)
    if not 0 < config.train.holdout < 1:
        raise ConfigError(f"train.holdout must be in (0, 1), got {config.train.holdout}")
    config.train_hyper()
    config.model_config()
    return config


def load_run_config(path=None, preset=None, overrides=None):
    """
    defaults <- preset <- JSON file <- overrides (e.g. CLI flags). The
    preset is taken from ``preset``, else the file's "preset" key, else "base".
    """
    file_data = {}
    if path:
        try:
            file_data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(file_data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        if set(file_data) == {"sha256", "config"}:
            file_data = file_data["config"]
    chosen = preset or file_data.get("preset") or RunConfig.preset
    if chosen not in PRESETS:
        raise ConfigError(f"unknown preset {chosen!r}; choose from {sorted(PRESETS)}")
    data = merge_config(asdict(RunConfig()), PRESETS[chosen])
    data = merge_config(data, file_data)
    data = merge_config(data, overrides or {})
    data["preset"] = chosen
    return from_dict(data)


def config_hash(config):
    payload = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def write_resolved_config(config, out_dir):
    """Write resolved_config.json into ``out_dir``; returns (path, sha256)."""
    digest = config_hash(config)
    text = json.dumps({"sha256": digest, "config": config.to_dict()}, indent=2, sort_keys=True) + "\n"
    return atomic_write_text(Path(out_dir) / RESOLVED_CONFIG_NAME, text), digest


def read_resolved_config(path):
    """Load a resolved_config.json and check its hash against its content."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    config = from_dict(data["config"])
    if config_hash(config) != data.get("sha256"):
        raise ConfigError(f"{path}: hash does not match content")
    return config
