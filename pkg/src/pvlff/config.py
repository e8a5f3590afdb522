"""Run configuration: every tunable key, its default and the module that owns it.

Files are ``key = value`` lines with ``#`` comments. Command-line ``--key value``
pairs override file values. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .encoding import HashGridConfig
from .fields import ARCHITECTURES, ModelConfig
from .inference import ClusterConfig
from .numerics import ConfigError
from .training import LossWeights, TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    owner: str
    help: str
    choices: tuple | None = None

    @property
    def kind(self) -> type:
        return type(self.default)


KEYS: list[Key] = [
    Key("seed", 0, "cli", "single seed for every random choice"),
    Key("threads", 1, "cli", "worker threads for rendering; results do not depend on it"),
    # encoding
    Key("levels", 8, "encoding", "hash grid levels L"),
    Key("base_resolution", 4, "encoding", "coarsest grid resolution N0"),
    Key("growth", 1.5, "encoding", "per-level resolution growth b"),
    Key("features_per_level", 2, "encoding", "features per level F"),
    Key("table_size", 2**14, "encoding", "hashed table entries T (power of two)"),
    Key("dense_threshold", 16, "encoding", "levels at or below this resolution are dense"),
    # fields
    Key("geo_dim", 16, "fields", "geometric feature width"),
    Key("hidden", 64, "fields", "MLP hidden width"),
    Key("instance_dim", 8, "fields", "instance feature width C_I"),
    Key("architecture", "decoupled", "fields", "instance branch layout", ARCHITECTURES),
    # rendering
    Key("samples", 48, "rendering", "samples per ray during training"),
    Key("stratified", True, "rendering", "jitter training samples within their bins"),
    Key("render_samples", 128, "rendering", "samples per ray for full-view renders"),
    Key("chunk", 1024, "rendering", "rays per render chunk"),
    # training
    Key("steps", 5000, "training", "optimization steps"),
    Key("pixel_batch", 256, "training", "pixels per step for rgb, depth and semantic terms"),
    Key("anchors_per_step", 32, "training", "contrastive anchors per step"),
    Key("negs_per_anchor", 16, "training", "negatives per anchor"),
    Key("lr_hash", 1e-2, "training", "Adam learning rate for hash tables"),
    Key("lr_mlp", 1e-3, "training", "Adam learning rate for MLP weights"),
    Key("adam_beta1", 0.9, "training", "Adam first moment decay"),
    Key("adam_beta2", 0.999, "training", "Adam second moment decay"),
    Key("adam_eps", 1e-15, "training", "Adam epsilon"),
    Key("lambda_rgb", 1.0, "training", "photometric weight"),
    Key("lambda_depth", 0.1, "training", "depth weight"),
    Key("lambda_semantic", 1.0, "training", "semantic distillation weight"),
    Key("lambda_contrastive", 0.1, "training", "contrastive weight"),
    Key("lambda_slow_center", 0.01, "training", "slow-center weight (inactive in epoch 1)"),
    Key("tau", 0.1, "training", "contrastive temperature"),
    Key("center_decay", 0.9, "training", "EMA decay of slow centers"),
    Key("param_decay", 0.99, "training", "EMA decay of the evaluation instance branch"),
    Key("pixels_per_mask", 32, "training", "pixels averaged per proposal for slow centers"),
    Key("steps_per_epoch", 0, "training", "0 means frames*H*W/pixel_batch"),
    Key("log_every", 100, "training", "progress interval in steps"),
    # clustering
    Key("min_samples", 10, "clustering", "k for core distances (self excluded)"),
    Key("min_cluster_size", 50, "clustering", "smallest cluster, in pixels per view; rescaled when subsampling"),
    Key("max_points", 3000, "clustering", "cluster a seeded subsample of at most this many pixels"),
    # inference
    Key("min_opacity", 0.5, "inference", "rendered opacity below this marks a pixel invalid"),
]

BY_NAME = {k.name: k for k in KEYS}


def _convert(key: Key, text: str) -> object:
    kind = key.kind
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        value = kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key.name}: {exc}") from exc
    if key.choices and value not in key.choices:
        raise ConfigError(f"{key.name}: {value!r} not one of {key.choices}")
    return value


class RunConfig:
    """Resolved values for every key in :data:`KEYS`."""

    def __init__(self, values: dict | None = None) -> None:
        self.values = {k.name: k.default for k in KEYS}
        for name, v in (values or {}).items():
            self[name] = v

    def __getitem__(self, name: str):
        return self.values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in BY_NAME:
            raise ConfigError(f"unknown config key {name!r}")
        key = BY_NAME[name]
        self.values[name] = _convert(key, value) if isinstance(value, str) else key.kind(value)

    def __getattr__(self, name: str):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def to_text(self) -> str:
        lines = []
        owner = None
        for k in KEYS:
            if k.owner != owner:
                owner = k.owner
                lines.append(f"# {owner}")
            lines.append(f"{k.name} = {_fmt(self.values[k.name])}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    # -- module views --------------------------------------------------------

    def grid(self) -> HashGridConfig:
        return HashGridConfig(
            self.levels, self.base_resolution, self.growth, self.features_per_level, self.table_size, self.dense_threshold
        )

    def model(self, semantic_dim: int) -> ModelConfig:
        return ModelConfig(self.grid(), self.geo_dim, self.hidden, semantic_dim, self.instance_dim, self.architecture)

    def training(self) -> TrainConfig:
        w = LossWeights(
            self.lambda_rgb,
            self.lambda_depth,
            self.lambda_semantic,
            self.lambda_contrastive,
            self.lambda_slow_center,
            self.tau,
        )
        return TrainConfig(
            steps=self.steps,
            pixel_batch=self.pixel_batch,
            anchors_per_step=self.anchors_per_step,
            negs_per_anchor=self.negs_per_anchor,
            samples=self.samples,
            stratified=self.stratified,
            lr_hash=self.lr_hash,
            lr_mlp=self.lr_mlp,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            center_decay=self.center_decay,
            param_decay=self.param_decay,
            pixels_per_mask=self.pixels_per_mask,
            steps_per_epoch=self.steps_per_epoch,
            log_every=self.log_every,
            seed=self.seed,
            weights=w,
        )

    def clustering(self) -> ClusterConfig:
        return ClusterConfig(self.min_samples, self.min_cluster_size, self.max_points, self.seed)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in BY_NAME:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            _convert(BY_NAME[key], value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
        out[key] = value
    return out


def parse_overrides(args: list[str]) -> dict[str, str]:
    """``--key value`` or ``--key=value`` pairs; dashes in keys read as underscores."""
    out: dict[str, str] = {}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name, eq, value = tok[2:].partition("=")
        name = name.replace("-", "_")
        if not eq:
            if i + 1 >= len(args):
                raise ConfigError(f"--{name} needs a value")
            value = args[i + 1]
            i += 1
        if name not in BY_NAME:
            raise ConfigError(f"unknown config key {name!r}")
        out[name] = value
        i += 1
    return out


def resolve_config(path: str | Path | None = None, overrides: dict[str, str] | list[str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p}: config file not found")
        values.update(parse_config_text(p.read_text(), str(p)))
    if isinstance(overrides, list):
        overrides = parse_overrides(overrides)
    values.update(overrides or {})
    return RunConfig(values)


def help_text() -> str:
    width = max(len(k.name) for k in KEYS)
    lines = ["configuration keys (default, owning module):"]
    for k in KEYS:
        extra = f" one of {', '.join(k.choices)}" if k.choices else ""
        lines.append(f"  --{k.name:<{width}}  {_fmt(k.default):>10}  [{k.owner}] {k.help}{extra}")
    return "\n".join(lines)
