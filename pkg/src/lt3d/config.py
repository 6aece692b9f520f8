"""Run configuration: dataclass, hybrid text format and digest.

Config files are either a JSON object or ``key = value`` lines::

    # desk run
    epochs = 60
    lr = 3e-3
    network.base_channels = 16
    network.sampler = {"alpha": 0.5, "beta": 0.2}

Values are read as JSON when they parse, else as bare strings. Dotted keys
address nested sections.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .data import AugmentConfig
from .errors import ConfigError, ContractError
from .segnet import NetworkConfig

# settings that do not change the numbers a run produces
RUNTIME_KEYS = ("epochs", "threads", "out_dir", "manifest", "workers")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    use_augment: bool = True
    volume_shape: tuple = (16, 64, 64)
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    decay_every: int = 100
    decay_rate: float = 0.5
    batch_size: int = 4
    epochs: int = 60
    dice_conventional: bool = False
    seed: int = 0
    split_seed: int = 42
    test_fraction: float = 0.125
    n_phantoms: int = 32
    phantom_seed: int = 7
    manifest: str = ""
    out_dir: str = "runs"
    threads: int = 1
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig(**self.network)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ConfigError("lr, batch_size, epochs and decay_every must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError(f"decay_rate must lie in (0, 1], got {self.decay_rate}")
        if self.threads < 1 or self.workers < 1:
            raise ConfigError("threads and workers must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    def digest(self):
        """sha256 over the canonical JSON of every setting that affects results."""
        d = {k: v for k, v in self.to_dict().items() if k not in RUNTIME_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()

    def replace(self, **changes):
        return from_dict(changes, base=self)


def published_preset():
    """Hyperparameters as published: 512x512x32 input, batch 8, lr 1e-4 halved every 100 epochs."""
    return RunConfig(volume_shape=(32, 512, 512), batch_size=8, lr=1e-4, epochs=600)


def desk_preset():
    """Desk-scale defaults used by the tests and CLI."""
    return RunConfig(lr=2e-3, batch_size=4, epochs=60, test_fraction=0.25)


def _merge(base, upd):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def _strip_comment(line):
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def parse_config_text(text):
    """Parse the JSON / ``key = value`` hybrid into a nested dict."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return data
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key} conflicts with an earlier scalar")
        node[parts[-1]] = _parse_value(val)
    return out


def from_dict(d, base=None):
    merged = (base or desk_preset()).to_dict()
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    _merge(merged, d)
    net = d.get("network", {})
    if isinstance(net, dict) and "levels" in net and "attention" not in net:
        merged["network"]["attention"] = None  # re-derive per-level flags for the new depth
    try:
        return RunConfig(**merged)
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=None):
    """Desk preset, updated by the file at ``path`` and then by ``overrides``."""
    d = {}
    if path:
        try:
            with open(path) as fh:
                d = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        _merge(d, overrides)
    return from_dict(d)


def dump_config_text(cfg):
    """Render as ``key = value`` lines that :func:`parse_config_text` reads back."""
    lines = []

    def walk(prefix, d):
        for k, v in d.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict) and k != "sampler":
                walk(key + ".", v)
            else:
                lines.append(f"{key} = {json.dumps(v)}")
    walk("", cfg.to_dict())
    return "\n".join(lines) + "\n"

