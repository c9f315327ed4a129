"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.  The
first setting must be ``version = 1``.  Lists are comma separated.  Unknown
keys, repeated keys and unparsable values are errors that name the line.
The README lists every key.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field {key!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.key = key


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    # randomness
    seed: int = 0
    seeds: list = field(default_factory=list)  # multi-seed sweeps; empty -> [seed]
    # model
    d_model: int = 64
    d_hidden: int = 128
    n_blocks: int = 2
    d_out: int = 16
    use_gain: bool = True
    lora_rank: int = 0
    gain_outliers: int = 2
    gain_outlier_scale: float = 20.0
    hidden_outliers: int = 2
    hidden_outlier_scale: float = 10.0
    params_file: str = ""  # .npz of parameters, e.g. written by `halo train`
    # scheme
    scheme: str = "halo2"
    format: str = "int8"
    granularity: str = ""
    # data
    dataset: str = "teacher"
    batch: int = 64
    channel_outliers: int = 2
    channel_scale: float = 20.0
    token_outliers: int = 2
    token_scale: float = 20.0
    # optimization
    steps: int = 200
    lr: float = 1e-3
    warmup: int = 20
    weight_decay: float = 0.0
    # ablation
    matmul: str = "F"
    full_grid: bool = False
    # HQ-FSDP simulation
    world_size: int = 1
    hadamard: bool = True
    activation_checkpointing: bool = False
    rows: int = 256
    cols: int = 256
    trials: int = 50
    # quantization report
    tensor_file: str = ""
    formats: list = field(default_factory=lambda: ["int8", "fp8_e4m3", "fp6_e3m2", "mxfp6_e3m2"])
    granularities: list = field(default_factory=lambda: ["tensor", "row"])
    rotations: list = field(default_factory=lambda: ["none", "left", "right"])
    outlier_axis: str = "columns"
    outlier_count: int = 4
    outlier_scale: float = 50.0
    # outputs
    output_dir: str = "halo_out"

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds] or [self.seed]

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


_TYPES = {f.name: f.default_factory() if callable(f.default_factory) else f.default
          for f in fields(RunConfig)}


def _convert(key, raw: str):
    proto = _TYPES[key]
    if isinstance(proto, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(proto, int):
        return int(raw)
    if isinstance(proto, float):
        return float(raw)
    if isinstance(proto, list):
        return [s.strip() for s in raw.split(",") if s.strip()]
    return raw


def parse_config(text: str, path=None) -> RunConfig:
    values: dict = {}
    lines: dict = {}
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError("expected 'key = value'", n, path=path)
        if key not in _TYPES:
            raise ConfigError("unknown setting", n, key, path)
        if key in values:
            raise ConfigError(f"repeated (first set on line {lines[key]})", n, key, path)
        if not values and key != "version":
            raise ConfigError("the first setting must be 'version'", n, key, path)
        try:
            values[key] = _convert(key, raw.strip())
        except ValueError as exc:
            raise ConfigError(str(exc), n, key, path) from None
        lines[key] = n
    if "version" not in values:
        raise ConfigError("missing 'version'", path=path)
    if values["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported version {values['version']} (expected {CONFIG_VERSION})",
                          lines["version"], "version", path)
    cfg = RunConfig(**values)
    try:
        cfg.seed_list()
    except ValueError:
        raise ConfigError("seeds must be integers", lines.get("seeds"), "seeds", path) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from None
    return parse_config(text, path)


def render_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config` (round-trips every field)."""
    out = [f"version = {cfg.version}"]
    for f in fields(cfg):
        if f.name == "version":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
