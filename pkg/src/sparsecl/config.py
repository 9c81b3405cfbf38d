"""Run configuration: dataclasses plus a strict TOML loader.

Sections are ``model``, ``selection``, ``optimizer``, ``mas``, ``replay``,
``data`` and ``run``. Unknown keys and wrongly typed values raise
:class:`ConfigError` naming the key path, before any work starts.
"""

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import UniverseConfig
from .errors import ConfigError
from .model import DEFAULT_TEMPERATURE, BlockSpec
from .selection import LocalizationMode, Strategy

BASELINES = {"sparse": "SparseUpdate", "full-finetune-er": "FLYP+ER"}


@dataclass
class ModelConfig:
    width: int = 32
    expansion: int = 4
    blocks: int = 2
    temperature: float = DEFAULT_TEMPERATURE
    # fitting of new class rows to their descriptors (see attach_novel_classes)
    novel_row_steps: int = 100
    novel_row_lr: float = 0.02

    @property
    def block_spec(self):
        return BlockSpec(self.width, self.expansion, self.blocks)


@dataclass
class SelectionConfig:
    mode: str = "first"
    strategy: str = "weight"
    rate: float = 0.10


@dataclass
class OptimizerConfig:
    lr: float = 7.5e-6
    epochs: int = 10
    batch_size: int = 32
    warmup_fraction: float = 0.1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 20
    pretrain_batch_size: int = 64


@dataclass
class MasConfig:
    enabled: bool = True
    lam: float = 0.05
    alpha: float = 0.5
    conditional_priming: bool = False


@dataclass
class ReplayConfig:
    enabled: bool = True
    capacity_fraction: float = 0.04


@dataclass
class RunSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    baseline: str = "sparse"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mas: MasConfig = field(default_factory=MasConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    data: UniverseConfig = field(default_factory=UniverseConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def full_finetune(self):
        return self.run.baseline == "full-finetune-er"

    @property
    def baseline_tag(self):
        return BASELINES[self.run.baseline]

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """Digest of everything except the seed list."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "seeds"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections):
        """Copy with per-section overrides: ``cfg.replace(selection={"rate": 0.5})``."""
        d = self.to_dict()
        for sec, values in sections.items():
            if sec not in d:
                raise ConfigError(sec, "unknown section")
            d[sec] = {**d[sec], **values}
        return from_dict(d)

    def validate(self):
        _check(self)
        return self


def _fail(path, msg):
    raise ConfigError(path, msg)


def _check(cfg):
    s, o, m, r, md = cfg.selection, cfg.optimizer, cfg.mas, cfg.replay, cfg.model
    try:
        LocalizationMode(s.mode)
    except ValueError:
        _fail("selection.mode", f"{s.mode!r} not one of first/second/both")
    try:
        Strategy(s.strategy)
    except ValueError:
        _fail("selection.strategy", f"{s.strategy!r} not one of weight/neuron/random")
    for path, v in (("selection.rate", s.rate), ("replay.capacity_fraction", r.capacity_fraction),
                    ("optimizer.warmup_fraction", o.warmup_fraction), ("mas.alpha", m.alpha)):
        if not 0.0 <= v <= 1.0:
            _fail(path, f"{v} outside [0, 1]")
    for path, v in (("optimizer.epochs", o.epochs), ("optimizer.batch_size", o.batch_size),
                    ("optimizer.pretrain_batch_size", o.pretrain_batch_size)):
        if v < 1:
            _fail(path, "must be >= 1")
    if o.pretrain_epochs < 0:
        _fail("optimizer.pretrain_epochs", "must be >= 0")
    for path, v in (("optimizer.lr", o.lr), ("optimizer.pretrain_lr", o.pretrain_lr),
                    ("optimizer.weight_decay", o.weight_decay), ("mas.lam", m.lam),
                    ("model.novel_row_lr", md.novel_row_lr)):
        if v < 0:
            _fail(path, "must be >= 0")
    if md.novel_row_steps < 0:
        _fail("model.novel_row_steps", "must be >= 0")
    if md.temperature <= 0:
        _fail("model.temperature", "must be > 0")
    if md.width < 2 or md.expansion < 1 or md.blocks < 1:
        _fail("model", "need width >= 2, expansion >= 1, blocks >= 1")
    if cfg.run.baseline not in BASELINES:
        _fail("run.baseline", f"{cfg.run.baseline!r} not one of {sorted(BASELINES)}")
    if not cfg.run.seeds:
        _fail("run.seeds", "needs at least one seed")
    try:
        cfg.data.validate()
    except ValueError as exc:
        _fail("data", str(exc))


def _coerce(path, value, typ):
    if typ is bool:
        if not isinstance(value, bool):
            _fail(path, f"expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(path, f"expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(path, f"expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            _fail(path, f"expected a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            _fail(path, f"expected a list of integers, got {value!r}")
        return list(value)
    raise TypeError(typ)


_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "list": list}


def _section(cls, values, path):
    if not isinstance(values, dict):
        _fail(path, "expected a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            _fail(f"{path}.{key}", "unknown key")
    kwargs = {}
    for name, f in known.items():
        if name in values:
            typ = f.type if isinstance(f.type, type) else _TYPES[str(f.type)]
            kwargs[name] = _coerce(f"{path}.{name}", values[name], typ)
    return cls(**kwargs)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def from_dict(d):
    for key in d:
        if key not in _SECTIONS:
            _fail(key, "unknown section")
    kwargs = {}
    for name, f in _SECTIONS.items():
        cls = f.default_factory().__class__
        kwargs[name] = _section(cls, d.get(name, {}), name)
    return RunConfig(**kwargs).validate()


def loads(text):
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"TOML syntax error: {exc}") from None
    return from_dict(d)


def load(path):
    with open(path, "rb") as fh:
        try:
            d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"TOML syntax error: {exc}") from None
    return from_dict(d)


def dumps(cfg):
    """Render a config as TOML (flat tables, scalars and integer lists only)."""
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(str(x) for x in v) + "]"
    return repr(v)
