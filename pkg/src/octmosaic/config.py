"""Run configuration: flat ``section.key = value`` text files.

Every parameter group is a dataclass; a config file may override any field
by its dotted name. Unknown keys and malformed values are rejected before
any work starts. ``format_config`` prints the full effective configuration
in the same syntax, so its output is itself a valid config file.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass

from .affine import AffineParams
from .core import ClaheParams
from .deform import SynParams
from .errors import ConfigError, MosaicError
from .evalverify import VerifyParams
from .features import FeatureParams
from .pipeline import PipelineConfig
from .synthbench import SynthSpec


@dataclass
class PipelineOptions:
    blend: str = "feather"
    use_syn: bool = True
    run_verify: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    clahe: ClaheParams = field(default_factory=ClaheParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    affine: AffineParams = field(default_factory=AffineParams)
    syn: SynParams = field(default_factory=SynParams)
    verify: VerifyParams = field(default_factory=VerifyParams)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self):
        try:
            self.to_pipeline().validate()
            self.synth_spec().validate()
        except (MosaicError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_pipeline(self) -> PipelineConfig:
        p = self.pipeline
        return PipelineConfig(self.clahe, self.features, self.affine, self.syn, self.verify,
                              p.blend, p.use_syn, p.run_verify)

    def synth_spec(self) -> SynthSpec:
        kw = {f.name: getattr(self.synth, f.name) for f in fields(SynthSpec)}
        kw["seed"] = self.seed
        return SynthSpec(**kw)


# the synth seed is driven by the top-level seed
_HIDDEN = {("synth", "seed")}


def _keys(cfg: RunConfig):
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if is_dataclass(val):
            for g in fields(val):
                if (f.name, g.name) not in _HIDDEN:
                    yield f"{f.name}.{g.name}", val, g.name
        else:
            yield f.name, cfg, f.name


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, like):
    t = text.strip()
    low = t.lower()
    if isinstance(like, bool):
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {t!r}")
    if isinstance(like, int):
        f = float(t)
        if f != int(f):
            raise ValueError(f"expected an integer, got {t!r}")
        return int(f)
    if isinstance(like, float) or like is None:
        if like is None and low == "none":
            return None
        return float(t)
    return t


def _parse_value(text: str, like):
    if isinstance(like, (tuple, list)):
        parts = [p for p in text.replace(",", " ").split() if p]
        proto = like[0] if like else 0.0
        return tuple(_parse_scalar(p, proto) for p in parts)
    if like is None and text.strip().lower() == "none":
        return None
    return _parse_scalar(text, like)


def set_key(cfg: RunConfig, key: str, text: str, where: str = "") -> None:
    table = {k: (obj, name) for k, obj, name in _keys(cfg)}
    if key not in table:
        raise ConfigError(f"{where}unknown config key {key!r}")
    obj, name = table[key]
    try:
        setattr(obj, name, _parse_value(text, getattr(obj, name)))
    except ValueError as exc:
        raise ConfigError(f"{where}bad value for {key}: {exc}") from exc


def parse_config_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, value, f"{source}:{lineno}: ")
    return cfg


def load_config(path=None, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, cfg, str(path))


def config_items(cfg: RunConfig) -> list:
    return [(k, _format_value(getattr(obj, name))) for k, obj, name in _keys(cfg)]


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg))
