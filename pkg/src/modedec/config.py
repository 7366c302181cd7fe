"""Sectioned key-value run configuration (INI) with strict key checking."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .exceptions import InvalidInputError
from .model import ModelConfig
from .signal import TimeGrid
from .trainer import TrainConfig

# [tvd] keys map onto the flat tvd_* fields of ModelConfig.
_TVD_KEYS = {"lambda": "tvd_lambda", "nit": "tvd_nit", "grad": "tvd_grad"}
_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in _TVD_KEYS.values()]
_SECTIONS = {
    "grid": ["t_start", "t_end", "n"],
    "model": _MODEL_KEYS + ["variant"],
    "train": [f.name for f in fields(TrainConfig)],
    "tvd": list(_TVD_KEYS),
}


def _coerce(text: str, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text.strip()


@dataclass
class RunConfig:
    """Everything needed to reproduce a run.

    ``variant`` (if set) overrides the attention/TVD flags of ``model``.
    """

    grid: TimeGrid = field(default_factory=TimeGrid)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str | None = None

    def resolved_model(self) -> ModelConfig:
        from .model import build_variant

        return build_variant(self.variant, self.model) if self.variant else self.model

    # -- (de)serialization --------------------------------------------------

    @classmethod
    def from_string(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (M, S, K)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise InvalidInputError(f"malformed config: {exc}") from None
        overrides = {}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise InvalidInputError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise InvalidInputError(f"unknown key {key!r} in section [{section}]")
                overrides[(section, key)] = value
        return (base or cls()).with_overrides(overrides)

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_string(fh.read(), base)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply ``{(section, key): value}`` where values may be strings or typed."""
        grid_kw, model_kw, train_kw = {}, {}, {}
        variant = self.variant
        for (section, key), value in overrides.items():
            if value is None:
                continue
            if section not in _SECTIONS or key not in _SECTIONS[section]:
                raise InvalidInputError(f"unknown config key [{section}] {key}")
            try:
                if section == "grid":
                    grid_kw[key] = _conv(value, getattr(self.grid, key))
                elif section == "train":
                    train_kw[key] = _conv(value, getattr(self.train, key))
                elif section == "tvd":
                    name = _TVD_KEYS[key]
                    model_kw[name] = _conv(value, getattr(self.model, name))
                elif key == "variant":
                    variant = str(value).strip() or None
                else:
                    model_kw[key] = _conv(value, getattr(self.model, key))
            except ValueError as exc:
                raise InvalidInputError(f"[{section}] {key}: {exc}") from None
        out = RunConfig(replace(self.grid, **grid_kw), replace(self.model, **model_kw),
                        replace(self.train, **train_kw), variant)
        out.resolved_model()  # validate the variant name early
        return out

    def to_string(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["grid"] = {k: repr(getattr(self.grid, k)) for k in _SECTIONS["grid"]}
        model = {k: str(getattr(self.model, k)) for k in _MODEL_KEYS}
        if self.variant:
            model["variant"] = self.variant
        parser["model"] = model
        parser["train"] = {k: str(getattr(self.train, k)) for k in _SECTIONS["train"]}
        parser["tvd"] = {k: str(getattr(self.model, v)) for k, v in _TVD_KEYS.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_string())


def _conv(value, like):
    return _coerce(value, like) if isinstance(value, str) else value
