"""The iterative residual decomposition network and its checkpoint format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import nn
from .exceptions import (InvalidInputError, MalformedDocumentError,
                         ShapeMismatchError, VersionMismatchError)
from .signal import ComponentSet, Signal
from .tvd import TvdParams, tvd_denoise

FORMAT_NAME = "modedec-model"
FORMAT_VERSION = 1

VARIANTS = {
    "ircnn": (False, False),
    "ircnn_tvd": (False, True),
    "ircnn_att": (True, False),
    "ircnn_plus": (True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and post-processing settings.

    Parameters
    ----------
    M : int
        Number of IMFs (outer stages).
    S : int
        Inner iterations per stage.
    K : int
        Base kernel length; scale ``k`` uses ``floor(K / 2**(k-1))``.
    inner_update : {"anchored", "from_current"}
        ``anchored`` recomputes ``X = X0 - block(X)`` each inner step;
        ``from_current`` uses ``X = X - block(X)``.
    tvd_grad : {"straight_through", "none"}
        How the denoiser behaves while training. ``none`` skips it until
        inference.
    """

    M: int = 2
    S: int = 3
    K: int = 32
    n_scales: int = 3
    d_att: int = 16
    use_multiscale_attention: bool = True
    use_tvd: bool = True
    inner_update: str = "anchored"
    activation: str = "tanh"
    pad_mode: str = "zero"
    tvd_lambda: float = 0.2
    tvd_nit: int = 20
    tvd_grad: str = "straight_through"

    def __post_init__(self):
        for name in ("M", "S", "K", "n_scales", "d_att", "tvd_nit"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise InvalidInputError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.M < 1 or self.S < 1:
            raise InvalidInputError("M and S must be >= 1")
        if self.K < 4:
            raise InvalidInputError(f"K must be >= 4, got {self.K}")
        if self.n_scales < 1 or self.K // 2 ** (self.n_scales - 1) < 1:
            raise InvalidInputError(f"K={self.K} too short for {self.n_scales} scales")
        if self.d_att < 1:
            raise InvalidInputError("d_att must be >= 1")
        if self.inner_update not in ("anchored", "from_current"):
            raise InvalidInputError(f"unknown inner_update {self.inner_update!r}")
        if self.activation not in nn.ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.pad_mode not in ("zero", "reflect"):
            raise InvalidInputError(f"unknown pad_mode {self.pad_mode!r}")
        if self.tvd_grad not in ("straight_through", "none"):
            raise InvalidInputError(f"unknown tvd_grad {self.tvd_grad!r}")
        TvdParams(self.tvd_lambda, self.tvd_nit)

    @property
    def tvd(self) -> TvdParams:
        return TvdParams(self.tvd_lambda, self.tvd_nit)

    @property
    def scale_lengths(self) -> list[int]:
        return [self.K // 2 ** k for k in range(self.n_scales)]

    @property
    def concat_channels(self) -> int:
        return 2 + self.n_scales if self.use_multiscale_attention else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def build_variant(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Set the attention/TVD flags for one of the four ablation variants."""
    if name not in VARIANTS:
        raise InvalidInputError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    att, tvd = VARIANTS[name]
    return replace(base or ModelConfig(), use_multiscale_attention=att, use_tvd=tvd)


def variant_name(cfg: ModelConfig) -> str:
    for name, flags in VARIANTS.items():
        if flags == (cfg.use_multiscale_attention, cfg.use_tvd):
            return name
    raise AssertionError("unreachable")


class InnerBlockWeights:
    """Learnable weights of one inner block.

    Full block: ``w1`` (one kernel per scale), attention projections, ``w2``
    of shape ``(C_cat, K)`` and the raw averaging filter ``w3``. The legacy
    block keeps only ``w1[0]`` and ``w3``.
    """

    def __init__(self, cfg: ModelConfig, prefix: str = ""):
        self.prefix = prefix
        self.multiscale = cfg.use_multiscale_attention
        lengths = cfg.scale_lengths if self.multiscale else [cfg.K]
        self.w1 = [nn.Param(np.zeros(n), f"{prefix}w1_{k + 1}") for k, n in enumerate(lengths)]
        if self.multiscale:
            d = cfg.d_att
            self.w_q = nn.Param(np.zeros(d), f"{prefix}att.w_q")
            self.w_k = nn.Param(np.zeros(d), f"{prefix}att.w_k")
            self.w_v = nn.Param(np.zeros(d), f"{prefix}att.w_v")
            self.w_o = nn.Param(np.zeros(d), f"{prefix}att.w_o")
            self.b_o = nn.Param(np.zeros(()), f"{prefix}att.b_o")
            self.w2 = nn.Param(np.zeros((cfg.concat_channels, cfg.K)), f"{prefix}w2")
        self.w3 = nn.Param(np.zeros(cfg.K), f"{prefix}w3")

    def params(self) -> list[nn.Param]:
        if not self.multiscale:
            return [*self.w1, self.w3]
        return [*self.w1, self.w_q, self.w_k, self.w_v, self.w_o, self.b_o, self.w2, self.w3]

    def init(self, rng: np.random.Generator) -> None:
        """Glorot-uniform kernels and projections; ``w3`` and ``b_o`` stay zero."""
        for w in self.w1:
            k = w.value.size
            w.value[:] = rng.uniform(-1, 1, k) * math.sqrt(6.0 / (k + k))
        if self.multiscale:
            for w in (self.w_q, self.w_k, self.w_v, self.w_o):
                d = w.value.size
                w.value[:] = rng.uniform(-1, 1, d) * math.sqrt(6.0 / (1 + d))
            c, k = self.w2.shape
            self.w2.value[:] = rng.uniform(-1, 1, (c, k)) * math.sqrt(6.0 / (c * k + k))


class Model:
    """``M`` stages of ``S`` inner blocks each."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        self.config = config
        self.stages = [
            [InnerBlockWeights(config, f"stage{m + 1}.block{s + 1}.") for s in range(config.S)]
            for m in range(config.M)
        ]
        if seed is not None:
            rng = np.random.default_rng(seed)
            for stage in self.stages:
                for block in stage:
                    block.init(rng)

    def params(self) -> list[nn.Param]:
        return [p for stage in self.stages for block in stage for p in block.params()]

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def get_values(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def set_values(self, values) -> None:
        for p, v in zip(self.params(), values, strict=True):
            p.value[...] = v

    def forward(self, x, training: bool = False, tvd_offsets=None):
        """Decompose on the tape; returns ``(component Vars, residue Var)``.

        ``tvd_offsets`` (one vector per stage) replaces the denoiser by
        ``imf + offset``. With offsets from :meth:`tvd_corrections` at the
        current weights this surrogate has the same value as the real forward
        and its exact derivative is the straight-through gradient.
        """
        return _forward(x, self, training, tvd_offsets)

    def tvd_corrections(self, x) -> list[np.ndarray]:
        """``TVD(imf_raw) - imf_raw`` for every stage at the current weights."""
        offsets = []
        with nn.no_grad():
            _forward(x, self, True, record_offsets=offsets)
        return offsets

    def decompose(self, x) -> ComponentSet:
        return decompose(x, self)


def inner_block_forward(x, w: InnerBlockWeights, cfg: ModelConfig) -> nn.Var:
    """One local-average estimate ``sigma(concat(...) * w2) * softmax(w3)``.

    In legacy mode this is ``sigma(x * w1) * softmax(w3)``.
    """
    x = nn.as_var(x)
    if x.value.ndim != 1 or x.value.size < cfg.K:
        raise InvalidInputError(f"signal length {x.value.size} is shorter than K={cfg.K}")
    act = nn.ACTIVATIONS[cfg.activation]
    pad = cfg.pad_mode
    if not w.multiscale:
        h = act(nn.conv1d_same(x, w.w1[0], pad))
    else:
        scales = [act(nn.conv1d_same(x, k, pad)) for k in w.w1]
        x_att = nn.attention(x, w.w_q, w.w_k, w.w_v, w.w_o, w.b_o)
        cat = nn.concat_channels([x, *scales, x_att])
        h = act(nn.conv1d_same(cat, w.w2, pad))
    return nn.conv1d_same(h, nn.softmax_vec(w.w3), pad)


def stage_forward(x0, stage, cfg: ModelConfig):
    """Run the ``S`` inner steps of one stage.

    Returns ``(imf_raw, averages)`` where ``averages`` holds every block
    output in order.
    """
    x0 = nn.as_var(x0)
    x = x0
    averages = []
    for block in stage:
        avg = inner_block_forward(x, block, cfg)
        averages.append(avg)
        x = (x0 - avg) if cfg.inner_update == "anchored" else (x - avg)
    return x, averages


def _forward(x, model: Model, training: bool, tvd_offsets=None, record_offsets=None):
    cfg = model.config
    values = x.values if isinstance(x, Signal) else np.asarray(x, dtype=float)
    if values.ndim != 1 or values.size < cfg.K:
        raise InvalidInputError(f"signal length {values.size} is shorter than K={cfg.K}")
    tvd = cfg.tvd
    residue = nn.as_var(values)
    comps = []
    for m, stage in enumerate(model.stages):
        imf, _ = stage_forward(residue, stage, cfg)
        if cfg.use_tvd and not (training and cfg.tvd_grad == "none"):
            if tvd_offsets is not None:
                imf = imf + tvd_offsets[m]
            else:
                raw = imf.value
                imf = nn.straight_through(imf, lambda v: tvd_denoise(v, tvd))
                if record_offsets is not None:
                    record_offsets.append(imf.value - raw)
        comps.append(imf)
        residue = residue - imf
    return comps, residue


def decompose(x, model: Model) -> ComponentSet:
    """Split ``x`` into ``M`` IMFs and a residue (inference, no tape)."""
    with nn.no_grad():
        comps, residue = _forward(x, model, training=False)
    return ComponentSet(np.stack([c.value for c in comps]), residue.value)


def init_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


# -- checkpoint document ----------------------------------------------------------

def serialize(model: Model, extra: dict | None = None) -> str:
    """JSON text with the config and every parameter in declaration order.

    Floats are written with ``repr`` so the document round-trips bit-exactly.
    """
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": [
            {"name": p.name, "shape": list(p.shape), "values": p.value.ravel().tolist()}
            for p in model.params()
        ],
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, indent=1)


def deserialize(text: str, *, return_extra: bool = False):
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedDocumentError(f"not a JSON document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise MalformedDocumentError("missing or wrong 'format' field")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"document version {doc.get('version')!r}, expected {FORMAT_VERSION}")
    try:
        cfg = ModelConfig.from_dict(doc["config"])
        entries = doc["params"]
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise MalformedDocumentError(f"bad config section: {exc}") from None
    model = Model(cfg, seed=None)
    params = model.params()
    if not isinstance(entries, list) or len(entries) != len(params):
        raise ShapeMismatchError(
            f"document has {len(entries) if isinstance(entries, list) else '?'} "
            f"parameters, config needs {len(params)}")
    for p, e in zip(params, entries):
        try:
            name, shape, values = e["name"], tuple(e["shape"]), e["values"]
        except (KeyError, TypeError):
            raise MalformedDocumentError(f"bad parameter entry for {p.name}") from None
        if name != p.name or shape != p.shape:
            raise ShapeMismatchError(
                f"parameter {name} has shape {shape}; config expects {p.name} {p.shape}")
        arr = np.asarray(values, dtype=np.float64)
        if arr.size != p.value.size:
            raise ShapeMismatchError(f"parameter {name}: {arr.size} values for shape {shape}")
        if not np.all(np.isfinite(arr)):
            raise MalformedDocumentError(f"parameter {name} has non-finite values")
        p.value[...] = arr.reshape(p.shape)
    if return_extra:
        return model, doc.get("extra", {})
    return model


def save_model(path, model: Model, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(model, extra))


def load_model(path, *, return_extra: bool = False):
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read(), return_extra=return_extra)
