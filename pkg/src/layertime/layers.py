"""Layer structure configurations and the vectors derived from them.

Each supported layer family (fully-connected, convolutional, GRU, LSTM)
has a structural configuration, a feature vector used for searching split
conditions, and a compact explanatory vector used by the per-node linear
time model.  All derivations here are pure functions of the configuration,
so they are safe to call from any number of concurrent workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LayerKind",
    "Padding",
    "StructureConfig",
    "FeatureVector",
    "ExplanatoryVector",
    "RECURRENT_KINDS",
    "PADDING_CODES",
    "fc",
    "cnn",
    "gru",
    "lstm",
    "conv_output_dims",
    "derive_features",
    "derive_explanatory",
    "feature_names",
    "explanatory_names",
    "structural_feature_names",
    "expandable_features",
    "width_fields",
    "config_to_dict",
    "config_from_dict",
]


class LayerKind(enum.Enum):
    """Layer families covered by the time models."""

    FC = "FC"
    CNN = "CNN"
    GRU = "GRU"
    LSTM = "LSTM"


class Padding(enum.Enum):
    VALID = "valid"
    SAME = "same"


RECURRENT_KINDS = frozenset({LayerKind.GRU, LayerKind.LSTM})

#: Padding is encoded numerically so split conditions can act on it.
PADDING_CODES = {Padding.VALID: 0, Padding.SAME: 1}

# Structural fields per kind, in canonical order.  This order is also the
# prefix of the feature-vector layout.
_FIELDS_BY_KIND = {
    LayerKind.FC: ("in_dim", "out_dim"),
    LayerKind.CNN: (
        "in_height",
        "in_width",
        "kernel_height",
        "kernel_width",
        "in_channel",
        "out_channel",
        "padding",
        "stride",
    ),
    LayerKind.GRU: ("in_dim", "out_dim", "step"),
    LayerKind.LSTM: ("in_dim", "out_dim", "step"),
}

_ALL_FIELDS = (
    "in_dim",
    "out_dim",
    "in_height",
    "in_width",
    "kernel_height",
    "kernel_width",
    "in_channel",
    "out_channel",
    "padding",
    "stride",
    "step",
)

_MEMORY_FEATURES = ("mem_in", "mem_out", "mem_inter", "param_size")


@dataclass(frozen=True)
class StructureConfig:
    """Structural hyperparameters of one layer.

    Only the fields belonging to ``kind`` may be set; everything else must
    stay ``None``.  Counts are positive integers, ``stride`` is 1 or 2, and
    ``valid`` padding requires the kernel to fit inside the input extent.
    """

    kind: LayerKind
    in_dim: int | None = None
    out_dim: int | None = None
    in_height: int | None = None
    in_width: int | None = None
    kernel_height: int | None = None
    kernel_width: int | None = None
    in_channel: int | None = None
    out_channel: int | None = None
    padding: Padding | None = None
    stride: int | None = None
    step: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.kind, LayerKind):
            raise ValueError(f"unknown layer kind: {self.kind!r}")
        if isinstance(self.padding, str):
            object.__setattr__(self, "padding", Padding(self.padding))
        required = _FIELDS_BY_KIND[self.kind]
        for name in _ALL_FIELDS:
            value = getattr(self, name)
            if name not in required:
                if value is not None:
                    raise ValueError(
                        f"{name} is not a field of {self.kind.value} layers"
                    )
                continue
            if value is None:
                raise ValueError(f"{self.kind.value} layer requires {name}")
            if name == "padding":
                continue
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ValueError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.kind is LayerKind.CNN:
            if self.stride not in (1, 2):
                raise ValueError(f"stride must be 1 or 2, got {self.stride}")
            if self.padding is Padding.VALID and (
                self.kernel_height > self.in_height
                or self.kernel_width > self.in_width
            ):
                raise ValueError(
                    "valid padding requires the kernel to fit inside the input"
                )


def fc(in_dim: int, out_dim: int) -> StructureConfig:
    return StructureConfig(kind=LayerKind.FC, in_dim=in_dim, out_dim=out_dim)


def cnn(
    in_height: int,
    in_width: int,
    kernel_height: int,
    kernel_width: int,
    in_channel: int,
    out_channel: int,
    stride: int = 1,
    padding: Padding | str = Padding.SAME,
) -> StructureConfig:
    return StructureConfig(
        kind=LayerKind.CNN,
        in_height=in_height,
        in_width=in_width,
        kernel_height=kernel_height,
        kernel_width=kernel_width,
        in_channel=in_channel,
        out_channel=out_channel,
        stride=stride,
        padding=padding,
    )


def gru(in_dim: int, out_dim: int, step: int) -> StructureConfig:
    return StructureConfig(kind=LayerKind.GRU, in_dim=in_dim, out_dim=out_dim, step=step)


def lstm(in_dim: int, out_dim: int, step: int) -> StructureConfig:
    return StructureConfig(kind=LayerKind.LSTM, in_dim=in_dim, out_dim=out_dim, step=step)


def conv_output_dims(
    in_height: int,
    in_width: int,
    kernel_height: int,
    kernel_width: int,
    stride: int,
    padding: Padding | str,
) -> tuple[int, int]:
    """Output spatial extent of a 2-D convolution.

    ``same`` padding gives ``ceil(extent / stride)`` per axis; ``valid``
    slides the kernel fully inside the input, giving
    ``floor((extent - kernel) / stride) + 1``.
    """
    pad = Padding(padding) if isinstance(padding, str) else padding
    for name, value in (
        ("in_height", in_height),
        ("in_width", in_width),
        ("kernel_height", kernel_height),
        ("kernel_width", kernel_width),
        ("stride", stride),
    ):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if pad is Padding.VALID:
        if kernel_height > in_height or kernel_width > in_width:
            raise ValueError(
                "valid padding with kernel larger than the input has no output"
            )
        out_h = (in_height - kernel_height) // stride + 1
        out_w = (in_width - kernel_width) // stride + 1
    else:
        out_h = -(-in_height // stride)
        out_w = -(-in_width // stride)
    return out_h, out_w


@dataclass(frozen=True)
class FeatureVector:
    """Named feature values in the canonical per-kind order."""

    kind: LayerKind
    values: tuple[float, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return feature_names(self.kind)

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class ExplanatoryVector:
    """Regression inputs: operation count, memory traffic, parameter size.

    ``step`` is present only for recurrent layers, whose per-step setup
    overhead needs its own term.
    """

    flops: float
    mem: float
    param_size: float
    step: float | None = None

    def as_array(self) -> np.ndarray:
        base = [self.flops, self.mem, self.param_size]
        if self.step is not None:
            base.append(self.step)
        return np.asarray(base, dtype=float)


def feature_names(kind: LayerKind) -> tuple[str, ...]:
    """Canonical feature order: structural fields, then memory and parameter."""
    return _FIELDS_BY_KIND[kind] + _MEMORY_FEATURES


def structural_feature_names(kind: LayerKind) -> tuple[str, ...]:
    return _FIELDS_BY_KIND[kind]


def explanatory_names(kind: LayerKind) -> tuple[str, ...]:
    if kind in RECURRENT_KINDS:
        return ("flops", "mem", "param_size", "step")
    return ("flops", "mem", "param_size")


def width_fields(kind: LayerKind) -> tuple[str, str]:
    """The (input width, output width) field names of a layer kind."""
    if kind is LayerKind.CNN:
        return ("in_channel", "out_channel")
    return ("in_dim", "out_dim")


def expandable_features(kind: LayerKind) -> tuple[str, str]:
    """Structural coordinates that may be rounded up during expansion.

    Only weight-matrix widths qualify: growing them is function-preserving
    because the new rows/columns/channels can be zero-filled.  Geometry
    (input extent, kernel), stride, padding, and step count are fixed by
    the data and the application.
    """
    return width_fields(kind)


def _memory_features(config: StructureConfig) -> dict[str, int]:
    kind = config.kind
    if kind is LayerKind.FC:
        return {
            "param_size": config.in_dim * config.out_dim + config.out_dim,
            "mem_in": config.in_dim,
            "mem_out": config.out_dim,
            "mem_inter": 0,
        }
    if kind is LayerKind.CNN:
        out_h, out_w = conv_output_dims(
            config.in_height,
            config.in_width,
            config.kernel_height,
            config.kernel_width,
            config.stride,
            config.padding,
        )
        kernel = config.kernel_height * config.kernel_width
        return {
            "param_size": kernel * config.in_channel * config.out_channel + 1,
            "mem_in": config.in_height * config.in_width * config.in_channel,
            "mem_out": out_h * out_w * config.out_channel,
            "mem_inter": out_h * out_w * kernel * config.in_channel,
        }
    if kind is LayerKind.GRU:
        return {
            "param_size": 3 * config.out_dim * (config.in_dim + config.out_dim + 1),
            "mem_in": config.step * config.in_dim,
            "mem_out": config.step * config.out_dim,
            "mem_inter": 3 * config.step * config.out_dim,
        }
    return {
        "param_size": 4 * config.out_dim * (config.in_dim + config.out_dim + 1),
        "mem_in": 2 * config.step * config.in_dim,
        "mem_out": 2 * config.step * config.out_dim,
        "mem_inter": 4 * config.step * config.out_dim,
    }


def derive_features(config: StructureConfig) -> FeatureVector:
    """Feature vector of a configuration: structural fields plus memory sizes."""
    memory = _memory_features(config)
    values: list[float] = []
    for name in _FIELDS_BY_KIND[config.kind]:
        raw = getattr(config, name)
        values.append(float(PADDING_CODES[raw] if name == "padding" else raw))
    values.extend(float(memory[name]) for name in _MEMORY_FEATURES)
    return FeatureVector(kind=config.kind, values=tuple(values))


def _flops(config: StructureConfig, param_size: int) -> int:
    kind = config.kind
    if kind is LayerKind.FC:
        # multiply-add per weight plus the bias add
        return 2 * config.in_dim * config.out_dim + config.out_dim
    if kind is LayerKind.CNN:
        out_h, out_w = conv_output_dims(
            config.in_height,
            config.in_width,
            config.kernel_height,
            config.kernel_width,
            config.stride,
            config.padding,
        )
        return (
            2
            * out_h
            * out_w
            * config.kernel_height
            * config.kernel_width
            * config.in_channel
            * config.out_channel
        )
    # recurrent: the gate matrix-vector multiply-adds dominate every step
    return 2 * config.step * param_size


def derive_explanatory(config: StructureConfig) -> ExplanatoryVector:
    """Explanatory vector of a configuration.

    ``mem`` is the sum of the three memory features; ``step`` is copied
    through for recurrent kinds only.
    """
    memory = _memory_features(config)
    mem = memory["mem_in"] + memory["mem_out"] + memory["mem_inter"]
    flops = _flops(config, memory["param_size"])
    step = float(config.step) if config.kind in RECURRENT_KINDS else None
    return ExplanatoryVector(
        flops=float(flops),
        mem=float(mem),
        param_size=float(memory["param_size"]),
        step=step,
    )


def config_to_dict(config: StructureConfig) -> dict:
    """Canonical flat encoding: ``kind`` plus only the fields legal for it."""
    record: dict = {"kind": config.kind.value}
    for name in _FIELDS_BY_KIND[config.kind]:
        value = getattr(config, name)
        record[name] = value.value if isinstance(value, Padding) else int(value)
    return record


def config_from_dict(record: dict) -> StructureConfig:
    """Decode the canonical flat encoding; unknown fields are an error."""
    if "kind" not in record:
        raise ValueError("config record is missing 'kind'")
    try:
        kind = LayerKind(record["kind"])
    except ValueError:
        raise ValueError(f"unknown layer kind: {record['kind']!r}") from None
    allowed = set(_FIELDS_BY_KIND[kind])
    extra = set(record) - allowed - {"kind"}
    if extra:
        raise ValueError(
            f"unknown fields for {kind.value} config: {', '.join(sorted(extra))}"
        )
    missing = allowed - set(record)
    if missing:
        raise ValueError(
            f"{kind.value} config is missing: {', '.join(sorted(missing))}"
        )
    kwargs = {name: record[name] for name in allowed}
    return StructureConfig(kind=kind, **kwargs)
