"""Line-oriented network config files.

::

    # comment
    input H W
    flow L BOUND
    classes N
    fusion linear_concat | weighted_sum ALPHA_S ALPHA_T
    stream spatial | temporal
    conv IN OUT K S P ACT
    pool K S
    fc IN OUT

Layer lines apply to the most recent ``stream`` line.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

from ..errors import ConfigError
from ..graph import FusionMode, FusionSpec, LayerSpec, NetworkConfig, validate_config

_ARITY = {"input": (2, 2), "flow": (2, 2), "classes": (1, 1), "fusion": (1, 3),
          "stream": (1, 1), "conv": (6, 6), "pool": (2, 2), "fc": (2, 2)}


def _int(tok: str, lineno: int, what: str) -> int:
    try:
        v = int(tok, 10)
    except ValueError:
        raise ConfigError(f"{what}: expected an integer, got {tok!r}", lineno) from None
    if v < 0 or v > 2**31:
        raise ConfigError(f"{what}: value {v} out of range", lineno)
    return v


def _real(tok: str, lineno: int, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ConfigError(f"{what}: expected a number, got {tok!r}", lineno) from None
    if not math.isfinite(v):
        raise ConfigError(f"{what}: value must be finite", lineno)
    return v


def parse_config(text: str | bytes) -> NetworkConfig:
    """Parse and validate config text; every failure is a ConfigError."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            line = text[:exc.start].count(b"\n") + 1
            raise ConfigError("invalid UTF-8", line) from None
    fields: dict[str, tuple] = {}
    streams: dict[str, list[LayerSpec]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        key, args = toks[0], toks[1:]
        if key not in _ARITY:
            raise ConfigError(f"unknown directive {key!r}", lineno)
        lo, hi = _ARITY[key]
        if not lo <= len(args) <= hi:
            raise ConfigError(f"{key}: expected {lo}{'' if lo == hi else f'-{hi}'} arguments, got {len(args)}", lineno)
        if key == "stream":
            if args[0] not in ("spatial", "temporal"):
                raise ConfigError(f"unknown stream {args[0]!r}", lineno)
            if args[0] in streams:
                raise ConfigError(f"stream {args[0]} declared twice", lineno)
            current = args[0]
            streams[current] = []
        elif key in ("conv", "pool", "fc"):
            if current is None:
                raise ConfigError(f"{key} before any stream line", lineno)
            if key == "conv":
                nums = [_int(a, lineno, key) for a in args[:5]]
                try:
                    spec = LayerSpec.conv(*nums, activation=args[5])
                except ValueError as exc:
                    raise ConfigError(str(exc), lineno) from None
                if spec.k < 1 or spec.stride < 1 or spec.in_ch < 1 or spec.out_ch < 1:
                    raise ConfigError("conv: channels, kernel and stride must be >= 1", lineno)
            elif key == "pool":
                spec = LayerSpec.pool(*(_int(a, lineno, key) for a in args))
                if spec.k < 1 or spec.stride < 1:
                    raise ConfigError("pool: kernel and stride must be >= 1", lineno)
            else:
                spec = LayerSpec.fc(*(_int(a, lineno, key) for a in args))
                if spec.in_ch < 1 or spec.out_ch < 1:
                    raise ConfigError("fc: feature counts must be >= 1", lineno)
            streams[current].append(spec)
        else:
            if key in fields:
                raise ConfigError(f"{key} given twice", lineno)
            if key == "input":
                fields[key] = tuple(_int(a, lineno, key) for a in args)
            elif key == "flow":
                fields[key] = (_int(args[0], lineno, key), _real(args[1], lineno, key))
            elif key == "classes":
                fields[key] = (_int(args[0], lineno, key),)
            else:
                try:
                    mode = FusionMode(args[0])
                except ValueError:
                    raise ConfigError(f"unknown fusion mode {args[0]!r}", lineno) from None
                if mode is FusionMode.WEIGHTED_SUM:
                    if len(args) != 3:
                        raise ConfigError("weighted_sum needs ALPHA_S ALPHA_T", lineno)
                    fields[key] = (FusionSpec(mode, _real(args[1], lineno, key), _real(args[2], lineno, key)),)
                else:
                    if len(args) != 1:
                        raise ConfigError("linear_concat takes no alphas", lineno)
                    fields[key] = (FusionSpec(mode),)

    for key in ("input", "flow", "classes"):
        if key not in fields:
            raise ConfigError(f"missing {key!r} line")
    for s in ("spatial", "temporal"):
        if s not in streams:
            raise ConfigError(f"missing stream {s!r}")
    config = NetworkConfig(
        input_height=fields["input"][0], input_width=fields["input"][1],
        flow_L=fields["flow"][0], flow_bound=fields["flow"][1],
        spatial_layers=tuple(streams["spatial"]), temporal_layers=tuple(streams["temporal"]),
        fusion=fields["fusion"][0] if "fusion" in fields else FusionSpec(),
        class_count=fields["classes"][0])
    return validate_config(config)


def read_config(path) -> NetworkConfig:
    return parse_config(Path(path).read_bytes())


def default_config_text() -> str:
    return resources.files("qhar").joinpath("data/default.cfg").read_text(encoding="utf-8")


def default_config() -> NetworkConfig:
    """The shipped desk-scale two-stream config (five fused groups per stream)."""
    return parse_config(default_config_text())


def format_config(config: NetworkConfig) -> str:
    """Inverse of :func:`parse_config`."""
    lines = [f"input {config.input_height} {config.input_width}",
             f"flow {config.flow_L} {config.flow_bound!r}",
             f"classes {config.class_count}"]
    f = config.fusion
    if f.mode is FusionMode.WEIGHTED_SUM:
        lines.append(f"fusion weighted_sum {f.alpha_spatial!r} {f.alpha_temporal!r}")
    else:
        lines.append("fusion linear_concat")
    for stream in ("spatial", "temporal"):
        lines.append(f"stream {stream}")
        for spec in config.layers(stream):
            if spec.kind.value == "fused_conv":
                lines.append(f"conv {spec.in_ch} {spec.out_ch} {spec.k} {spec.stride} {spec.padding} "
                             f"{spec.activation.value}")
            elif spec.kind.value == "maxpool":
                lines.append(f"pool {spec.k} {spec.stride}")
            else:
                lines.append(f"fc {spec.in_ch} {spec.out_ch}")
    return "\n".join(lines) + "\n"
