"""INI-style configuration files (``[section]`` headers, ``key = value`` lines).

Recognized sections::

    [geometry]     sdd sid det_cols det_rows pixel_u pixel_v offset_u offset_v
                   n_angles angle_start angle_end
    [grid]         bbox_min bbox_max voxel         (three numbers each)
    [coarse_grid]  same keys as [grid]
    [fine_grid]    same keys as [grid]
    [phantom]      source (builtin or a path), scale, noise, seed
    [pipeline]     prior
    [sqs_coarse]   n_iters lam delta nonneg init
    [sqs_fine]     same keys as [sqs_coarse]
    [inr]          TrainConfig keys, model_seed, and encoding overrides
                   levels table_size features base_resolution growth
    [fdk]          filter padding

Unknown keys are rejected so that typos surface as configuration errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .correction import PipelineConfig
from .errors import ConfigError
from .fdk import FilterSpec
from .geometry import ScanGeometry, VolumeGrid
from .inr import MlpConfig, TrainConfig
from .sqs import SqsConfig

GEOMETRY_KEYS = ("sdd", "sid", "det_cols", "det_rows", "pixel_u", "pixel_v", "offset_u",
                 "offset_v", "n_angles", "angle_start", "angle_end")
GRID_KEYS = ("bbox_min", "bbox_max", "voxel")
ENCODING_KEYS = ("levels", "table_size", "features", "base_resolution", "growth")
BUNDLED = ("full_geometry", "full_grids", "desk", "desk_untruncated")


@dataclass(frozen=True)
class PhantomSpec:
    source: str = "builtin"
    scale: float = 1.0
    noise: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a ``pipeline`` run needs besides the prior kind override."""

    geometry: ScanGeometry
    pipeline: PipelineConfig
    phantom: PhantomSpec = field(default_factory=PhantomSpec)


def bundled_path(name: str) -> Path:
    """Path of a config shipped with the package (``desk``, ``full_geometry``...)."""
    if name not in BUNDLED:
        raise ConfigError(f"no bundled config named {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("tcbct") / "data" / "configs" / f"{name}.ini"))


def read_ini(path) -> configparser.ConfigParser:
    """Parse ``path``; a missing file raises ``FileNotFoundError`` naming the path."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cp


def _section(cp, name: str, allowed) -> configparser.SectionProxy:
    if not cp.has_section(name):
        raise ConfigError(f"missing [{name}] section")
    sec = cp[name]
    extra = set(sec) - set(allowed)
    if extra:
        raise ConfigError(f"[{name}]: unknown keys {sorted(extra)}")
    return sec


def _num(sec, key: str, kind=float):
    try:
        raw = sec[key]
    except KeyError:
        raise ConfigError(f"[{sec.name}]: missing key {key!r}") from None
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{sec.name}]: {key} = {raw!r} is not a valid {kind.__name__}") from None


def _triple(sec, key: str) -> tuple[float, float, float]:
    parts = _num(sec, key, str).replace(",", " ").split()
    if len(parts) != 3:
        raise ConfigError(f"[{sec.name}]: {key} needs three numbers")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"[{sec.name}]: {key} has a non-numeric entry") from None


def _bool(sec, key: str) -> bool:
    try:
        return sec.getboolean(key)
    except ValueError:
        raise ConfigError(f"[{sec.name}]: {key} must be a boolean") from None


def parse_geometry(cp, section: str = "geometry") -> ScanGeometry:
    sec = _section(cp, section, GEOMETRY_KEYS)
    ints = {"det_cols", "det_rows", "n_angles"}
    kw = {}
    for key in GEOMETRY_KEYS:
        if key in ("angle_start", "angle_end") and key not in sec:
            continue
        kw[key] = _num(sec, key, int if key in ints else float)
    return ScanGeometry(**kw)


def parse_grid(cp, section: str = "grid") -> VolumeGrid:
    sec = _section(cp, section, GRID_KEYS)
    return VolumeGrid(*(_triple(sec, k) for k in GRID_KEYS))


def _sqs(cp, section: str, default: SqsConfig) -> SqsConfig:
    if not cp.has_section(section):
        return default
    sec = _section(cp, section, ("n_iters", "lam", "delta", "nonneg", "init"))
    kw = {}
    for key in sec:
        if key == "n_iters":
            kw[key] = _num(sec, key, int)
        elif key == "nonneg":
            kw[key] = _bool(sec, key)
        elif key == "init":
            kw[key] = sec[key]
        else:
            kw[key] = _num(sec, key)
    return dataclasses.replace(default, **kw)


def _inr(cp) -> tuple[TrainConfig, dict, int]:
    if not cp.has_section("inr"):
        return TrainConfig(), {}, 0
    train_fields = [f.name for f in dataclasses.fields(TrainConfig)]
    sec = _section(cp, "inr", [*train_fields, *ENCODING_KEYS, "model_seed"])
    train, enc, seed = {}, {}, 0
    for key in sec:
        if key == "model_seed":
            seed = _num(sec, key, int)
        elif key in ENCODING_KEYS:
            enc[key] = _num(sec, key, float if key == "growth" else int)
        elif key == "loss":
            train[key] = sec[key]
        elif key in ("rays_per_batch", "steps", "decay_every", "seed"):
            train[key] = _num(sec, key, int)
        else:
            train[key] = _num(sec, key)
    return TrainConfig(**train), enc, seed


def _fdk(cp) -> FilterSpec:
    if not cp.has_section("fdk"):
        return FilterSpec()
    sec = _section(cp, "fdk", ("filter", "padding"))
    pad = _num(sec, "padding", int) if "padding" in sec else None
    return FilterSpec(sec.get("filter", "ramp_hann"), pad)


def parse_phantom_spec(cp) -> PhantomSpec:
    if not cp.has_section("phantom"):
        return PhantomSpec()
    sec = _section(cp, "phantom", ("source", "scale", "noise", "seed"))
    return PhantomSpec(sec.get("source", "builtin"),
                       _num(sec, "scale") if "scale" in sec else 1.0,
                       _num(sec, "noise") if "noise" in sec else 0.0,
                       _num(sec, "seed", int) if "seed" in sec else 0)


def parse_pipeline(cp, prior: str | None = None) -> PipelineConfig:
    if cp.has_section("pipeline"):
        sec = _section(cp, "pipeline", ("prior",))
        prior = prior or sec.get("prior", "inr")
    train, enc, seed = _inr(cp)
    return PipelineConfig(
        coarse_grid=parse_grid(cp, "coarse_grid"),
        fine_grid=parse_grid(cp, "fine_grid"),
        prior_kind=prior or "inr",
        encoding=enc,
        mlp=MlpConfig(),
        train=train,
        model_seed=seed,
        sqs_coarse=_sqs(cp, "sqs_coarse", SqsConfig(n_iters=30)),
        sqs_fine=_sqs(cp, "sqs_fine", SqsConfig()),
        fdk_filter=_fdk(cp),
    )


def load_geometry(path) -> ScanGeometry:
    return parse_geometry(read_ini(path))


def load_grid(path, section: str | None = None) -> VolumeGrid:
    """Grid from ``[section]``; by default the first of [grid], [fine_grid] present."""
    cp = read_ini(path)
    if section is None:
        section = next((s for s in ("grid", "fine_grid") if cp.has_section(s)), "grid")
    return parse_grid(cp, section)


def load_experiment(path, prior: str | None = None) -> ExperimentConfig:
    cp = read_ini(path)
    return ExperimentConfig(parse_geometry(cp), parse_pipeline(cp, prior), parse_phantom_spec(cp))


def format_geometry(g: ScanGeometry) -> str:
    lines = ["[geometry]"]
    for key in GEOMETRY_KEYS:
        val = getattr(g, key)
        lines.append(f"{key} = {val if isinstance(val, int) else repr(float(val))}")
    return "\n".join(lines) + "\n"


def format_grid(grid: VolumeGrid, section: str = "grid") -> str:
    lines = [f"[{section}]"]
    for key in GRID_KEYS:
        lines.append(f"{key} = " + " ".join(repr(float(v)) for v in getattr(grid, key)))
    return "\n".join(lines) + "\n"
