"""Pipeline configuration and its strict JSON schema."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .errors import ConfigError

ENV_SEED = "DMSEG_SEED"


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the two-stage segmentation pipeline."""

    seed: int = 0
    threads: int = 1
    tau: int = 1
    sigma_factor: float = 0.15
    sparsify_threshold: float = 5e-6
    delta: float = 0.01
    radius_factor_stage1: float = 3.0     # times the block diagonal
    radius_factor_stage2: float = 3.0
    radius_factor_stage2_3d: float = 1.5  # prisms are long, so the ball must
                                          # not couple across several bands
    k_stage1: int = 3
    k_stage2: int = 6
    omega_stage1: int = 3
    omega_stage2: int = 5
    spectrum_size: int = 12               # eigenpairs kept for diagnostics
    elbow_count_stage1: int = 8           # eigenvalues fed to the elbow rule
    elbow_count_stage2: int = 9
    restarts: int = 20
    tiny_cluster_frac: float = 0.01
    gradient_half_window: int = 10
    gradient_smooth_rows: float = 1.2     # pre-smoothing for gradient search only
    gradient_smooth_cols: float = 2.5
    node_smooth_rows: float = 1.0         # pre-smoothing for 2D node features
    node_smooth_cols: float = 2.0
    smoothing_window: int = 31
    smoothing_mad_factor: float = 3.0
    surface1_sign: int = 1                # +1 brightest, -1 darkest
    surface7_sign: int = 1
    outer_signs: tuple = (-1, 1, -1, 1)
    stage1_block_2d: tuple = (10, 10)
    stage2_block_2d: tuple = (2, 20)
    stage1_block_3d: tuple = (10, 10, 10)
    stage2_block_3d: tuple = (15, 1, 15)
    min_block_fill: float = 0.25
    seam_overlap: int = 5
    auto_cluster_protocol: bool = True
    pathology_mode: bool = False
    apply_onh_mask: bool = False
    spacing_um: tuple = (13.67, 4.81, 24.41)

    def __post_init__(self):
        if self.k_stage1 < 2 or self.k_stage2 < 2:
            raise ConfigError("cluster counts must be >= 2")
        for name in ("tau", "restarts", "gradient_half_window", "seam_overlap",
                     "omega_stage1", "omega_stage2", "spectrum_size", "threads",
                     "elbow_count_stage1", "elbow_count_stage2"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("sigma_factor", "radius_factor_stage1", "radius_factor_stage2", "delta"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def _num(minimum=None, exclusive=False):
    s = {"type": "number"}
    if minimum is not None:
        s["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return s


def _int(minimum=None):
    s = {"type": "integer"}
    if minimum is not None:
        s["minimum"] = minimum
    return s


def _arr(item, n):
    return {"type": "array", "items": item, "minItems": n, "maxItems": n}


PIPELINE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _int(0), "threads": _int(1), "tau": _int(1),
        "sigma_factor": _num(0, True), "sparsify_threshold": _num(0),
        "delta": _num(0, True),
        "radius_factor_stage1": _num(0, True),
        "radius_factor_stage2": _num(0, True),
        "radius_factor_stage2_3d": _num(0, True),
        "k_stage1": _int(2), "k_stage2": _int(2),
        "omega_stage1": _int(1), "omega_stage2": _int(1),
        "spectrum_size": _int(4), "restarts": _int(1),
        "elbow_count_stage1": _int(4), "elbow_count_stage2": _int(4),
        "tiny_cluster_frac": _num(0),
        "gradient_half_window": _int(1),
        "gradient_smooth_rows": _num(0), "gradient_smooth_cols": _num(0),
        "node_smooth_rows": _num(0), "node_smooth_cols": _num(0),
        "smoothing_window": _int(5), "smoothing_mad_factor": _num(0, True),
        "surface1_sign": {"enum": [-1, 1]}, "surface7_sign": {"enum": [-1, 1]},
        "outer_signs": _arr({"enum": [-1, 1]}, 4),
        "stage1_block_2d": _arr(_int(1), 2), "stage2_block_2d": _arr(_int(1), 2),
        "stage1_block_3d": _arr(_int(1), 3), "stage2_block_3d": _arr(_int(1), 3),
        "min_block_fill": _num(0), "seam_overlap": _int(1),
        "auto_cluster_protocol": {"type": "boolean"},
        "pathology_mode": {"type": "boolean"},
        "apply_onh_mask": {"type": "boolean"},
        "spacing_um": _arr(_num(0, True), 3),
    },
}

PHANTOM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["standard2d", "standard3d", "control2d", "merged2d",
                            "sixband2d", "threeband2d", "onh3d", "bump3d",
                            "banded2d"]},
        "bands": {"type": "array", "items": _num(0), "minItems": 3},
        "n_bands": _int(2),
        "rows": _int(20), "cols": _int(20),
        "dims": _arr(_int(15), 3),
        "spacing_um": _arr(_num(0, True), 3),
        "top_margin": _num(0), "thicknesses": {"type": "array", "items": _num(3)},
        "fade_start": {"type": ["number", "null"]}, "fade_depth": _num(0),
        "wave_amp": _num(0), "wave_period": _num(0, True), "wave_phase": _num(),
        "dip_amp": _num(0), "dip_sigma": _num(0, True), "drift_per_col": _num(),
        "noise_sigma": _num(0), "speckle_shape": {"type": ["number", "null"]},
        "speckle_grain": _int(1),
        "shadows": {"type": "array",
                    "items": _arr({"type": "number"}, 3)},
        "canal": {"type": ["array", "null"]},
        "bump": {"type": ["array", "null"]},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "pipeline": PIPELINE_SCHEMA,
        "phantom": PHANTOM_SCHEMA,
    },
}

_TUPLE_FIELDS = {"outer_signs", "stage1_block_2d", "stage2_block_2d",
                 "stage1_block_3d", "stage2_block_3d", "spacing_um"}


def validate_config(doc: dict) -> None:
    """Validate a config document against the published schema.

    Raises ConfigError listing every violating field path.
    """
    import jsonschema

    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        paths = []
        for e in errors:
            path = "/".join(str(p) for p in e.absolute_path) or "(root)"
            paths.append(f"{path}: {e.message}")
        raise ConfigError("config violates schema", paths)


def config_from_dict(doc: dict, seed_override: int | None = None) -> PipelineConfig:
    """Build a PipelineConfig from a validated config document.

    The DMSEG_SEED environment variable (or an explicit override) replaces
    the config seed.
    """
    validate_config(doc)
    pl = dict(doc.get("pipeline", {}))
    for key in list(pl):
        if key in _TUPLE_FIELDS:
            pl[key] = tuple(pl[key])
    env = os.environ.get(ENV_SEED)
    if seed_override is not None:
        pl["seed"] = int(seed_override)
    elif env is not None:
        try:
            pl["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env!r}")
    return PipelineConfig(**pl)


def load_config(path: str | None, seed_override: int | None = None) -> PipelineConfig:
    """Load a JSON config file; a missing path yields the defaults."""
    if path is None:
        return config_from_dict({}, seed_override)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc, seed_override)


def load_config_doc(path: str | None) -> dict:
    """Load and validate the raw config document (pipeline + phantom)."""
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(doc)
    return doc


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for key in _TUPLE_FIELDS:
        out[key] = list(out[key])
    return out
