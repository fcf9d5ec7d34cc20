import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from core.errors import ConfigError, MissingInputError

# --- Constants & Defaults ---
RESOLVED_CONFIG_NAME = "resolved_config.json"
ABLATION_NAMES = ("dr", "ai", "dd", "ke", "le")

# Switches the tensor engine to float64 at import time (gradient-check mode)
FLOAT64_ENV = "DGMAP_FLOAT64"

DEFAULT_SETTINGS: Dict[str, Any] = {
    "seed": 0,
    "grid": {
        "cell_size": 1.0,
        "tile_size": 256,
        "margin": 16.0,
    },
    "ingest": {
        "max_gap_s": 60.0,
        "max_speed_mps": 50.0,
        "strict": False,
        "two_way_roads": True,
    },
    "synth": {
        "graph_style": "grid-perturbed",
        "region_size": [480.0, 480.0],
        "trajectory_count": 600,
        "sampling_interval": 5,
        "gps_noise_sigma": 3.0,
        "density_profile": [[1.0, 1.0], [1.0, 0.25]],
        "block_size": 80.0,
        "jitter": 8.0,
        "deletion_rate": 0.15,
        "min_spacing": 45.0,
        "prune_quantile": 0.85,
        "speed": 10.0,
        "one_way_fraction": 0.0,
        "origin": [116.30, 39.95],
        "margin": 16.0,
        "start_epoch": 1700000000,
    },
    "raster": {
        "sigma_kp": 2.0,
        "road_width": 3,
        "densify_max_gap": 30.0,
        "chunk_size": 64,
    },
    "model": {
        "channels": 64,
        "afim_resolution": 16,
        "afim_heads": 4,
        "afim_shared_fusion": False,
        "keypoint_heads": 4,
        "link_heads": 4,
        "classifier_hidden": 128,
        "init_scheme": "fan_in_uniform",
    },
    "keypoints": {
        "sigma_smooth": 1.0,
        "threshold": 0.3,
        "window": 1,
    },
    "relation": {
        "d_l": 50.0,
        "d_kp": 6.0,
        "n_r": 3,
        "d_cand": None,
    },
    "train": {
        "epochs": 30,
        "learning_rate": 0.001,
        "lr_step_epochs": 10,
        "lr_gamma": 0.1,
        "lambda1": 1.0,
        "lambda2": 1.0,
        "split": [0.7, 0.2, 0.1],
        "batch_size": 1,
    },
    "assembly": {
        "tau_link": 0.5,
        "merge_radius": 4.0,
        "symmetrize": False,
    },
    "eval": {
        "topo_interval": 5.0,
        "topo_match_radius": 15.0,
        "topo_radius": 300.0,
        "topo_seeds": 100,
        "topo_aggregation": "pooled",
        "apls_control_spacing": 50.0,
        "apls_snap_radius": 15.0,
        "apls_max_pairs": 500,
        "directed": False,
    },
    "ablations": {name: False for name in ABLATION_NAMES},
    "runtime": {
        "threads": 1,
        "debug": False,
    },
}

_CHOICES = {
    "synth.graph_style": ("grid-perturbed", "poisson-delaunay"),
    "eval.topo_aggregation": ("pooled", "per_seed"),
    "model.init_scheme": ("fan_in_uniform",),
}


def default_settings() -> Dict[str, Any]:
    """Returns a deep copy of the defaults so callers can mutate freely."""
    return copy.deepcopy(DEFAULT_SETTINGS)


def _check_value(path: str, default: Any, value: Any) -> Any:
    """Type-checks an overlay value against the default it replaces."""
    if default is None:
        if value is None or (isinstance(value, (int, float)) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"'{path}' must be a number or null, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{path}' must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string, got {value!r}")
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigError(f"'{path}' must be one of {_CHOICES[path]}, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"'{path}' must be a list, got {value!r}")
        return value
    return value


def _merge(base: Dict[str, Any], overlay: Dict[str, Any], prefix: str = "") -> None:
    for key, value in overlay.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be an object")
            _merge(base[key], value, prefix=f"{path}.")
        else:
            base[key] = _check_value(path, base[key], value)


def merge_settings(overlay: Dict[str, Any], base: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Deep-merges an overlay document onto the defaults (or onto `base`).
    Unknown keys at any depth are rejected.
    """
    settings = copy.deepcopy(base) if base is not None else default_settings()
    _merge(settings, overlay)
    _validate(settings)
    return settings


def _validate(settings: Dict[str, Any]) -> None:
    split = settings["train"]["split"]
    if len(split) != 3 or any(s < 0 for s in split) or abs(sum(split) - 1.0) > 1e-6:
        raise ConfigError(f"'train.split' must be three non-negative fractions summing to 1, got {split}")
    tau = settings["assembly"]["tau_link"]
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"'assembly.tau_link' must lie in (0, 1), got {tau}")
    if settings["model"]["channels"] % settings["model"]["afim_heads"] != 0:
        raise ConfigError("'model.channels' must be divisible by 'model.afim_heads'")
    if settings["relation"]["d_l"] <= 0:
        raise ConfigError("'relation.d_l' must be positive")
    if settings["runtime"]["threads"] < 1:
        raise ConfigError("'runtime.threads' must be at least 1")


def load_run_config(path: Optional[str]) -> Dict[str, Any]:
    """
    Loads a JSON run config and resolves it against the defaults.
    With no path, the defaults themselves are returned.
    """
    if path is None:
        return default_settings()
    config_path = Path(path)
    if not config_path.exists():
        raise MissingInputError(f"config file not found: {config_path}")
    try:
        overlay = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
    if not isinstance(overlay, dict):
        raise ConfigError(f"config file {config_path} must hold a JSON object")
    return merge_settings(overlay)


def apply_cli_overrides(
        settings: Dict[str, Any],
        seed: Optional[int] = None,
        ablations: Optional[Iterable[str]] = None,
        directed: bool = False,
        threads: Optional[int] = None,
) -> Dict[str, Any]:
    """Applies the command-line flags that override config values."""
    resolved = copy.deepcopy(settings)
    if seed is not None:
        resolved["seed"] = int(seed)
    for name in ablations or []:
        if name not in ABLATION_NAMES:
            raise ConfigError(f"unknown ablation '{name}', expected one of {ABLATION_NAMES}")
        resolved["ablations"][name] = True
    if directed:
        resolved["eval"]["directed"] = True
    if threads is not None:
        resolved["runtime"]["threads"] = int(threads)
    _validate(resolved)
    return resolved


def save_resolved_config(settings: Dict[str, Any], out_dir: str) -> Path:
    """Writes the fully resolved config next to a command's outputs."""
    out_path = Path(out_dir) / RESOLVED_CONFIG_NAME
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(settings, indent=2, sort_keys=True), encoding="utf-8")
    return out_path


def config_hash(settings: Dict[str, Any]) -> str:
    """SHA-256 over the sections that shape the network's parameters."""
    payload = {"model": settings["model"], "ablations": settings["ablations"]}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def float64_requested() -> bool:
    return os.environ.get(FLOAT64_ENV, "").strip() in ("1", "true", "yes")
