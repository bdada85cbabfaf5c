"""Pipeline configuration: JSON file over defaults, then environment
variables, then --set overrides. The file is the source of truth; the
other two layers override individual keys.

Environment variables use the ``SPARSE_CT_LAB_`` prefix with ``__``
separating path segments, e.g. ``SPARSE_CT_LAB_SERVICE__PORT=9000``.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

ENV_PREFIX = "SPARSE_CT_LAB_"

DEFAULTS = {
    "paths": {"workdir": "runs/default"},
    "phantom": {"size": 128, "pixel_size_mm": 2.0, "n_vessels": 6,
                "edge_px": 1.5},
    "dataset": {"n_train": 8, "n_val": 2, "n_test": 4,
                "slices_per_subject": 1, "study_diseased": 12,
                "study_healthy": 7},
    "views": {"full": 2048, "levels": [16, 32, 64, 128, 256, 512]},
    "unet": {"depth": 4, "base_channels": 8, "variant": "dual-frame",
             "bridge_combine": "add"},
    "train": {"max_epochs": 30, "batch_size": 6, "lr0": 0.001,
              "patience": 5, "steps_per_epoch": None},
    "study": {"readers": 3},
    "service": {"host": "127.0.0.1", "port": 8877, "store": None,
                "ui_dir": None},
    "seeds": {"phantom": 11, "init": 22, "shuffle": 33, "study": 44},
}


class ConfigError(ValueError):
    """Malformed configuration file or override."""


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def load_config(path: str | Path | None = None,
                sets: list[str] | None = None,
                environ: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        cfg = _deep_merge(cfg, loaded)

    environ = os.environ if environ is None else environ
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(cfg, dotted, _parse_value(raw))

    for assignment in sets or []:
        if "=" not in assignment:
            raise ConfigError(f"--set expects key=value, got {assignment!r}")
        dotted, raw = assignment.split("=", 1)
        _set_path(cfg, dotted.strip(), _parse_value(raw))
    return cfg


def workdir(cfg: dict) -> Path:
    return Path(cfg["paths"]["workdir"])
