"""TOML experiment configuration."""
from __future__ import annotations

import sys
from typing import Any

from .errors import PreconditionError
from .harness import McConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise PreconditionError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise PreconditionError(f"invalid config {path}: {exc}") from exc


def section(cfg: dict, name: str, required: bool = True) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise PreconditionError(f"config is missing the [{name}] table")
        return {}
    if not isinstance(sec, dict):
        raise PreconditionError(f"[{name}] must be a table")
    return sec


def need(sec: dict, key: str, where: str) -> Any:
    if key not in sec:
        raise PreconditionError(f"[{where}] needs '{key}'")
    return sec[key]


def mc_config(cfg: dict, seed=None, reps=None, workers=None) -> McConfig:
    """[mc] table with command-line overrides."""
    mc = section(cfg, "mc", required=False)
    return McConfig(
        reps=int(reps if reps is not None else mc.get("reps", 10_000)),
        seed=int(seed if seed is not None else mc.get("seed", 0)),
        cap=int(mc.get("cap", 1_000_000)),
        workers=int(workers if workers is not None else mc.get("workers", 1)),
        block=int(mc.get("block", 2048)),
    )
