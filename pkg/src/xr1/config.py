"""Run configuration: flat key=value files with include layering and env overrides.

A config file is a sequence of lines, each either blank, a ``# comment``,
``include <relative-path>``, or ``key = value``.  Included files are resolved
relative to the including file and applied first, so later keys override.
Environment variables of the form ``XR1_<KEY>`` (key upper-cased) override
everything.  Every key is declared in ``SCHEMA`` with a type and default;
unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "XR1_"


class ConfigError(ValueError):
    """Raised for malformed config files, unknown keys, or bad values."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


# key -> (type, default). Types: int, float, bool, str.
SCHEMA: dict[str, tuple[type, object]] = {
    # stage selection and chaining
    "stage": (int, 1),
    "init_checkpoint": (str, ""),
    # shared codebook geometry
    "codebook_size": (int, 64),
    "code_dim": (int, 32),
    "n_motion_codes": (int, 4),
    "n_vision_codes": (int, 4),
    "views": (int, 2),
    "horizon": (int, 8),
    "action_dim": (int, 4),
    "proprio_dim": (int, 4),
    "image_size": (int, 64),
    # codebook behaviour
    "codebook_beta": (float, 0.25),
    "posterior_temperature": (float, 1.0),
    "codebook_revival": (bool, False),
    # loss switches
    "align_enabled": (bool, True),
    "align_weight": (float, 1.0),
    "vis_weight": (float, 1.0),
    "mo_weight": (float, 1.0),
    "uvmc_weight": (float, 1.0),
    "action_recon": (str, "flow"),  # flow | l1
    "align_stop_gradient": (str, "motion"),  # motion | none
    # optimizer / schedule
    "lr": (float, 1e-4),
    "weight_decay": (float, 0.0),
    "steps": (int, 3000),
    "batch_size": (int, 24),
    "log_every": (int, 10),
    "eval_every": (int, 500),
    "eval_windows": (int, 256),
    "holdout_fraction": (float, 0.1),
    # data
    "data_root": (str, "data"),
    "train_sources": (str, "arm2:0.40,arm3:0.15,gantry:0.35,human:0.10"),
    "seed": (int, 0),
    # stage-1 network widths
    "vision_channels": (int, 16),
    "motion_channels": (int, 32),
    # policy architecture
    "policy_width": (int, 96),
    "policy_layers": (int, 4),
    "policy_heads": (int, 4),
    "patch_size": (int, 16),
    "flow_steps": (int, 10),
    "flow_hidden": (int, 128),
    # world / evaluation
    "t_max": (int, 60),
    "success_dwell": (int, 5),
    "target_embodiment": (str, "arm2"),
    "eval_rollouts_per_task": (int, 20),
}


@dataclass
class RunConfig:
    """Typed view over a resolved flat config. Field names match SCHEMA keys."""

    stage: int
    init_checkpoint: str
    codebook_size: int
    code_dim: int
    n_motion_codes: int
    n_vision_codes: int
    views: int
    horizon: int
    action_dim: int
    proprio_dim: int
    image_size: int
    codebook_beta: float
    posterior_temperature: float
    codebook_revival: bool
    align_enabled: bool
    align_weight: float
    vis_weight: float
    mo_weight: float
    uvmc_weight: float
    action_recon: str
    align_stop_gradient: str
    lr: float
    weight_decay: float
    steps: int
    batch_size: int
    log_every: int
    eval_every: int
    eval_windows: int
    holdout_fraction: float
    data_root: str
    train_sources: str
    seed: int
    vision_channels: int
    motion_channels: int
    policy_width: int
    policy_layers: int
    policy_heads: int
    patch_size: int
    flow_steps: int
    flow_hidden: int
    t_max: int
    success_dwell: int
    target_embodiment: str
    eval_rollouts_per_task: int

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.codebook_size < 2 or self.code_dim < 1:
            raise ConfigError("codebook_size must be >= 2 and code_dim >= 1")
        if min(self.n_motion_codes, self.n_vision_codes, self.views, self.horizon) < 1:
            raise ConfigError("code counts, views and horizon must be positive")
        if self.action_recon not in ("flow", "l1"):
            raise ConfigError(f"action_recon must be 'flow' or 'l1', got {self.action_recon!r}")
        if self.align_stop_gradient not in ("motion", "none"):
            raise ConfigError("align_stop_gradient must be 'motion' or 'none'")
        if self.align_enabled and self.n_motion_codes != self.n_vision_codes:
            raise ConfigError(
                "alignment pairs motion and vision code positions row-wise; "
                f"n_motion_codes={self.n_motion_codes} != n_vision_codes={self.n_vision_codes}"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.codebook_beta <= 0 or self.posterior_temperature <= 0:
            raise ConfigError("codebook_beta and posterior_temperature must be positive")

    # -- geometry ---------------------------------------------------------

    @property
    def uvmc_tokens(self) -> int:
        """Number of code slots in a bundle: motion codes plus per-view vision codes."""
        return self.n_motion_codes + self.views * self.n_vision_codes

    @property
    def uvmc_length(self) -> int:
        """Flat length of a concatenated code bundle."""
        return self.uvmc_tokens * self.code_dim

    def geometry(self) -> dict[str, int]:
        """The fields that must agree between chained stage checkpoints."""
        return {
            "codebook_size": self.codebook_size,
            "code_dim": self.code_dim,
            "n_motion_codes": self.n_motion_codes,
            "n_vision_codes": self.n_vision_codes,
            "views": self.views,
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "proprio_dim": self.proprio_dim,
            "image_size": self.image_size,
        }

    def sources(self) -> list[tuple[str, float]]:
        """Parse train_sources into (name, weight) pairs, weights normalized to 1."""
        pairs = []
        for chunk in self.train_sources.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            name, _, weight = chunk.partition(":")
            if not weight:
                raise ConfigError(f"source entry {chunk!r} must be name:weight")
            w = float(weight)
            if w <= 0:
                raise ConfigError(f"source weight for {name!r} must be positive")
            pairs.append((name.strip(), w))
        if not pairs:
            raise ConfigError("train_sources is empty")
        total = sum(w for _, w in pairs)
        return [(n, w / total) for n, w in pairs]

    # -- serialization ----------------------------------------------------

    def to_text(self) -> str:
        """Canonical flat rendering (sorted keys); hash input and checkpoint payload."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        raw = {f.name: getattr(self, f.name) for f in fields(self)}
        raw.update(overrides)
        return RunConfig(**raw)


def _coerce(key: str, raw: str):
    typ, _ = SCHEMA[key]
    try:
        if typ is bool:
            return _parse_bool(raw)
        return typ(raw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc


def _read_layer(path: Path, seen: tuple[Path, ...]) -> dict[str, object]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.resolve() in seen:
        raise ConfigError(f"config include cycle at {path}")
    seen = seen + (path.resolve(),)
    values: dict[str, object] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("include "):
            inc = (path.parent / stripped[len("include "):].strip()).resolve()
            values.update(_read_layer(inc, seen))
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None,
                use_env: bool = True) -> RunConfig:
    """Resolve defaults <- file (with includes) <- env vars <- explicit overrides."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        values.update(_read_layer(Path(path), ()))
    if use_env:
        for key in SCHEMA:
            env = os.environ.get(ENV_PREFIX + key.upper())
            if env is not None:
                values[key] = _coerce(key, env)
    if overrides:
        for key, value in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    return RunConfig(**values)  # type: ignore[arg-type]


def full_scale_overrides() -> dict[str, object]:
    """Full-scale geometry (selectable, not the desk default)."""
    return {
        "codebook_size": 256,
        "code_dim": 256,
        "n_motion_codes": 13,
        "n_vision_codes": 13,
        "views": 3,
        "horizon": 50,
    }
