"""Run configuration: model hyperparameters, chain controls, design roles.

Config files are plain-text ``key = value`` lines ('#' starts a comment).
Every :class:`ModelConfig` field has a key; the design-role section uses the
``design_*`` keys.  Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .data import DesignSpec
from .errors import ConfigError

VARIANT_FACTORS = "factors"
VARIANT_NO_FACTORS = "no_factors"

SPIKE_SLAB_A0 = 1.0  # fixed; b0 then pins the prior inclusion probability


def spike_slab_b0(inclusion_prob: float, n_factors: int) -> float:
    """Beta prior's b0 so that Pr(S_j > 0) equals the requested probability."""
    c = inclusion_prob
    return (1.0 - c) / c * n_factors


def default_a_grid(n_taxa: int) -> tuple[float, ...]:
    """Support of the shrinkage concentration: 1/K plus 0.05 steps to 0.95."""
    grid = {round(0.05 * i, 2) for i in range(1, 20)}
    grid.add(1.0 / n_taxa)
    return tuple(sorted(grid))


@dataclass(frozen=True)
class ModelConfig:
    """Everything a fit needs beyond the data itself."""

    n_factors: int | None = None        # None: use the number of samples
    u0: float = 1.0                     # variance priors InvGam(u0, v0)
    v0: float = 1.0
    c0: float = 1.0                     # global-scale rate prior Gam(c0, d0)
    d0: float = 1.0
    inclusion_prob: float = 0.5
    a_grid: tuple[float, ...] | None = None   # None: default_a_grid(K)
    epsilon0: float = 0.01
    n_steps: int = 25
    accept_low: float = 0.25
    accept_high: float = 0.45
    adapt_window: int = 100
    iterations: int = 10_000
    burn_in: int = 5_000
    thin: int = 1
    seed: int = 0
    n_chains: int = 1
    variant: str = VARIANT_FACTORS
    retain_lambda: bool = False

    def validate(self) -> "ModelConfig":
        if self.n_factors is not None and self.n_factors < 1:
            raise ConfigError("n_factors must be >= 1")
        for name in ("u0", "v0", "c0", "d0"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 < self.inclusion_prob < 1.0:
            raise ConfigError("inclusion_prob must lie in (0, 1)")
        if self.a_grid is not None:
            if len(self.a_grid) < 1 or any(not 0.0 < a < 1.0 for a in self.a_grid):
                raise ConfigError("a_grid values must lie in (0, 1)")
        if self.epsilon0 <= 0:
            raise ConfigError("epsilon0 must be > 0")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if not 0.0 < self.accept_low < self.accept_high < 1.0:
            raise ConfigError("acceptance band must satisfy 0 < low < high < 1")
        if self.adapt_window < 1:
            raise ConfigError("adapt_window must be >= 1")
        if self.burn_in < 0 or self.iterations <= self.burn_in:
            raise ConfigError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        if self.variant not in (VARIANT_FACTORS, VARIANT_NO_FACTORS):
            raise ConfigError(f"unknown variant '{self.variant}'")
        return self

    def resolved(self, n_samples: int, n_taxa: int) -> "ModelConfig":
        """Fill data-dependent defaults (factor count, concentration grid)."""
        cfg = self
        if cfg.variant == VARIANT_NO_FACTORS:
            cfg = replace(cfg, n_factors=n_taxa)
        elif cfg.n_factors is None:
            cfg = replace(cfg, n_factors=n_samples)
        if cfg.a_grid is None:
            cfg = replace(cfg, a_grid=default_a_grid(n_taxa))
        return cfg.validate()

    def hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _parse_bool(value: str, key: str) -> bool:
    try:
        return _BOOL[value.lower()]
    except KeyError:
        raise ConfigError(f"{key}: expected a boolean, got '{value}'") from None


def _parse_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got '{value}'") from None


def _parse_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got '{value}'") from None


MODEL_KEYS: dict[str, callable] = {
    "n_factors": lambda v, k: None if v.lower() == "auto" else _parse_int(v, k),
    "u0": _parse_float,
    "v0": _parse_float,
    "c0": _parse_float,
    "d0": _parse_float,
    "inclusion_prob": _parse_float,
    "a_grid": lambda v, k: None if v.lower() == "auto" else tuple(
        _parse_float(s.strip(), k) for s in v.split(",") if s.strip()),
    "epsilon0": _parse_float,
    "n_steps": _parse_int,
    "accept_low": _parse_float,
    "accept_high": _parse_float,
    "adapt_window": _parse_int,
    "iterations": _parse_int,
    "burn_in": _parse_int,
    "thin": _parse_int,
    "seed": _parse_int,
    "n_chains": _parse_int,
    "variant": lambda v, k: v.strip(),
    "retain_lambda": _parse_bool,
}

DESIGN_KEYS = ("design_covariates", "design_blocks", "design_interactions")


def parse_config_text(text: str, source: str = "<config>",
                      ) -> tuple[ModelConfig, DesignSpec | None]:
    """Parse key-value config text into a ModelConfig and optional DesignSpec."""
    model_values: dict[str, object] = {}
    design_values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in MODEL_KEYS:
            if key in model_values:
                raise ConfigError(f"{source}:{line_no}: duplicate key '{key}'")
            model_values[key] = MODEL_KEYS[key](value, key)
        elif key in DESIGN_KEYS:
            if key in design_values:
                raise ConfigError(f"{source}:{line_no}: duplicate key '{key}'")
            design_values[key] = value
        else:
            raise ConfigError(f"{source}:{line_no}: unknown key '{key}'")

    config = ModelConfig(**model_values)
    spec = None
    if design_values:
        if "design_covariates" not in design_values:
            raise ConfigError(f"{source}: design section needs design_covariates")
        covs = tuple(s.strip() for s in
                     design_values["design_covariates"].split(",") if s.strip())
        blocks = tuple(s.strip() for s in
                       design_values.get("design_blocks", "").split(",") if s.strip())
        inter = []
        for term in design_values.get("design_interactions", "").split(","):
            term = term.strip()
            if not term:
                continue
            parts = [p.strip() for p in term.replace("*", ":").split(":")]
            if len(parts) != 2:
                raise ConfigError(f"{source}: bad interaction term '{term}'")
            inter.append((parts[0], parts[1]))
        spec = DesignSpec(covariates=covs, blocks=blocks,
                          interactions=tuple(inter))
    return config, spec


def load_config(path: str) -> tuple[ModelConfig, DesignSpec | None]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


def apply_overrides(config: ModelConfig, overrides: list[str]) -> ModelConfig:
    """Apply CLI 'key=value' overrides; keys mirror the config file exactly."""
    updates: dict[str, object] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in MODEL_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        updates[key] = MODEL_KEYS[key](value, key)
    return replace(config, **updates)


def format_config(config: ModelConfig, spec: DesignSpec | None = None) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if value is None:
            text = "auto"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ", ".join(repr(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    if spec is not None:
        lines.append(f"design_covariates = {', '.join(spec.covariates)}")
        if spec.blocks:
            lines.append(f"design_blocks = {', '.join(spec.blocks)}")
        if spec.interactions:
            terms = ", ".join(f"{a}*{b}" for a, b in spec.interactions)
            lines.append(f"design_interactions = {terms}")
    return "\n".join(lines) + "\n"
