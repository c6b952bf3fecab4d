"""Experiment configuration: one dataclass holding every knob of a twin
experiment, plus a plain key=value file parser for the CLI.

The desk-scale defaults (J=200 grid, T=20 years, 2000 simulations, 100
ensemble members, 5 conditional filter runs, 10 test samples) shrink the
reference setup while keeping every ratio the metrics depend on.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .enkf import FilterConfig
from .npi import NetworkConfig
from .statespace import NoiseConfig

__all__ = ["ExperimentConfig", "parse_config_file", "apply_overrides"]


@dataclass
class ExperimentConfig:
    """Everything a full experiment run needs, with explicit seeds."""

    # grid and horizon
    n_intervals: int = 200          # J; the grid has J+1 nodes
    spacing: float = 4000.0         # m
    n_years: int = 20               # T observation times (year 0 included)

    # synthetic truth and priors
    truth_seed: int = 12345
    n_bed_obs: int = 50
    bed_obs_noise_sd: float = 20.0  # m
    bed_trend_bandwidth: float = 100e3
    bed_trend_degree: int = 2
    bed_gp_variance: float = 4000.0   # m^2
    bed_gp_range: float = 50e3        # m
    bed_gp_nugget: float = 200.0      # m^2
    friction_gp_mean: float = 0.02
    friction_gp_variance: float = 8e-5
    friction_gp_range: float = 25e3   # m
    friction_floor: float = 1e-4      # clamp before the log transform
    n_basis_bed: int = 30
    n_basis_friction: int = 30
    basis_radius_bed: float = 25690.0
    basis_radius_friction: float = 41103.0

    # simulation budgets
    n_train: int = 1790
    n_val: int = 200
    n_test: int = 10
    simulation_batch: int = 64
    spin_up_threshold: float = 0.05   # m/yr
    spin_up_max_years: int = 20000

    # data model
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    velocity_stride: int = 4
    sparse_velocity_years: int = 12

    # stage-two filtering and posterior summaries
    n_ensemble: int = 100           # N_e per filter run
    n_filter_draws: int = 5         # L conditional runs pooled
    n_posterior_draws: int = 1000   # parameter draws scored per test sample

    # network
    network: NetworkConfig = field(default_factory=NetworkConfig)

    # seeds (the harness derives all per-task seeds from these)
    data_seed: int = 2001
    train_seed: int = 42
    filter_seed: int = 7
    eval_seed: int = 99

    out_dir: str = "runs/osse"

    def __post_init__(self):
        if self.n_intervals < 10:
            raise ValueError("grid too small to hold a grounding line")
        if self.n_years < 2:
            raise ValueError("need at least 2 observation years")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")
        if self.n_filter_draws < 1:
            raise ValueError("need at least one conditional filter run")
        if self.friction_floor <= 0:
            raise ValueError("friction floor must be positive (log transform)")
        if min(self.n_basis_bed, self.n_basis_friction) < 2:
            raise ValueError("need at least 2 basis functions per field")

    @property
    def n_nodes(self) -> int:
        return self.n_intervals + 1

    @property
    def n_simulations(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def length(self) -> float:
        return self.n_intervals * self.spacing

    def filter_config(self, seed: int | None = None) -> FilterConfig:
        return FilterConfig(n_ensemble=self.n_ensemble, noise=self.noise,
                            seed=self.filter_seed if seed is None else seed)


# keys that live on the nested dataclasses; everything else is top-level
_NOISE_KEYS = {f.name for f in fields(NoiseConfig)}
_NETWORK_KEYS = {f.name for f in fields(NetworkConfig)}


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(type(like[0])(p) for p in parts)
    return text


def parse_config_file(path: str | Path) -> dict:
    """Read a plain-text key=value file into a string dict.

    One ``key = value`` pair per line; blank lines and lines starting
    with # are skipped. Keys may be repeated; the last value wins.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return a copy of cfg with string overrides coerced onto its fields.

    Keys route to the top level, the noise block, or the network block by
    field name (e.g. ``elevation_sd = 5`` lands on the noise config).
    Unknown keys raise.
    """
    top: dict = {}
    noise_kw: dict = {}
    net_kw: dict = {}
    top_names = {f.name for f in fields(ExperimentConfig)}
    for key, text in overrides.items():
        if key in ("noise", "network"):
            raise ValueError(f"set fields of {key!r} individually")
        if key in top_names:
            top[key] = _coerce(text, getattr(cfg, key))
        elif key in _NOISE_KEYS:
            noise_kw[key] = _coerce(text, getattr(cfg.noise, key))
        elif key in _NETWORK_KEYS:
            net_kw[key] = _coerce(text, getattr(cfg.network, key))
        else:
            raise ValueError(f"unknown configuration key: {key!r}")
    if noise_kw:
        top["noise"] = replace(cfg.noise, **noise_kw)
    if net_kw:
        top["network"] = replace(cfg.network, **net_kw)
    return replace(cfg, **top)
