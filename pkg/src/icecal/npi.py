"""Amortised Gaussian posterior inference for the flowline calibration.

A convolutional network maps a standardized image of the annual observations
(space x time x channel, channel order fixed as elevation then velocity,
missing entries set to 0 after standardization) to the parameters of a
Gaussian posterior over the basis coefficients of the bed fluctuations and
the log friction field. The posterior precision is parameterised through a
block-diagonal lower-bidiagonal Cholesky factor with exp-transformed
diagonal, one block per coefficient group, so positive definiteness holds by
construction.

Training pairs come from the forward model: coefficients drawn from the
field priors, a multi-year trajectory run from a shared steady state with
reduced ice hardness, and noisy masked observations of it. Generation is
batched across samples for speed, with every sample tied to its own
(seed, index, attempt) random stream so any single sample can be rebuilt
bit-identically without the rest of its batch.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.linalg import solve_triangular

from .fields import BasisSystem, FieldParams, basis_matrix, reconstruct_fields
from .ssa import (
    VELOCITY_DELTA_SLACK,
    Grid,
    IceState,
    PhysicalConstants,
    _gl_index_batch,
    _grounded_mask_batch,
    _solve_velocity_batch,
    _step_year_batch,
    _surface_batch,
)
from .statespace import (
    NoiseConfig,
    ObservationSet,
    velocity_error_sd,
    velocity_mask_pattern,
)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    """Affine standardization constants for one data or output group."""

    mean: float
    sd: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.sd)):
            raise ValueError("standardization statistics must be finite")
        if not self.sd > 0:
            raise ValueError(f"degenerate standardization: sd = {self.sd!r}")

    @classmethod
    def from_values(cls, values) -> "ChannelStats":
        v = np.asarray(values, dtype=float).ravel()
        if v.size < 2:
            raise ValueError("need at least two values to estimate a spread")
        return cls(float(v.mean()), float(v.std(ddof=1)))


@dataclass(frozen=True)
class StandardizationStats:
    """Per-group standardization constants, estimated on the training split.

    The data-channel statistics are computed over observed entries only;
    missing slots carry an arbitrary sentinel and never enter the moments.
    """

    elevation: ChannelStats
    velocity: ChannelStats
    bed_coeff: ChannelStats
    friction_coeff: ChannelStats


def standardize(values, stats: ChannelStats):
    """(values - mean) / sd, elementwise."""
    return (np.asarray(values, dtype=float) - stats.mean) / stats.sd


def destandardize(values, stats: ChannelStats):
    """Exact inverse of standardize."""
    return np.asarray(values, dtype=float) * stats.sd + stats.mean


def standardize_coefficients(theta, stats: StandardizationStats, p_bed: int):
    """Standardize a stacked (bed, friction) coefficient vector or batch."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    out[..., :p_bed] = standardize(theta[..., :p_bed], stats.bed_coeff)
    out[..., p_bed:] = standardize(theta[..., p_bed:], stats.friction_coeff)
    return out


def destandardize_coefficients(theta_std, stats: StandardizationStats, p_bed: int):
    theta_std = np.asarray(theta_std, dtype=float)
    out = np.empty_like(theta_std)
    out[..., :p_bed] = destandardize(theta_std[..., :p_bed], stats.bed_coeff)
    out[..., p_bed:] = destandardize(theta_std[..., p_bed:], stats.friction_coeff)
    return out


def observation_tensor(obs: ObservationSet, stats: StandardizationStats) -> np.ndarray:
    """Standardized network input for one observation set: (J+1, T, 2).

    Channel 0 is elevation, channel 1 velocity. Missing entries are set to 0
    after standardization, so the sentinel is the same constant the network
    saw during training regardless of the raw sentinel in ``obs``.
    """
    z = np.where(obs.mask_elevation, standardize(obs.elevation, stats.elevation), 0.0)
    u = np.where(obs.mask_velocity, standardize(obs.velocity, stats.velocity), 0.0)
    return np.stack([z.T, u.T], axis=-1)


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingScenario:
    """Everything needed to turn coefficient draws into network training pairs.

    ``sample_params`` draws one FieldParams from the prior using the supplied
    generator; it is called exactly once per attempt so the per-sample random
    stream stays replayable. The steady state is shared by all samples and
    the trajectory clock restarts at 0 when the hardness drops to
    ``dynamics_hardness``.
    """

    grid: Grid
    consts: PhysicalConstants
    steady_state: IceState
    sample_params: Callable[[np.random.Generator], FieldParams]
    n_years: int = 20
    dynamics_hardness: float = 0.3
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    velocity_stride: int = 4
    sparse_years: int = 12
    mask_floating_elevation: bool = True
    split_sizes: tuple[int, int, int] | None = None
    warmup_years: int = 0
    shelf_fill_rate: float | None = None
    tol: float = 1e-6
    max_iter: int = 200
    batch_size: int = 64
    max_attempts: int = 8

    def __post_init__(self):
        if self.n_years < 1:
            raise ValueError("need at least one observation year")
        if self.warmup_years < 0 or self.batch_size < 1 or self.max_attempts < 1:
            raise ValueError("warmup_years, batch_size, max_attempts must be sensible")
        if self.shelf_fill_rate is not None and self.shelf_fill_rate <= 0:
            raise ValueError("shelf fill rate must be positive when given")

    def dynamics_constants(self) -> PhysicalConstants:
        return self.consts.with_hardness(self.dynamics_hardness)


@dataclass(frozen=True)
class TrainingSet:
    """Standardized network inputs and outputs with train/val/test tags.

    inputs: (N, J+1, T, 2) float32, channel order (elevation, velocity),
    missing entries 0. outputs: (N, p_bed + p_friction) standardized
    coefficients. The stats used are carried along so raw quantities can be
    recovered exactly.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    split: np.ndarray
    stats: StandardizationStats
    p_bed: int
    p_friction: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float32))
        object.__setattr__(self, "outputs", np.asarray(self.outputs, dtype=float))
        object.__setattr__(self, "split", np.asarray(self.split))
        n = self.inputs.shape[0]
        if self.inputs.ndim != 4 or self.inputs.shape[3] != 2:
            raise ValueError("inputs must be (N, J+1, T, 2)")
        if self.outputs.shape != (n, self.p_bed + self.p_friction):
            raise ValueError("outputs must be (N, p_bed + p_friction)")
        if self.split.shape != (n,):
            raise ValueError("need one split tag per sample")
        bad = set(np.unique(self.split)) - {"train", "val", "test"}
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        if not np.isfinite(self.inputs).all() or not np.isfinite(self.outputs).all():
            raise ValueError("training tensors must be finite")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.inputs[idx], self.outputs[idx]


@dataclass(frozen=True)
class SampleRecord:
    """One fully materialised training sample, rebuilt on demand.

    thickness and velocity hold the true trajectory (T, J+1), the model_*
    arrays the noise-free observables, and ``observations`` the noisy masked
    set actually encoded into the training tensors.
    """

    index: int
    params: FieldParams
    thickness: np.ndarray
    velocity: np.ndarray
    model_elevation: np.ndarray
    model_velocity: np.ndarray
    observations: ObservationSet
    attempts: int


def shelf_thickness_fill(thickness, bed, consts: PhysicalConstants,
                         rate: float = 0.002) -> np.ndarray:
    """Replace thickness seaward of the grounding line with an exponential
    taper from the grounding-line thickness.

    Used when the floating-shelf thickness is unknown and has to be invented
    before spinning the model. The decay is per node index, not per metre.
    """
    h = np.asarray(thickness, dtype=float)
    squeeze = h.ndim == 1
    h2 = np.atleast_2d(h)
    bed2 = np.broadcast_to(np.atleast_2d(np.asarray(bed, dtype=float)), h2.shape)
    gl = _gl_index_batch(_grounded_mask_batch(h2, bed2, consts))
    j = np.arange(h2.shape[1])
    h_gl = h2[np.arange(h2.shape[0]), gl]
    fill = h_gl[:, None] * np.exp(-rate * (j[None, :] - gl[:, None]))
    out = np.where(j[None, :] > gl[:, None], fill, h2)
    return out[0] if squeeze else out


def _sample_stream(seed: int, index: int, attempt: int) -> np.random.Generator:
    # one independent stream per (sample, attempt); replay needs no batch context
    return np.random.default_rng(np.random.SeedSequence((seed, index, attempt)))


def _observe_batch(H, U, beds, frictions, consts, spacing, tol, max_iter):
    """Noise-free observables for a stack of states: (Z, U_obs, bad rows).

    The velocity is re-solved on the current geometry, warm-started from the
    carried velocity, exactly like the scalar observation operator. Rows
    whose solve ends beyond the steppers' slack are flagged, not raised.
    """
    Z = _surface_batch(H, beds, consts)
    gl = _gl_index_batch(_grounded_mask_batch(H, beds, consts))
    cols = np.arange(H.shape[1])
    c_eff = np.where(cols[None, :] <= gl[:, None], frictions, 0.0)
    U_obs, conv, _, delta, _ = _solve_velocity_batch(
        H, Z, c_eff, consts, spacing, U, tol, max_iter)
    bad = ~np.isfinite(delta) | (~conv & (delta > VELOCITY_DELTA_SLACK))
    return Z, U_obs, bad


def _simulate_param_batch(scenario: TrainingScenario, params_list):
    """Deterministic forward pass for a batch of coefficient draws.

    Returns (thickness, velocity, model_z, model_u, mask_z, failed) where the
    first four are (B, T, J+1). The trajectory carries the stepper velocity;
    observation solves never feed back into the dynamics.
    """
    grid = scenario.grid
    consts = scenario.dynamics_constants()
    nb = len(params_list)
    n_nodes = grid.n_nodes
    beds = np.empty((nb, n_nodes))
    fric = np.empty((nb, n_nodes))
    # overflow here is a handled failure mode (the row gets redrawn)
    with np.errstate(over="ignore", invalid="ignore"):
        for k, params in enumerate(params_list):
            bed_k, fric_k = reconstruct_fields(params, grid)
            beds[k] = bed_k.elevation
            fric[k] = fric_k.coefficient
    H = np.tile(scenario.steady_state.thickness, (nb, 1))
    U = np.tile(scenario.steady_state.velocity, (nb, 1))
    if scenario.shelf_fill_rate is not None:
        H = shelf_thickness_fill(H, beds, consts, scenario.shelf_fill_rate)
    failed = ~np.isfinite(fric).all(axis=1) | ~np.isfinite(beds).all(axis=1)

    T = scenario.n_years
    thick = np.zeros((nb, T, n_nodes))
    vel = np.zeros((nb, T, n_nodes))
    model_z = np.zeros((nb, T, n_nodes))
    model_u = np.zeros((nb, T, n_nodes))
    mask_z = np.zeros((nb, T, n_nodes), dtype=bool)

    def advance(H, U, failed):
        H, U, _, _, hard, _ = _step_year_batch(
            H, U, beds, fric, consts, grid.spacing,
            scenario.tol, scenario.max_iter)
        failed = failed | hard | ~np.isfinite(H).all(axis=1)
        return H, U, failed

    # rows that go non-finite stay flagged and get redrawn by the caller, so
    # the arithmetic noise they generate on the way down is not a defect
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(scenario.warmup_years):
            H, U, failed = advance(H, U, failed)
        for t in range(T):
            if t > 0:
                H, U, failed = advance(H, U, failed)
            thick[:, t] = H
            vel[:, t] = U
            Z, U_obs, bad = _observe_batch(H, U, beds, fric, consts,
                                           grid.spacing, scenario.tol,
                                           scenario.max_iter)
            failed = failed | bad
            model_z[:, t] = Z
            model_u[:, t] = U_obs
            if scenario.mask_floating_elevation:
                mask_z[:, t] = _grounded_mask_batch(H, beds, consts)
            else:
                mask_z[:, t] = True
    failed = (failed | ~np.isfinite(model_z).all(axis=(1, 2))
              | ~np.isfinite(model_u).all(axis=(1, 2)))
    return thick, vel, model_z, model_u, mask_z, failed


def _noisy_channels(model_z, model_u, noise: NoiseConfig, rng):
    """Draw observation noise for one sample, year by year.

    The order (elevation row, then velocity row, ascending year) matches
    simulate_observations, and noise is drawn at every node so the values at
    observed slots do not depend on the missingness pattern.
    """
    T, n_nodes = model_z.shape
    z = np.empty_like(model_z)
    u = np.empty_like(model_u)
    var_z = np.empty_like(model_z)
    var_u = np.empty_like(model_u)
    for t in range(T):
        z[t] = model_z[t] + rng.normal(0.0, noise.elevation_sd, n_nodes)
        sd_u = velocity_error_sd(model_u[t], noise.velocity_fraction,
                                 noise.velocity_cap)
        u[t] = model_u[t] + rng.standard_normal(n_nodes) * sd_u
        var_z[t] = noise.elevation_sd ** 2
        var_u[t] = sd_u ** 2
    return z, u, var_z, var_u


def _split_tags(n: int, split_sizes: tuple[int, int, int] | None) -> np.ndarray:
    if split_sizes is None:
        # paper-style proportions, at least one sample per split
        n_test = max(1, round(0.01 * n))
        n_val = max(1, round(0.10 * n))
        n_train = n - n_val - n_test
        split_sizes = (n_train, n_val, n_test)
    n_train, n_val, n_test = split_sizes
    if min(split_sizes) < 1 or n_train + n_val + n_test != n:
        raise ValueError(f"split sizes {split_sizes} do not partition {n} samples")
    tags = np.empty(n, dtype="<U5")
    tags[:n_train] = "train"
    tags[n_train:n_train + n_val] = "val"
    tags[n_train + n_val:] = "test"
    return tags


def generate_training_data(n: int, scenario: TrainingScenario,
                           seed: int) -> TrainingSet:
    """Simulate n training pairs and standardize them.

    Coefficients are drawn from the scenario prior, trajectories run from
    the shared steady state under the reduced hardness, and observations are
    noised and masked. Samples whose dynamics or observation solves go
    singular are dropped and redrawn with a fresh stream (logged in
    meta['redraws']). Standardization statistics come from the training
    split only, using observed entries only for the two data channels; the
    standardized tensors carry 0 at missing slots.

    Sample i is reproducible in isolation through regenerate_sample(scenario,
    seed, i): the per-sample streams are keyed by (seed, i, attempt), and the
    batched solvers run each row independently.
    """
    if n < 3:
        raise ValueError("need at least one sample per split")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    grid = scenario.grid
    T, n_nodes = scenario.n_years, grid.n_nodes

    obs_z = np.empty((n, T, n_nodes))
    obs_u = np.empty((n, T, n_nodes))
    mask_z = np.empty((n, T, n_nodes), dtype=bool)
    thetas = None
    p_bed = p_friction = 0
    redraws: list[tuple[int, int]] = []

    mask_u_pattern = velocity_mask_pattern(T, n_nodes, scenario.velocity_stride,
                                           scenario.sparse_years)
    for start in range(0, n, scenario.batch_size):
        todo = list(range(start, min(start + scenario.batch_size, n)))
        attempts = {i: 0 for i in todo}
        while todo:
            rngs = [_sample_stream(seed, i, attempts[i]) for i in todo]
            params_list = [scenario.sample_params(r) for r in rngs]
            if thetas is None:
                p_bed = params_list[0].bed_coeffs.size
                p_friction = params_list[0].friction_coeffs.size
                thetas = np.empty((n, p_bed + p_friction))
            _, _, model_z, model_u, mz, failed = _simulate_param_batch(
                scenario, params_list)
            still = []
            for k, i in enumerate(todo):
                if failed[k]:
                    redraws.append((i, attempts[i]))
                    attempts[i] += 1
                    if attempts[i] >= scenario.max_attempts:
                        raise RuntimeError(
                            f"sample {i} failed {attempts[i]} consecutive draws; "
                            f"the prior is incompatible with the dynamics")
                    still.append(i)
                    continue
                z, u, _, _ = _noisy_channels(model_z[k], model_u[k],
                                             scenario.noise, rngs[k])
                obs_z[i] = z
                obs_u[i] = u
                mask_z[i] = mz[k]
                if params_list[k].stacked.size != p_bed + p_friction:
                    raise ValueError("sample_params changed its coefficient sizes")
                thetas[i] = params_list[k].stacked
            todo = still

    split = _split_tags(n, scenario.split_sizes)
    train = split == "train"
    mask_u = np.broadcast_to(mask_u_pattern, (n, T, n_nodes))
    stats = StandardizationStats(
        elevation=ChannelStats.from_values(obs_z[train][mask_z[train]]),
        velocity=ChannelStats.from_values(obs_u[train][mask_u[train]]),
        bed_coeff=ChannelStats.from_values(thetas[train, :p_bed]),
        friction_coeff=ChannelStats.from_values(thetas[train, p_bed:]),
    )

    std_z = np.where(mask_z, standardize(obs_z, stats.elevation), 0.0)
    std_u = np.where(mask_u, standardize(obs_u, stats.velocity), 0.0)
    inputs = np.stack([std_z.transpose(0, 2, 1), std_u.transpose(0, 2, 1)],
                      axis=-1)
    outputs = standardize_coefficients(thetas, stats, p_bed)
    meta = {
        "seed": seed,
        "n_redrawn": len(redraws),
        "redraws": redraws[:100],
        "n_years": T,
        "grid_nodes": n_nodes,
    }
    return TrainingSet(inputs, outputs, split, stats, p_bed, p_friction, meta)


def regenerate_sample(scenario: TrainingScenario, seed: int,
                      index: int) -> SampleRecord:
    """Rebuild one training sample bit-identically from (seed, index).

    Walks the same attempt sequence generate_training_data would have used
    for this index, so redraws replay too. Returns the full record including
    the true trajectory and the noisy ObservationSet.
    """
    for attempt in range(scenario.max_attempts):
        rng = _sample_stream(seed, index, attempt)
        params = scenario.sample_params(rng)
        thick, vel, model_z, model_u, mask_z, failed = _simulate_param_batch(
            scenario, [params])
        if failed[0]:
            continue
        z, u, var_z, var_u = _noisy_channels(model_z[0], model_u[0],
                                             scenario.noise, rng)
        mask_u = velocity_mask_pattern(scenario.n_years, scenario.grid.n_nodes,
                                       scenario.velocity_stride,
                                       scenario.sparse_years)
        mz = mask_z[0]
        z = np.where(mz, z, 0.0)
        u = np.where(mask_u, u, 0.0)
        var_z = np.where(mz, var_z, 0.0)
        var_u = np.where(mask_u, var_u, 0.0)
        obs = ObservationSet(np.arange(scenario.n_years, dtype=float),
                             z, u, mz, mask_u, var_z, var_u)
        return SampleRecord(index, params, thick[0], vel[0],
                            model_z[0], model_u[0], obs, attempt)
    raise RuntimeError(
        f"sample {index} failed {scenario.max_attempts} consecutive draws; "
        f"the prior is incompatible with the dynamics")


# ---------------------------------------------------------------------------
# posterior parameterisation
# ---------------------------------------------------------------------------

def posterior_param_count(p_bed: int, p_friction: int) -> int:
    """Network output size: mean plus two bidiagonal factor blocks."""
    return 3 * (p_bed + p_friction) - 2


@dataclass(frozen=True)
class PosteriorParams:
    """Gaussian posterior in standardized coefficient space.

    The precision factor is block diagonal, one lower-bidiagonal block per
    coefficient group. Diagonal entries are stored raw (pre-exponentiation),
    sub-diagonal entries are used as-is, so any real vector parameterises a
    valid positive definite precision.
    """

    mean: np.ndarray
    bed_diag_raw: np.ndarray
    bed_subdiag: np.ndarray
    friction_diag_raw: np.ndarray
    friction_subdiag: np.ndarray

    def __post_init__(self):
        for name in ("mean", "bed_diag_raw", "bed_subdiag",
                     "friction_diag_raw", "friction_subdiag"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float))
        p1, p2 = self.bed_diag_raw.size, self.friction_diag_raw.size
        if self.bed_subdiag.size != p1 - 1 or self.friction_subdiag.size != p2 - 1:
            raise ValueError("each sub-diagonal needs one entry less than its diagonal")
        if self.mean.size != p1 + p2:
            raise ValueError("mean length must match the two blocks")
        for name in ("mean", "bed_diag_raw", "bed_subdiag",
                     "friction_diag_raw", "friction_subdiag"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} must be finite")

    @property
    def p_bed(self) -> int:
        return self.bed_diag_raw.size

    @property
    def p_friction(self) -> int:
        return self.friction_diag_raw.size

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_vector(cls, raw, p_bed: int, p_friction: int) -> "PosteriorParams":
        """Unpack a flat network output: mean, then per-block diagonal and
        sub-diagonal entries (bed block first)."""
        raw = np.asarray(raw, dtype=float).ravel()
        if raw.size != posterior_param_count(p_bed, p_friction):
            raise ValueError(
                f"expected {posterior_param_count(p_bed, p_friction)} raw "
                f"values, got {raw.size}")
        d = p_bed + p_friction
        parts = np.split(raw, np.cumsum([d, p_bed, p_bed - 1, p_friction]))
        return cls(parts[0], parts[1], parts[2], parts[3], parts[4])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mean, self.bed_diag_raw, self.bed_subdiag,
                               self.friction_diag_raw, self.friction_subdiag])


def assemble_cholesky(params: PosteriorParams) -> np.ndarray:
    """Dense block-diagonal lower-bidiagonal factor L with exp'd diagonal.

    The precision is Q = L L^T; log det Q = 2 * (sum of raw diagonal
    entries), with no factorisation needed.
    """
    d = params.dim
    L = np.zeros((d, d))
    for offset, diag_raw, sub in ((0, params.bed_diag_raw, params.bed_subdiag),
                                  (params.p_bed, params.friction_diag_raw,
                                   params.friction_subdiag)):
        p = diag_raw.size
        idx = offset + np.arange(p)
        L[idx, idx] = np.exp(diag_raw)
        L[idx[1:], idx[:-1]] = sub
    return L


def precision_logdet(params: PosteriorParams) -> float:
    return 2.0 * float(params.bed_diag_raw.sum() + params.friction_diag_raw.sum())


def _half_quad_block(resid, diag_raw, sub):
    # (L^T r)_i = exp(a_i) r_i + s_i r_{i+1}; last row has no sub term
    y = np.exp(diag_raw) * resid
    if sub.size:
        y = y.copy()
        y[..., :-1] += sub * resid[..., 1:]
    return 0.5 * (y ** 2).sum(axis=-1)


def gaussian_nll(theta_std, params: PosteriorParams) -> float:
    """Negative log density of standardized coefficients under the posterior.

    0.5 |L^T (theta - mu)|^2 - sum(log diag L) + (d/2) log 2 pi, averaged
    over the rows when a batch is given.
    """
    theta = np.asarray(theta_std, dtype=float)
    if theta.shape[-1] != params.dim:
        raise ValueError("coefficient vector length does not match the posterior")
    r = theta - params.mean
    p1 = params.p_bed
    quad = (_half_quad_block(r[..., :p1], params.bed_diag_raw, params.bed_subdiag)
            + _half_quad_block(r[..., p1:], params.friction_diag_raw,
                               params.friction_subdiag))
    logdet_L = params.bed_diag_raw.sum() + params.friction_diag_raw.sum()
    nll = quad - logdet_L + 0.5 * params.dim * math.log(2.0 * math.pi)
    return float(np.mean(nll))


def nll_loss(theta: torch.Tensor, raw: torch.Tensor,
             p_bed: int, p_friction: int) -> torch.Tensor:
    """Batch-mean Gaussian negative log likelihood, differentiable in raw.

    ``raw`` is the flat network output batch laid out as in
    PosteriorParams.from_vector.
    """
    d = p_bed + p_friction
    mu = raw[:, :d]
    r = theta - mu
    i = d
    a_b = raw[:, i:i + p_bed]
    i += p_bed
    s_b = raw[:, i:i + p_bed - 1]
    i += p_bed - 1
    a_c = raw[:, i:i + p_friction]
    i += p_friction
    s_c = raw[:, i:i + p_friction - 1]

    def half_quad(rb, a, s):
        tail = torch.exp(a[:, -1:]) * rb[:, -1:]
        if a.shape[1] > 1:
            head = torch.exp(a[:, :-1]) * rb[:, :-1] + s * rb[:, 1:]
            y = torch.cat([head, tail], dim=1)
        else:
            y = tail
        return 0.5 * (y ** 2).sum(dim=1)

    quad = half_quad(r[:, :p_bed], a_b, s_b) + half_quad(r[:, p_bed:], a_c, s_c)
    logdet_L = a_b.sum(dim=1) + a_c.sum(dim=1)
    return (quad - logdet_L + 0.5 * d * math.log(2.0 * math.pi)).mean()


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and optimisation knobs.

    The optimiser, learning rate, and batch size are implementation choices
    (adaptive moments at 1e-3, batches of 32); the rest follows the fixed
    three-stage convolutional design.
    """

    conv_widths: tuple[int, ...] = (32, 64, 128)
    kernel_sizes: tuple[int, ...] = (5, 3, 2)
    dropout: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self):
        if len(self.conv_widths) != len(self.kernel_sizes):
            raise ValueError("need one kernel size per conv layer")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.epochs, self.batch_size) < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch size, learning rate must be positive")


class PosteriorNetwork(torch.nn.Module):
    """Convolutional map from an observation image to posterior parameters.

    Input is (batch, J+1, T, 2): space and time are the image axes, the two
    data channels the input channels. Three unpadded square convolutions of
    width 32/64/128 with rectifier activations, each followed by 2x2 max
    pooling (odd extents lose their last row or column), then flatten,
    dropout, and a dense layer onto the 3(p_bed + p_friction) - 2 posterior
    parameters.
    """

    def __init__(self, n_nodes: int, n_years: int, p_bed: int,
                 p_friction: int, config: NetworkConfig | None = None):
        super().__init__()
        cfg = config or NetworkConfig()
        self.n_nodes = n_nodes
        self.n_years = n_years
        self.p_bed = p_bed
        self.p_friction = p_friction
        self.config = cfg
        layers: list[torch.nn.Module] = []
        channels = 2
        h, w = n_nodes, n_years
        for width, k in zip(cfg.conv_widths, cfg.kernel_sizes):
            if h < k or w < k:
                raise ValueError(
                    f"input {n_nodes}x{n_years} too small for kernel {k} "
                    f"at image size {h}x{w}")
            layers += [torch.nn.Conv2d(channels, width, k), torch.nn.ReLU(),
                       torch.nn.MaxPool2d(2)]
            h, w = (h - k + 1) // 2, (w - k + 1) // 2
            if h < 1 or w < 1:
                raise ValueError(
                    f"input {n_nodes}x{n_years} collapses to nothing after "
                    f"pooling; need a larger image or fewer stages")
            channels = width
        self.features = torch.nn.Sequential(*layers)
        self.flat_dim = channels * h * w
        self.dropout = torch.nn.Dropout(cfg.dropout)
        self.head = torch.nn.Linear(self.flat_dim, posterior_param_count(p_bed, p_friction))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.n_nodes, self.n_years, 2):
            raise ValueError(
                f"expected input (batch, {self.n_nodes}, {self.n_years}, 2), "
                f"got {tuple(x.shape)}")
        x = x.permute(0, 3, 1, 2)
        return self.head(self.dropout(self.features(x).flatten(1)))

    def architecture(self) -> dict:
        """Hashable architecture description for checkpoint manifests."""
        return {
            "n_nodes": self.n_nodes,
            "n_years": self.n_years,
            "p_bed": self.p_bed,
            "p_friction": self.p_friction,
            "conv_widths": list(self.config.conv_widths),
            "kernel_sizes": list(self.config.kernel_sizes),
            "dropout": self.config.dropout,
        }


@dataclass(frozen=True)
class TrainingReport:
    """Loss curves and the checkpoint selection outcome."""

    train_curve: np.ndarray
    val_curve: np.ndarray
    best_epoch: int
    best_val_loss: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train_curve", np.asarray(self.train_curve, dtype=float))
        object.__setattr__(self, "val_curve", np.asarray(self.val_curve, dtype=float))
        if self.val_curve.size and self.best_epoch != int(np.argmin(self.val_curve)):
            raise ValueError("selected epoch must attain the validation minimum")


def _eval_loss(net: PosteriorNetwork, x: torch.Tensor, y: torch.Tensor,
               chunk: int = 256) -> float:
    net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for k in range(0, x.shape[0], chunk):
            xb, yb = x[k:k + chunk], y[k:k + chunk]
            loss = nll_loss(yb, net(xb), net.p_bed, net.p_friction)
            total += float(loss) * xb.shape[0]
            count += xb.shape[0]
    return total / count


def train(data: TrainingSet, net_cfg: NetworkConfig | None = None,
          seed: int = 0) -> tuple[PosteriorNetwork, TrainingReport]:
    """Fit the posterior network on the train split, select on validation.

    Minimises the Monte Carlo negative-log-density objective with adaptive
    moments, records per-epoch train and validation losses, and returns the
    weights from the epoch with the lowest validation loss. A non-finite
    loss aborts with the offending epoch and batch in the message.
    """
    cfg = net_cfg or NetworkConfig()
    x_train, y_train = data.subset("train")
    x_val, y_val = data.subset("val")
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ValueError("training needs non-empty train and val splits")
    torch.manual_seed(seed)
    net = PosteriorNetwork(data.inputs.shape[1], data.inputs.shape[2],
                           data.p_bed, data.p_friction, cfg)
    xt = torch.from_numpy(np.ascontiguousarray(x_train))
    yt = torch.from_numpy(y_train.astype(np.float32))
    xv = torch.from_numpy(np.ascontiguousarray(x_val))
    yv = torch.from_numpy(y_val.astype(np.float32))
    optimiser = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    shuffle = torch.Generator().manual_seed(seed)

    train_curve, val_curve = [], []
    best_val, best_epoch, best_state = math.inf, -1, None
    n = xt.shape[0]
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(n, generator=shuffle)
        epoch_loss, seen = 0.0, 0
        for k in range(0, n, cfg.batch_size):
            idx = perm[k:k + cfg.batch_size]
            optimiser.zero_grad()
            loss = nll_loss(yt[idx], net(xt[idx]), net.p_bed, net.p_friction)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training loss became non-finite at epoch {epoch}, "
                    f"batch {k // cfg.batch_size} "
                    f"(loss {float(loss.detach())!r})")
            loss.backward()
            optimiser.step()
            epoch_loss += float(loss.detach()) * idx.shape[0]
            seen += idx.shape[0]
        train_curve.append(epoch_loss / seen)
        val_loss = _eval_loss(net, xv, yv)
        val_curve.append(val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    return net, TrainingReport(np.array(train_curve), np.array(val_curve),
                               best_epoch, best_val, seed)


def infer_posterior(network: PosteriorNetwork, obs: ObservationSet,
                    stats: StandardizationStats) -> PosteriorParams:
    """One deterministic forward pass from observations to the posterior.

    Dropout is disabled; two calls on the same input return the same
    parameters. The observation set must match the image size the network
    was built for.
    """
    x = observation_tensor(obs, stats)
    if x.shape != (network.n_nodes, network.n_years, 2):
        raise ValueError(
            f"observations are {x.shape[:2]}, network expects "
            f"({network.n_nodes}, {network.n_years})")
    network.eval()
    with torch.no_grad():
        raw = network(torch.from_numpy(x[None].astype(np.float32)))
    return PosteriorParams.from_vector(raw[0].double().numpy(),
                                       network.p_bed, network.p_friction)


# ---------------------------------------------------------------------------
# posterior sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorSampleSet:
    """Draws and summaries from one fitted posterior, in physical units.

    theta stacks the destandardized (bed, friction) coefficients per draw;
    bed and friction are the reconstructed fields per draw. The interval
    bounds are pointwise 95% bands per coefficient from the precision
    inverse; standardized draws are kept for calibration diagnostics.
    """

    theta: np.ndarray
    bed: np.ndarray
    friction: np.ndarray
    theta_mean: np.ndarray
    theta_low: np.ndarray
    theta_high: np.ndarray
    standardized: np.ndarray


def sample_posterior(params: PosteriorParams, n_draws: int,
                     stats: StandardizationStats, bed_trend,
                     basis_bed: BasisSystem, basis_friction: BasisSystem,
                     grid: Grid, rng) -> PosteriorSampleSet:
    """Draw coefficient vectors from the Gaussian posterior and rebuild fields.

    Draws solve L^T x = xi for standard normal xi (precision
    parameterisation), are destandardized blockwise, and feed the basis
    reconstruction: bed trend plus bed-block expansion, exponential of the
    friction-block expansion.
    """
    if n_draws < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(rng)
    L = assemble_cholesky(params)
    d = params.dim
    xi = rng.standard_normal((d, n_draws))
    std_draws = params.mean + solve_triangular(L.T, xi, lower=False).T

    inv_L = solve_triangular(L, np.eye(d), lower=True)
    var_std = (inv_L ** 2).sum(axis=0)
    half = 1.959963984540054 * np.sqrt(var_std)

    p1 = params.p_bed
    theta = destandardize_coefficients(std_draws, stats, p1)
    mean = destandardize_coefficients(params.mean, stats, p1)
    low = destandardize_coefficients(params.mean - half, stats, p1)
    high = destandardize_coefficients(params.mean + half, stats, p1)

    Phi_b = basis_matrix(basis_bed, grid.s)
    Phi_c = basis_matrix(basis_friction, grid.s)
    trend = np.broadcast_to(np.asarray(bed_trend, dtype=float), (grid.n_nodes,))
    bed = trend + theta[:, :p1] @ Phi_b.T
    friction = np.exp(theta[:, p1:] @ Phi_c.T)
    return PosteriorSampleSet(theta, bed, friction, mean, low, high, std_draws)


def calibration_ranks(truth, draws) -> np.ndarray:
    """Rank of each true coordinate among posterior draws: count of draws
    strictly below the truth, one integer in [0, L] per coordinate."""
    truth = np.asarray(truth, dtype=float)
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or truth.shape != (draws.shape[1],):
        raise ValueError("draws must be (L, d) with a length-d truth")
    return (draws < truth).sum(axis=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _stats_to_dict(stats: StandardizationStats) -> dict:
    return {name: {"mean": ch.mean, "sd": ch.sd}
            for name, ch in (("elevation", stats.elevation),
                             ("velocity", stats.velocity),
                             ("bed_coeff", stats.bed_coeff),
                             ("friction_coeff", stats.friction_coeff))}


def _stats_from_dict(d: dict) -> StandardizationStats:
    return StandardizationStats(**{name: ChannelStats(**d[name])
                                   for name in ("elevation", "velocity",
                                                "bed_coeff", "friction_coeff")})


def save_checkpoint(path, network: PosteriorNetwork,
                    stats: StandardizationStats,
                    report: TrainingReport | None = None,
                    extra: dict | None = None) -> Path:
    """Write the weights blob at ``path`` and a JSON manifest next to it.

    The manifest records the architecture (and its hash), the
    standardization constants, and the training selection outcome, which is
    enough to rebuild the network and re-verify its behaviour.
    """
    path = Path(path)
    arch = network.architecture()
    arch_json = json.dumps(arch, sort_keys=True)
    manifest = {
        "architecture": arch,
        "architecture_hash": hashlib.sha256(arch_json.encode()).hexdigest(),
        "stats": _stats_to_dict(stats),
    }
    if report is not None:
        manifest["seed"] = report.seed
        manifest["best_epoch"] = report.best_epoch
        manifest["best_val_loss"] = report.best_val_loss
        manifest["val_curve"] = report.val_curve.tolist()
    if extra:
        manifest["extra"] = extra
    torch.save(network.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> tuple[PosteriorNetwork, StandardizationStats, dict]:
    """Rebuild a saved network, its standardization constants, and manifest."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    arch = manifest["architecture"]
    cfg = NetworkConfig(conv_widths=tuple(arch["conv_widths"]),
                        kernel_sizes=tuple(arch["kernel_sizes"]),
                        dropout=arch["dropout"])
    net = PosteriorNetwork(arch["n_nodes"], arch["n_years"], arch["p_bed"],
                           arch["p_friction"], cfg)
    net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    return net, _stats_from_dict(manifest["stats"]), manifest
