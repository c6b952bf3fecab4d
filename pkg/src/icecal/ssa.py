"""Core flowline ice dynamics: flotation, velocity balance, thickness transport.

One horizontal dimension along a flow line, node 0 at the ice divide, the
last node at the calving front. Thickness, surface and velocity live on a
regular node grid; the depth-integrated viscosity is staggered half way
between nodes.

Unit conventions, fixed once and used everywhere:
    distance m, time yr, velocity m/yr, stress MPa,
    ice hardness MPa yr^(1/3), basal friction MPa m^(-1/3) yr^(1/3).
Densities are kg m^-3 and gravity is 9.81 m s^-2, so the driving stress
rho*g*h*dz/ds comes out in Pa/m and is divided by 1e6 on assembly.

All solvers have a batched core operating on stacks of states (leading
axis = batch). The public single-state functions are thin wrappers, so the
exact same arithmetic runs whether one profile or a whole ensemble is
being advanced.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg.lapack import dgtsv as _dgtsv

# regularization floors for the power-law rheology and friction law
STRAIN_RATE_FLOOR = 1e-10   # yr^-1, applied inside |du/ds|^((1-n)/n)
SLIDING_SPEED_FLOOR = 1e-6  # m/yr, applied as (|u| + floor)^(m-1)

# A velocity sweep that stalls below this movement (m/yr) is accepted by the
# year steppers even if it missed the strict tolerance: the residual chatter
# is orders of magnitude below both observation noise and the spin-up
# convergence threshold. Anything larger is a genuine failure.
VELOCITY_DELTA_SLACK = 1e-3


@dataclass(frozen=True)
class Grid:
    """Regular 1D grid of nodes along the flow line."""

    n_nodes: int
    spacing: float  # m

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("grid needs at least 2 nodes")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")

    @property
    def n_intervals(self) -> int:
        return self.n_nodes - 1

    @property
    def length(self) -> float:
        return self.n_intervals * self.spacing

    @property
    def s(self) -> np.ndarray:
        """Node coordinates in metres, 0 at the divide."""
        return np.arange(self.n_nodes) * self.spacing

    @classmethod
    def from_length(cls, length: float, n_intervals: int) -> "Grid":
        return cls(n_nodes=n_intervals + 1, spacing=length / n_intervals)


@dataclass(frozen=True)
class PhysicalConstants:
    """Physical and numerical constants for the flowline model."""

    ice_hardness: float = 0.4       # MPa yr^(1/3); lower value = softer ice
    flow_exponent: float = 3.0      # stress exponent of the viscous rheology
    friction_exponent: float = 1.0 / 3.0
    accumulation: float = 0.5       # m/yr surface mass balance
    basal_melt: float = 0.0         # m/yr, positive melts
    ice_density: float = 910.0      # kg m^-3
    water_density: float = 1028.0   # kg m^-3
    gravity: float = 9.81           # m s^-2
    sea_level: float = 0.0          # m
    timestep: float = 1.0 / 52.0    # yr per substep

    @property
    def mass_balance(self) -> float:
        """Net thickness source, m/yr."""
        return self.accumulation - self.basal_melt

    @property
    def density_ratio(self) -> float:
        return self.ice_density / self.water_density

    def with_hardness(self, value: float) -> "PhysicalConstants":
        return replace(self, ice_hardness=value)


@dataclass(frozen=True)
class BedProfile:
    """Bed elevation at the grid nodes, m above sea level."""

    elevation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "elevation", np.asarray(self.elevation, dtype=float))


@dataclass(frozen=True)
class FrictionProfile:
    """Basal friction coefficient at the grid nodes, MPa m^(-1/3) yr^(1/3)."""

    coefficient: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coefficient", np.asarray(self.coefficient, dtype=float))


@dataclass(frozen=True)
class IceState:
    """Thickness and velocity profiles at one instant."""

    thickness: np.ndarray
    velocity: np.ndarray
    year: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "thickness", np.asarray(self.thickness, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        if self.thickness.shape != self.velocity.shape:
            raise ValueError("thickness and velocity must have the same shape")


@dataclass
class SolveInfo:
    """Outcome of one fixed-point velocity solve."""

    converged: bool
    iterations: int
    last_delta: float       # max |u_k - u_{k-1}| on the final sweep, m/yr
    linear_residual: float  # relative residual of the final tridiagonal solve


@dataclass
class StepReport:
    """Outcome of a one-year step (all substeps).

    ``ok`` means every substep velocity either converged to tolerance or
    stalled within the caller-accepted slack; ``strictly_converged`` means
    no substep needed the slack at all.
    """

    ok: bool
    strictly_converged: bool
    velocity_iterations: int
    worst_delta: float


# ---------------------------------------------------------------------------
# flotation and surface geometry
# ---------------------------------------------------------------------------

def flotation_thickness(bed: np.ndarray, consts: PhysicalConstants) -> np.ndarray:
    """Minimum thickness at which ice resting on this bed stays grounded."""
    return (consts.sea_level - np.asarray(bed)) * consts.water_density / consts.ice_density


def grounded_mask(thickness, bed, consts: PhysicalConstants) -> np.ndarray:
    """Boolean mask, True where ice is grounded (h at or above flotation)."""
    return np.asarray(thickness) >= flotation_thickness(bed, consts)


def surface_elevation(thickness, bed, consts: PhysicalConstants) -> np.ndarray:
    """Upper surface elevation: bed + h where grounded, buoyant surface afloat."""
    thickness = np.asarray(thickness, dtype=float)
    bed = np.asarray(bed, dtype=float)
    afloat = consts.sea_level + (1.0 - consts.density_ratio) * thickness
    return np.where(grounded_mask(thickness, bed, consts), bed + thickness, afloat)


def thickness_from_surface(surface, bed, consts: PhysicalConstants) -> np.ndarray:
    """Invert the surface map: thickness consistent with an observed surface.

    A column is treated as grounded when the surface sits at or above the
    elevation a floating column over the same bed would have; otherwise the
    thickness follows from hydrostatic equilibrium. Exact inverse of
    ``surface_elevation`` for physically consistent inputs.
    """
    surface = np.asarray(surface, dtype=float)
    bed = np.asarray(bed, dtype=float)
    rho_i, rho_w = consts.ice_density, consts.water_density
    z0 = consts.sea_level
    grounded = surface >= z0 + (1.0 - rho_w / rho_i) * (bed - z0)
    floating_h = rho_w / (rho_w - rho_i) * (surface - z0)
    return np.where(grounded, surface - bed, floating_h)


def grounding_line_index(thickness, bed, consts: PhysicalConstants) -> int:
    """Node index of the grounding line.

    Smallest j with node j grounded and node j+1 floating; the last node
    when fully grounded; 0 when node 0 itself floats.
    """
    g = grounded_mask(thickness, bed, consts)
    if not g[0]:
        return 0
    if g.all():
        return g.size - 1
    trans = g[:-1] & ~g[1:]
    return int(np.argmax(trans))


def _grounded_mask_batch(H: np.ndarray, bed_rows: np.ndarray, consts) -> np.ndarray:
    return H >= (consts.sea_level - bed_rows) * consts.water_density / consts.ice_density


def _surface_batch(H: np.ndarray, bed_rows: np.ndarray, consts) -> np.ndarray:
    afloat = consts.sea_level + (1.0 - consts.density_ratio) * H
    return np.where(_grounded_mask_batch(H, bed_rows, consts), bed_rows + H, afloat)


def _gl_index_batch(grounded: np.ndarray) -> np.ndarray:
    """Row-wise grounding-line index, same convention as grounding_line_index."""
    n = grounded.shape[1]
    trans = grounded[:, :-1] & ~grounded[:, 1:]
    idx = np.where(trans.any(axis=1), np.argmax(trans, axis=1), n - 1)
    idx = np.where(grounded.all(axis=1), n - 1, idx)
    return np.where(~grounded[:, 0], 0, idx)


# ---------------------------------------------------------------------------
# tridiagonal solver
# ---------------------------------------------------------------------------

def _thomas_batch(sub, diag, sup, rhs):
    """Solve a stack of tridiagonal systems with one LAPACK call.

    Shapes: sub/sup (B, n-1), diag/rhs (B, n). The systems are packed into
    one block-diagonal tridiagonal matrix whose couplings between blocks
    are exactly zero; dgtsv's partial pivoting never swaps across a zero
    coupling and its elimination multiplier there is exactly zero, so each
    block's solution is bit-identical to solving that system alone,
    whatever else sits in the stack. Rows with non-finite bands or
    right-hand side are replaced by identity systems and reported failed;
    rows whose elimination still produces a non-finite value (zero or
    overflowing pivots) are re-solved one by one so a bad row can never
    contaminate a neighbour through the shared call. Returns (x, ok).
    """
    B, n = diag.shape
    if B == 0:
        return np.asarray(rhs, dtype=float).copy(), np.ones(0, dtype=bool)
    if n == 1:
        ok = np.abs(diag[:, 0]) > 1e-300
        x = rhs / np.where(ok[:, None], diag, 1.0)
        return x, ok & np.isfinite(x).all(axis=1)

    ok = (np.isfinite(diag).all(axis=1) & np.isfinite(rhs).all(axis=1)
          & np.isfinite(sub).all(axis=1) & np.isfinite(sup).all(axis=1))
    dl = np.zeros((B, n))
    du = np.zeros((B, n))
    d = np.array(diag, dtype=float)
    b = np.array(rhs, dtype=float)
    if ok.all():
        dl[:, 1:] = sub
        du[:, :-1] = sup
    else:
        dl[ok, 1:] = sub[ok]
        du[ok, :-1] = sup[ok]
        d[~ok] = 1.0
        b[~ok] = 0.0
    _, _, _, xflat, info = _dgtsv(dl.reshape(-1)[1:], d.reshape(-1),
                                  du.reshape(-1)[:-1], b.reshape(-1),
                                  overwrite_dl=1, overwrite_d=1,
                                  overwrite_du=1, overwrite_b=1)
    x = xflat.reshape(B, n)
    finite = np.isfinite(x).all(axis=1)
    if info == 0 and finite.all():
        return x, ok
    # a zero pivot aborts the whole stacked factorisation and an inf can
    # bleed into a neighbour through 0*inf during back-substitution, so
    # isolate the affected rows (all rows if the factorisation aborted)
    redo = np.ones(B, dtype=bool) if info != 0 else ~finite
    for i in np.nonzero(redo)[0]:
        if not ok[i]:
            x[i] = 0.0
            continue
        _, _, _, xi, info_i = _dgtsv(sub[i], diag[i], sup[i], rhs[i])
        x[i] = xi
        ok[i] = info_i == 0 and bool(np.isfinite(xi).all())
    return x, ok


def solve_tridiagonal(sub, diag, sup, rhs) -> np.ndarray:
    """Solve one tridiagonal system by O(n) banded elimination.

    sub and sup are the first lower and upper diagonals (length n-1),
    diag and rhs have length n. Raises when elimination hits a zero
    pivot, i.e. the system is singular.
    """
    sub = np.atleast_1d(np.asarray(sub, dtype=float))
    diag = np.atleast_1d(np.asarray(diag, dtype=float))
    sup = np.atleast_1d(np.asarray(sup, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    n = diag.size
    if rhs.size != n or sub.size != n - 1 or sup.size != n - 1:
        raise ValueError("inconsistent tridiagonal band lengths")
    x, ok = _thomas_batch(sub[None, :], diag[None, :], sup[None, :], rhs[None, :])
    if not ok[0]:
        raise ValueError("singular or severely ill-conditioned tridiagonal system")
    return x[0]


# ---------------------------------------------------------------------------
# velocity solve (fixed-point over the power-law coefficients)
# ---------------------------------------------------------------------------

def _staggered_viscosity(H, U, consts: PhysicalConstants, ds: float):
    """Depth-integrated viscosity 2*B*h*|du/ds|^((1-n)/n) at interval midpoints.

    Strain rate uses a forward difference at node 0 and centered differences
    inside; its magnitude is floored at STRAIN_RATE_FLOOR.
    """
    B_, n = H.shape
    npow = consts.flow_exponent
    du = np.empty((B_, n - 1))
    du[:, 0] = (U[:, 1] - U[:, 0]) / ds
    du[:, 1:] = (U[:, 2:] - U[:, :-2]) / (2.0 * ds)
    h_mid = 0.5 * (H[:, 1:] + H[:, :-1])
    return 2.0 * consts.ice_hardness * h_mid \
        * np.maximum(np.abs(du), STRAIN_RATE_FLOOR) ** ((1.0 - npow) / npow)


def _velocity_bands(H, Z, C_eff, consts: PhysicalConstants, ds: float, U, visc):
    """Assemble the tridiagonal momentum system about velocity U.

    H, Z, U: (B, n). C_eff: friction coefficient already zeroed on floating
    nodes, (B, n). visc: staggered viscosity (B, n-1). Returns the bands
    (sub, diag, sup, rhs).
    """
    B_, n = H.shape
    m = consts.friction_exponent

    # linearized basal drag per unit speed
    drag = C_eff * (np.abs(U) + SLIDING_SPEED_FLOOR) ** (m - 1.0)

    # driving stress rho*g*h*dz/ds, Pa -> MPa
    dz = np.empty((B_, n))
    dz[:, 0] = (Z[:, 1] - Z[:, 0]) / ds
    dz[:, 1:-1] = (Z[:, 2:] - Z[:, :-2]) / (2.0 * ds)
    dz[:, -1] = (Z[:, -1] - Z[:, -2]) / ds
    driving = consts.ice_density * consts.gravity * H * dz / 1.0e6

    ds2 = ds * ds
    sub = np.empty((B_, n - 1))
    diag = np.empty((B_, n))
    sup = np.empty((B_, n - 1))
    rhs = np.empty((B_, n))

    # interior rows: visc[j-1]*u_{j-1} - (visc[j]+visc[j-1]+ds^2*drag)*u_j + visc[j]*u_{j+1}
    sub[:, :-1] = visc[:, :-1]
    sup[:, 1:] = visc[:, 1:]
    diag[:, 1:-1] = -(visc[:, 1:] + visc[:, :-1] + ds2 * drag[:, 1:-1])
    rhs[:, 1:-1] = ds2 * driving[:, 1:-1]

    # divide: no-slip. The row is scaled to dominate its subdiagonal so
    # pivoting never swaps the constraint row; with zero rhs and zero
    # superdiagonal this keeps u[0] exactly zero.
    diag[:, 0] = np.maximum(1.0, 2.0 * visc[:, 0])
    sup[:, 0] = 0.0
    rhs[:, 0] = 0.0

    # calving front: ghost node eliminated with the hydrostatic spreading rate
    front_strain = consts.ice_density * consts.gravity * H[:, -1] / 1.0e6 \
        * (1.0 - consts.density_ratio) / (4.0 * consts.ice_hardness)
    sub[:, -1] = 2.0 * visc[:, -1]
    diag[:, -1] = -(2.0 * visc[:, -1] + ds2 * drag[:, -1])
    rhs[:, -1] = ds2 * driving[:, -1] - 2.0 * front_strain * ds * visc[:, -1]

    return sub, diag, sup, rhs


def _linear_residual(sub, diag, sup, rhs, X):
    """Row-wise relative infinity-norm residual of tridiagonal systems."""
    r = diag * X
    r[:, :-1] += sup * X[:, 1:]
    r[:, 1:] += sub * X[:, :-1]
    r -= rhs
    scale = np.maximum(np.abs(rhs).max(axis=1), 1e-30)
    return np.abs(r).max(axis=1) / scale


def _solve_velocity_batch(H, Z, C_eff, consts, ds, U0, tol, max_iter,
                          damping_floor=0.2, stall_sweeps=12,
                          stall_improvement=0.02,
                          stall_slack=VELOCITY_DELTA_SLACK):
    """Picard iteration on the batched momentum balance.

    Sweeps start undamped. When a row's iterate movement grows from one
    sweep to the next (the raw map oscillates where the strain rate crosses
    zero), the viscosity fed to that row's subsequent sweeps becomes a
    geometric mix between the current iterate's value and the previous
    sweep's viscosity; the mixing weight halves on every further growth
    event down to ``damping_floor``. Mixing leaves the fixed point
    unchanged. A row converges when one sweep moves it by no more than
    ``tol``.

    A row whose movement is already below ``stall_slack`` but has not
    improved by a factor of ``stall_improvement`` over ``stall_sweeps``
    consecutive sweeps is sitting in a limit cycle of the fixed-point map;
    it stops iterating early and stays flagged unconverged (callers decide
    whether the stall is acceptable).

    Returns (U, converged, iterations, last_delta, lin_resid); rows that
    hit a singular system are flagged and keep their last finite iterate.
    """
    U = U0.copy()
    B_ = U.shape[0]
    converged = np.zeros(B_, dtype=bool)
    failed = np.zeros(B_, dtype=bool)
    stalled = np.zeros(B_, dtype=bool)
    delta = np.full(B_, np.inf)
    delta_prev = np.full(B_, np.inf)
    best = np.full(B_, np.inf)
    no_gain = np.zeros(B_, dtype=int)
    lin = np.zeros(B_)
    theta = np.ones(B_)
    visc_prev = _staggered_viscosity(H, U, consts, ds)
    iters = 0
    # rows leave the working set as they finish; the per-row arithmetic is
    # independent of what else is stacked, so compacting changes nothing
    # about any row's result, only how much dead work each sweep carries
    act = np.arange(B_)
    for iters in range(1, max_iter + 1):
        H_a, Z_a, C_a, U_a = H[act], Z[act], C_eff[act], U[act]
        visc_now = _staggered_viscosity(H_a, U_a, consts, ds)
        theta_a = theta[act]
        if (theta_a == 1.0).all():
            visc = visc_now
        else:
            t = theta_a[:, None]
            visc = visc_now ** t * visc_prev[act] ** (1.0 - t)
        bands = _velocity_bands(H_a, Z_a, C_a, consts, ds, U_a, visc)
        U_new, ok = _thomas_batch(*bands)
        failed[act[~ok]] = True
        upd = act[ok]
        if upd.size:
            delta_prev[upd] = delta[upd]
            d_new = np.abs(U_new[ok] - U_a[ok]).max(axis=1)
            delta[upd] = d_new
            U[upd] = U_new[ok]
            conv_new = d_new <= tol
            converged[upd[conv_new]] = True
            grew = ~conv_new & (d_new > delta_prev[upd])
            theta[upd[grew]] = np.maximum(theta[upd[grew]] * 0.5, damping_floor)
            gained = d_new <= (1.0 - stall_improvement) * best[upd]
            no_gain[upd] = np.where(gained, 0, no_gain[upd] + 1)
            best[upd] = np.minimum(best[upd], d_new)
            stall_new = (~conv_new & (no_gain[upd] >= stall_sweeps)
                         & (d_new <= stall_slack))
            stalled[upd[stall_new]] = True
            # the residual is only reported for rows leaving the loop
            exit_local = (np.ones_like(conv_new) if iters == max_iter
                          else conv_new | stall_new)
            if exit_local.any():
                lin_now = _linear_residual(*bands, U_new)
                lin[upd[exit_local]] = lin_now[ok][exit_local]
        visc_prev[act] = visc
        act = act[~(converged[act] | failed[act] | stalled[act])]
        if act.size == 0:
            break
    delta[failed] = np.inf  # singular system = hard failure, not a near-miss
    return U, converged, iters, delta, lin


def solve_velocity(thickness, surface, friction, gl_index: int,
                   consts: PhysicalConstants, grid: Grid,
                   u_init=None, tol: float = 1e-6, max_iter: int = 200):
    """Solve the momentum balance for velocity on one profile.

    Friction acts on nodes 0..gl_index only. ``u_init`` warm-starts the
    fixed-point iteration (zeros by default). Returns (velocity, SolveInfo);
    non-convergence is a soft failure flagged on the info, the last iterate
    is still returned.
    """
    h = np.asarray(thickness, dtype=float)
    z = np.asarray(surface, dtype=float)
    c = np.asarray(friction, dtype=float)
    if u_init is None:
        u0 = np.zeros_like(h)
    else:
        u0 = np.asarray(u_init, dtype=float).copy()
    c_eff = np.where(np.arange(h.size) <= gl_index, c, 0.0)
    U, conv, iters, delta, lin = _solve_velocity_batch(
        h[None, :], z[None, :], c_eff[None, :], consts, grid.spacing,
        u0[None, :], tol, max_iter)
    info = SolveInfo(converged=bool(conv[0]), iterations=iters,
                     last_delta=float(delta[0]), linear_residual=float(lin[0]))
    return U[0], info


# ---------------------------------------------------------------------------
# thickness transport
# ---------------------------------------------------------------------------

def advance_thickness(thickness, velocity, consts: PhysicalConstants, grid: Grid) -> np.ndarray:
    """One explicit upwind substep of mass continuity.

    h_j <- h_j - dt/ds * (u_j h_j - u_{j-1} h_{j-1}) + mass_balance*dt for
    j >= 1, after which the divide node copies node 1 (zero-gradient) and
    negative thickness is clamped to zero.
    """
    h = np.asarray(thickness, dtype=float)
    u = np.asarray(velocity, dtype=float)
    out = _advance_thickness_batch(h[None, :], u[None, :], consts, grid.spacing)
    return out[0]


def _advance_thickness_batch(H, U, consts, ds) -> np.ndarray:
    dt = consts.timestep
    flux = U * H
    out = np.empty_like(H)
    out[:, 1:] = H[:, 1:] - (dt / ds) * (flux[:, 1:] - flux[:, :-1]) + consts.mass_balance * dt
    out[:, 0] = out[:, 1]
    np.maximum(out, 0.0, out=out)
    return out


# ---------------------------------------------------------------------------
# yearly stepping and spin-up
# ---------------------------------------------------------------------------

def _step_year_batch(H, U, bed_rows, c_rows, consts, ds, tol, max_iter,
                     slack=VELOCITY_DELTA_SLACK):
    """Advance a stack of states by one year (1/timestep substeps).

    bed_rows and c_rows broadcast against H. Returns
    (H, U, ok, strict, hard, (iters, worst_delta)) where ok flags rows whose
    velocity solves all converged or stalled within ``slack``, strict flags
    rows that never needed the slack, and hard flags rows that hit a
    singular system at some substep.
    """
    n_sub = int(round(1.0 / consts.timestep))
    B_ = H.shape[0]
    bed_rows = np.broadcast_to(bed_rows, H.shape)
    c_rows = np.broadcast_to(c_rows, H.shape)
    ok = np.ones(B_, dtype=bool)
    strict = np.ones(B_, dtype=bool)
    hard = np.zeros(B_, dtype=bool)
    total_iters = 0
    worst = 0.0
    cols = np.arange(H.shape[1])
    for _ in range(n_sub):
        H = _advance_thickness_batch(H, U, consts, ds)
        Z = _surface_batch(H, bed_rows, consts)
        gl = _gl_index_batch(_grounded_mask_batch(H, bed_rows, consts))
        C_eff = np.where(cols[None, :] <= gl[:, None], c_rows, 0.0)
        U, conv, iters, delta, _ = _solve_velocity_batch(
            H, Z, C_eff, consts, ds, U, tol, max_iter)
        strict &= conv
        ok &= conv | (delta <= slack)
        hard |= ~np.isfinite(delta)
        total_iters += iters
        worst = max(worst, float(delta.max()))
    return H, U, ok, strict, hard, (total_iters, worst)


def step_year(state: IceState, bed: BedProfile, friction: FrictionProfile,
              consts: PhysicalConstants, grid: Grid,
              tol: float = 1e-6, max_iter: int = 200):
    """Advance one state by a full year of substeps.

    Each substep transports thickness with the current velocity, then
    re-solves the momentum balance on the new geometry (velocity warm-started
    from the previous substep). Returns (IceState, StepReport).
    """
    H, U, ok, strict, _, (iters, worst) = _step_year_batch(
        state.thickness[None, :], state.velocity[None, :],
        bed.elevation[None, :], friction.coefficient[None, :],
        consts, grid.spacing, tol, max_iter)
    report = StepReport(ok=bool(ok[0]), strictly_converged=bool(strict[0]),
                        velocity_iterations=iters, worst_delta=worst)
    return IceState(H[0], U[0], year=state.year + 1.0), report


@dataclass
class SpinUpResult:
    state: IceState
    years: int
    converged: bool
    yearly_change: np.ndarray = field(repr=False)  # max |dh| per year, m
    worst_delta: float = 0.0  # worst final-sweep velocity movement, m/yr
    rough_years: int = 0      # years with a velocity solve past its budget


def spin_up(initial: IceState, bed: BedProfile, friction: FrictionProfile,
            consts: PhysicalConstants, grid: Grid,
            threshold: float = 0.05, max_years: int = 20000,
            tol: float = 1e-6, max_iter: int = 200) -> SpinUpResult:
    """Run to steady state: stop once the yearly max thickness change drops
    below ``threshold`` (m/yr).

    Velocity solves that exhaust their iteration budget with a small finite
    residual are tolerated (such years are counted in ``rough_years`` and
    the largest final-sweep movement is reported); a non-finite solve means
    the system went singular and raises.
    """
    state = state0 = initial
    changes = []
    worst = 0.0
    rough = 0
    for _ in range(max_years):
        state, report = step_year(state0, bed, friction, consts, grid, tol, max_iter)
        if not np.isfinite(report.worst_delta):
            raise RuntimeError(
                f"velocity solve went singular during spin-up year {state.year:.0f}")
        worst = max(worst, report.worst_delta)
        rough += 0 if report.ok else 1
        change = float(np.abs(state.thickness - state0.thickness).max())
        changes.append(change)
        state0 = state
        if change < threshold:
            return SpinUpResult(state, years=len(changes), converged=True,
                                yearly_change=np.asarray(changes),
                                worst_delta=worst, rough_years=rough)
    return SpinUpResult(state, years=len(changes), converged=False,
                        yearly_change=np.asarray(changes),
                        worst_delta=worst, rough_years=rough)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def area_above_flotation(thickness, bed, consts: PhysicalConstants, grid: Grid) -> float:
    """Cross-sectional area of ice above hydrostatic flotation, m^2.

    Nodes at or above sea level contribute their full thickness; submerged
    bed reduces the contribution by the flotation thickness, floored at 0.
    """
    h = np.asarray(thickness, dtype=float)
    b = np.asarray(bed, dtype=float)
    ratio = consts.water_density / consts.ice_density
    above = np.maximum(h + np.minimum(0.0, b - consts.sea_level) * ratio, 0.0)
    return float(above.sum() * grid.spacing)
