"""Central-difference time stepping, critical time step and trace recording."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import WaveSystem

log = logging.getLogger(__name__)


class InstabilityError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite wave field at time step {step}")
        self.step = step


class EstimationError(RuntimeError):
    def __init__(self, message: str, last_estimate: float):
        super().__init__(message)
        self.last_estimate = last_estimate


@dataclass(frozen=True)
class TimeGrid:
    t_max: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.t_max / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @classmethod
    def auto(cls, t_max: float, n_requested: int, dt_crit: float, safety: float = 0.8) -> TimeGrid:
        """Keep ``n_requested`` unless that would exceed ``safety * dt_crit``."""
        n = max(n_requested, int(np.ceil(t_max / (safety * dt_crit))))
        return cls(t_max, n)


@dataclass
class WaveHistory:
    """Coefficient snapshots ``u(t_i)`` at steps ``0, s, 2s, ...``."""

    coeffs: np.ndarray  # (n_stored, n_dof)
    stride: int
    dt: float

    @property
    def steps(self) -> np.ndarray:
        return np.arange(len(self.coeffs)) * self.stride

    @property
    def nbytes(self) -> int:
        return self.coeffs.nbytes

    def dump(self, path):
        """Raw little-endian float64, one row per stored step."""
        self.coeffs.astype("<f8").tofile(path)


@dataclass
class TraceSet:
    receivers: np.ndarray  # (n_r, 2)
    traces: np.ndarray  # (n_r, n_steps + 1)
    dt: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.traces.shape[1]) * self.dt


def receiver_matrix(basis, receivers) -> sp.csr_matrix:
    return basis.evaluation_matrix(np.atleast_2d(receivers))


def critical_dt(system: WaveSystem, lumped: bool, tol: float = 1e-6, max_iter: int = 10000,
                seed: int = 0) -> float:
    """``2 / sqrt(lambda_max)`` of ``(K, M)`` by power iteration on ``M^-1 K``."""
    solve = system.mass_solver(lumped)
    M = sp.diags(system.M_lumped) if lumped else system.M
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(system.n_dof)
    lam_old = 0.0
    lam = 0.0
    for it in range(max_iter):
        Kx = system.K @ x
        lam = float(x @ Kx) / float(x @ (M @ x))
        if it > 0 and abs(lam - lam_old) <= tol * abs(lam):
            return 2.0 / np.sqrt(lam)
        lam_old = lam
        x = solve(Kx)
        x /= np.linalg.norm(x)
    raise EstimationError(f"power iteration did not converge in {max_iter} iterations", lam)


def _march(system: WaveSystem, dt: float, n_steps: int, rhs, R=None, stride: int | None = 1,
           lumped: bool = False):
    """Shared CDM loop; ``rhs(i)`` returns the force at step i or None."""
    solve = system.mass_solver(lumped)
    K = system.K
    n = system.n_dof
    u_prev = np.zeros(n)
    u = np.zeros(n)
    dt2 = dt * dt
    traces = None
    if R is not None:
        traces = np.zeros((R.shape[0], n_steps + 1))
    stored = []
    if stride:
        stored.append(u.copy())
    for i in range(n_steps):
        f = rhs(i)
        r = -(K @ u)
        if f is not None:
            r += f
        # overflow is reported through the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            u_next = 2.0 * u - u_prev + dt2 * solve(r)
            finite = np.isfinite(u_next.sum())
        if not finite:
            raise InstabilityError(i + 1)
        u_prev, u = u, u_next
        if traces is not None:
            traces[:, i + 1] = R @ u
        if stride and (i + 1) % stride == 0:
            stored.append(u.copy())
    coeffs = np.array(stored) if stride else u[None, :]
    return coeffs, traces


def cdm_run(system: WaveSystem, time: TimeGrid, signal, spatial: np.ndarray | None = None,
            receivers=None, stride: int | None = 1, lumped: bool = False):
    """Forward run from rest.

    ``signal`` is the temporal factor sampled at every step (array of length
    ``n_steps + 1``) or a callable of time; the force is ``signal * spatial``.
    With ``stride=None`` only the final state is kept.
    """
    spatial = system.F_spatial if spatial is None else spatial
    g = signal(time.times) if callable(signal) else np.asarray(signal, dtype=float)
    active = np.flatnonzero(g != 0.0)
    last = active[-1] if len(active) else -1

    def rhs(i):
        return g[i] * spatial if i <= last else None

    R = receivers if receivers is None or sp.issparse(receivers) else receiver_matrix(system.basis, receivers)
    coeffs, traces = _march(system, time.dt, time.n_steps, rhs, R, stride, lumped)
    hist = WaveHistory(coeffs=coeffs, stride=stride or time.n_steps, dt=time.dt)
    rec = None
    if R is not None:
        pos = receivers if not sp.issparse(receivers) else np.empty((R.shape[0], 2))
        rec = TraceSet(receivers=np.atleast_2d(pos), traces=traces, dt=time.dt)
    return hist, rec


def adjoint_run(system: WaveSystem, time: TimeGrid, sources: np.ndarray, R,
                lumped: bool = False) -> WaveHistory:
    """Adjoint field driven by time-reversed receiver sources.

    ``sources`` has shape ``(n_r, n_steps + 1)`` on the physical time grid.
    The run injects ``R^T sources[:, N - j]`` at step j and the returned
    history is reversed, so row i is the adjoint state paired with the
    forward state at t_i (reversed step ``N - i``).
    """
    N = time.n_steps
    S = np.asarray(sources, dtype=float)
    if S.shape != (R.shape[0], N + 1):
        raise ValueError(f"adjoint sources must have shape {(R.shape[0], N + 1)}, got {S.shape}")
    RT = R.T.tocsr()
    active = np.any(S != 0.0, axis=0)

    def rhs(j):
        k = N - j
        return RT @ S[:, k] if active[k] else None

    coeffs, _ = _march(system, time.dt, N, rhs, None, 1, lumped)
    return WaveHistory(coeffs=coeffs[::-1].copy(), stride=1, dt=time.dt)


def staggered_energy(system: WaveSystem, coeffs: np.ndarray, dt: float, lumped: bool = False) -> np.ndarray:
    """Energy conserved by the unforced CDM recursion, one value per step interval.

    ``E_{n+1/2} = 1/2 v^T M v + 1/2 u_n^T K u_{n+1}`` with ``v = (u_{n+1} - u_n)/dt``.
    """
    M = sp.diags(system.M_lumped) if lumped else system.M
    u0, u1 = coeffs[:-1], coeffs[1:]
    v = (u1 - u0) / dt
    kin = 0.5 * np.einsum("ij,ij->i", v, (M @ v.T).T)
    pot = 0.5 * np.einsum("ij,ij->i", u0, (system.K @ u1.T).T)
    return kin + pot
