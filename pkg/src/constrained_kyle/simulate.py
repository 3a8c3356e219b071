"""Monte Carlo engine for the equilibrium holdings/price SDE system.

Paths are integrated by explicit Euler-Maruyama with left-endpoint
coefficients on ``t_i = i T / n_steps``; the last interval starts at
``T - dt`` so ``beta`` is never evaluated at ``T``. The terminal block order
and the terminal price rule are then applied exactly.

Randomness is counter based: path ``i`` draws from
``Philox(key=seed, counter=[0, 0, 0, i])``, so results do not depend on
how paths are chunked or spread over workers.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import _kernels
from .closed_form import (
    _alpha_of_r,
    _beta_of_r,
    _lambda_of_r,
    _mu_of_r,
    _s_of_r,
    coefficients_at,
    r_of_t,
)

RNG_DESCRIPTION = "numpy.random.Philox(key=seed, counter=[0, 0, 0, path_index]); standard_normal ziggurat"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    n_steps: int = 2000
    seed: int = 42
    checkpoint_times: tuple = ()
    # (t, h) pairs for which (Y_{t-h}, Y_t, Y_{t+h}) are recorded
    increments: tuple = ()
    chunk_size: int = 2048
    workers: int = 1
    backend: str = None

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.chunk_size < 1 or self.workers < 1:
            raise ValueError("chunk_size and workers must be >= 1")
        object.__setattr__(self, "checkpoint_times", tuple(float(t) for t in self.checkpoint_times))
        object.__setattr__(self, "increments", tuple((float(t), float(h)) for t, h in self.increments))

    @property
    def record_increments(self):
        return bool(self.increments)

    def as_dict(self):
        return {
            "n_paths": self.n_paths,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "checkpoint_times": list(self.checkpoint_times),
            "increments": [list(p) for p in self.increments],
            "chunk_size": self.chunk_size,
            "workers": self.workers,
            "backend": _kernels.resolve_backend(self.backend),
            "rng": RNG_DESCRIPTION,
        }


@dataclass
class PathState:
    """State of one path. ``X = a - theta - Q`` is derived, never stored."""

    a_tilde: float
    v_tilde: float
    theta: float = 0.0
    Q: float = 0.0
    P: float = 0.0
    Y: float = 0.0
    t: float = 0.0

    @property
    def X(self):
        return self.a_tilde - self.theta - self.Q


@dataclass(frozen=True)
class PathTerminal:
    theta_Tminus: float
    Q_Tminus: float
    P_Tminus: float
    P_T: float
    block: float
    price_jump: float
    X_Tminus: float


def path_rng(seed, path_index):
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, path_index]))


def draw_primitives(rng, params, n_steps, dt, size=None):
    """Draw ``(a, v, dW)``.

    ``a ~ N(0, sigma_a^2)``; ``v = rho (sigma_v/sigma_a) a + sqrt(1-rho^2) sigma_v eps``
    with ``eps`` independent of ``a``; ``dW`` are ``n_steps`` independent
    ``N(0, dt)`` increments. With ``size`` the leading axis is the sample axis.
    """
    shape = (n_steps + 2,) if size is None else (size, n_steps + 2)
    z = rng.standard_normal(shape)
    a = params.sigma_a * z[..., 0]
    v = params.rho * (params.sigma_v / params.sigma_a) * a + math.sqrt(1 - params.rho**2) * params.sigma_v * z[..., 1]
    dw = math.sqrt(dt) * z[..., 2:]
    return a, v, dw


def step(state, sol, dW, dt):
    """One explicit Euler-Maruyama step with coefficients at ``state.t``."""
    t_next = state.t + dt
    if t_next > sol.params.T * (1 + 1e-12):
        raise SimulationError("step would cross T; the terminal block order handles t = T")
    c = coefficients_at(sol, state.t)
    r = r_of_t(sol, state.t)
    rate = c.beta * state.X + c.alpha * state.Q
    dY = rate * dt + sol.params.sigma_w * dW
    new = PathState(
        a_tilde=state.a_tilde,
        v_tilde=state.v_tilde,
        theta=state.theta + rate * dt,
        Q=state.Q + r * dY + c.s * state.Q * dt,
        P=state.P + c.lam * dY + c.mu * state.Q * dt,
        Y=state.Y + dY,
        t=t_next,
    )
    if not all(math.isfinite(x) for x in (new.theta, new.Q, new.P, new.Y)):
        raise SimulationError(f"non-finite state after step at t = {state.t}")
    return new


def coefficient_table(sol, n_steps):
    """Rows ``beta, alpha, r, s, lambda, mu`` at ``t_i = i T / n_steps``, ``i < n_steps``."""
    t = np.arange(n_steps) * (sol.params.T / n_steps)
    r = r_of_t(sol, t)
    if np.any(r <= 0):
        raise SimulationError("r vanished before T - dt; n_steps is too large for double precision")
    return np.vstack([
        _beta_of_r(sol, r),
        _alpha_of_r(sol, r),
        r,
        _s_of_r(sol, r),
        _lambda_of_r(sol, r),
        _mu_of_r(sol, r),
    ])


def _snap(t, dt, n_steps, what):
    idx = int(round(t / dt))
    if abs(idx * dt - t) > 0.5 * dt + 1e-12 * dt:
        raise ValueError(f"{what} {t} cannot be snapped")
    return idx


@dataclass(frozen=True)
class RecordLayout:
    record_idx: np.ndarray
    checkpoint_slots: tuple
    checkpoint_times: tuple
    increment_slots: dict


def record_layout(params, config):
    T, n = params.T, config.n_steps
    dt = T / n
    wanted = []
    cps = []
    for t in config.checkpoint_times:
        if not 0 <= t < T:
            raise ValueError(f"checkpoint {t} must lie in [0, T)")
        idx = _snap(t, dt, n, "checkpoint")
        if idx > n - 1:
            raise ValueError(f"checkpoint {t} snaps onto T")
        cps.append(idx)
        wanted.append(idx)
    incs = {}
    for t, h in config.increments:
        mid = _snap(t, dt, n, "increment time")
        lag = max(1, int(round(h / dt)))
        lo, hi = mid - lag, mid + lag
        if lo <= 0 or hi >= n:
            raise ValueError(f"increment window ({t}, {h}) must satisfy 0 < t - h and t + h < T")
        key = (mid * dt, lag * dt)
        incs[key] = (lo, mid, hi)
        wanted.extend((lo, mid, hi))
    record_idx = np.array(sorted(set(wanted)), dtype=np.int64)
    pos = {int(i): k for k, i in enumerate(record_idx)}
    return RecordLayout(
        record_idx=record_idx,
        checkpoint_slots=tuple(pos[i] for i in cps),
        checkpoint_times=tuple(i * dt for i in cps),
        increment_slots={key: tuple(pos[i] for i in v) for key, v in incs.items()},
    )


@dataclass(frozen=True)
class PathBatch:
    """Simulated ensemble. Arrays are indexed by path along axis 0."""

    params: object
    config: SimConfig
    layout: RecordLayout
    a: np.ndarray
    v: np.ndarray
    records: np.ndarray  # (n_paths, n_records, 4): theta, Q, P, Y
    terminal: np.ndarray  # (n_paths, 4) at T-
    value_cont: np.ndarray  # sum over [0, T) of (a - theta) dP
    lambda_T: float
    meta: dict = field(default_factory=dict)

    @property
    def checkpoint_times(self):
        return self.layout.checkpoint_times

    def at_checkpoint(self, k):
        """``(theta, Q, P, Y)`` arrays at the k-th checkpoint."""
        rec = self.records[:, self.layout.checkpoint_slots[k], :]
        return rec[:, 0], rec[:, 1], rec[:, 2], rec[:, 3]

    @property
    def theta_Tminus(self):
        return self.terminal[:, 0]

    @property
    def Q_Tminus(self):
        return self.terminal[:, 1]

    @property
    def P_Tminus(self):
        return self.terminal[:, 2]

    @property
    def X_Tminus(self):
        return self.a - self.terminal[:, 0] - self.terminal[:, 1]

    @property
    def block(self):
        return self.a - self.terminal[:, 0]

    @property
    def price_jump(self):
        return self.lambda_T * self.X_Tminus

    @property
    def P_T(self):
        return self.P_Tminus + self.price_jump

    @property
    def insider_value(self):
        """Per-path ``int_[0,T] (a - theta_{t-}) dP_t`` including the terminal jump."""
        return self.value_cont + self.block * self.price_jump


def _simulate_chunk(params, config, coef, record_idx, start, stop, brownian):
    m = stop - start
    n = config.n_steps
    dt = params.T / n
    a = np.empty(m)
    v = np.empty(m)
    dw = np.empty((m, n))
    for j in range(m):
        a[j], v[j], dw[j] = draw_primitives(path_rng(config.seed, start + j), params, n, dt)
    if brownian is not None:
        dw = np.ascontiguousarray(brownian[start:stop], dtype=np.float64)
    records, terminal, value = _kernels.em_paths(coef, a, dw, dt, params.sigma_w, record_idx, config.backend)
    return a, v, records, terminal, value


def run_batch(sol, config, coefficients=None, brownian=None):
    """Simulate ``config.n_paths`` independent paths.

    ``coefficients`` overrides the ``(6, n_steps)`` table from
    :func:`coefficient_table` (used for perturbation controls) and
    ``brownian`` injects the ``(n_paths, n_steps)`` Brownian increments.
    """
    params = sol.params
    layout = record_layout(params, config)
    coef = coefficient_table(sol, config.n_steps) if coefficients is None else np.asarray(coefficients, dtype=np.float64)
    if coef.shape != (6, config.n_steps):
        raise ValueError(f"coefficient table must have shape (6, {config.n_steps})")
    if brownian is not None and np.shape(brownian) != (config.n_paths, config.n_steps):
        raise ValueError("injected Brownian increments must have shape (n_paths, n_steps)")

    n_paths = config.n_paths
    try:
        a = np.empty(n_paths)
        v = np.empty(n_paths)
        records = np.empty((n_paths, layout.record_idx.size, 4))
        terminal = np.empty((n_paths, 4))
        value = np.empty(n_paths)
    except MemoryError as exc:
        raise SimulationError(f"cannot allocate a batch of {n_paths} paths") from exc

    bounds = [(s, min(s + config.chunk_size, n_paths)) for s in range(0, n_paths, config.chunk_size)]

    def work(bound):
        start, stop = bound
        out = _simulate_chunk(params, config, coef, layout.record_idx, start, stop, brownian)
        a[start:stop], v[start:stop], records[start:stop], terminal[start:stop], value[start:stop] = out

    if config.workers == 1:
        for b in bounds:
            work(b)
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            list(pool.map(work, bounds))

    if not (np.all(np.isfinite(records)) and np.all(np.isfinite(terminal))):
        raise SimulationError("non-finite path state; check the coefficient table")
    lam_T = float(coefficients_at(sol, params.T, include_beta=False).lam)
    return PathBatch(
        params=params,
        config=config,
        layout=layout,
        a=a,
        v=v,
        records=records,
        terminal=terminal,
        value_cont=value,
        lambda_T=lam_T,
        meta={"rng": RNG_DESCRIPTION, "backend": _kernels.resolve_backend(config.backend)},
    )


def run_path(sol, config, path_index):
    """Simulate path ``path_index`` alone; identical to its row in :func:`run_batch`."""
    single = replace(config, n_paths=1, chunk_size=1, workers=1)
    layout = record_layout(sol.params, single)
    coef = coefficient_table(sol, single.n_steps)
    a, v, records, terminal, value = _simulate_chunk(
        sol.params, single, coef, layout.record_idx, path_index, path_index + 1, None
    )
    dt = sol.params.T / config.n_steps
    lam_T = float(coefficients_at(sol, sol.params.T, include_beta=False).lam)
    states = [
        PathState(a_tilde=float(a[0]), v_tilde=float(v[0]), theta=float(rec[0]), Q=float(rec[1]),
                  P=float(rec[2]), Y=float(rec[3]), t=float(idx * dt))
        for idx, rec in zip(layout.record_idx, records[0])
    ]
    theta_m, q_m, p_m = (float(x) for x in terminal[0, :3])
    x_m = float(a[0]) - theta_m - q_m
    jump = lam_T * x_m
    term = PathTerminal(
        theta_Tminus=theta_m,
        Q_Tminus=q_m,
        P_Tminus=p_m,
        P_T=p_m + jump,
        block=float(a[0]) - theta_m,
        price_jump=jump,
        X_Tminus=x_m,
    )
    return states, term
