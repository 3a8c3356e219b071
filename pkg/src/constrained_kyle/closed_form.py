"""Closed-form special functions and equilibrium coefficients.

Everything here is a pure function of ``(params, r0, t)``. Time-dependent
coefficients are expressed through ``r(t)``, which is obtained by inverting
the strictly increasing function ``F``. Functions accept a scalar or an
array of times and return the same shape.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import integrate

F_LO = math.pi - 3.0
F_HI = 2.0 * math.pi
F_SPAN = F_HI - F_LO

# t values this far outside [0, T] (relative to T) are snapped, not rejected.
_T_SLACK = 1e-12

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_SMALL_X = 0.25


class DomainError(ValueError):
    """An argument lies outside the domain of a function."""


@dataclass(frozen=True)
class ModelParams:
    """Exogenous inputs: noise volatility, target and dividend spreads, correlation, horizon."""

    sigma_w: float = 1.0
    sigma_a: float = 1.0
    sigma_v: float = 1.0
    rho: float = 0.3
    T: float = 1.0

    def __post_init__(self):
        for name in ("sigma_w", "sigma_a", "sigma_v", "T"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be finite and > 0, got {value!r}")
        if not (math.isfinite(self.rho) and 0.0 < self.rho <= 1.0):
            raise DomainError(f"rho must lie in (0, 1], got {self.rho!r}")

    def replace(self, **changes):
        values = {**self.as_dict(), **changes}
        return ModelParams(**values)

    def as_dict(self):
        return {
            "sigma_w": self.sigma_w,
            "sigma_a": self.sigma_a,
            "sigma_v": self.sigma_v,
            "rho": self.rho,
            "T": self.T,
        }


@dataclass(frozen=True)
class EquilibriumSolution:
    """Calibrated equilibrium: ``r0`` plus the derived constant ``I``.

    Immutable; every coefficient is evaluated on demand by the module-level
    functions (``r_of_t``, ``coefficients_at``, ...).
    """

    params: ModelParams
    r0: float
    I: float = field(init=False)
    # sigma_w^2 G(r0) / sigma_a^2: the speed at which F(r(t)) decreases.
    rate: float = field(init=False, repr=False)
    fm_r0: float = field(init=False, repr=False)

    def __post_init__(self):
        if not (math.isfinite(self.r0) and self.r0 > 0):
            raise DomainError(f"r0 must be finite and > 0, got {self.r0!r}")
        p, r0 = self.params, self.r0
        object.__setattr__(self, "I", equilibrium_constant(p, r0))
        object.__setattr__(self, "rate", p.sigma_w**2 * float(G(r0)) / p.sigma_a**2)
        object.__setattr__(self, "fm_r0", float(_fm(r0)))

    @property
    def T(self):
        return self.params.T


def equilibrium_constant(params, r0):
    """``I = (rho sigma_v / sigma_a) r0 (1 + 2 r0) / (2 (1 + r0)^2)``."""
    return params.rho * params.sigma_v / params.sigma_a * r0 * (1 + 2 * r0) / (2 * (1 + r0) ** 2)


# ---------------------------------------------------------------------------
# F, F^-1, G, tau
# ---------------------------------------------------------------------------


def _as_array(x):
    arr = np.asarray(x, dtype=np.float64)
    return arr, arr.ndim == 0


def _out(arr, scalar):
    return float(arr) if scalar else arr


def F(x):
    """``4 atan(sqrt(1+2x)) - sqrt(1+2x)(3+4x)/(1+x)^2`` on ``[0, inf)``."""
    x, scalar = _as_array(x)
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise DomainError("F is defined for finite x >= 0")
    s = np.sqrt(1 + 2 * x)
    return _out(4 * np.arctan(s) - s * (3 + 4 * x) / (1 + x) ** 2, scalar)


def F_prime(x):
    x = np.asarray(x, dtype=np.float64)
    return (1 + 3 * x) * np.sqrt(1 + 2 * x) / (1 + x) ** 3


def _fm(x):
    # F(x) - F(0) without cancellation for small x: Gauss-Legendre on F'.
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    x = x.reshape(-1)
    small = x < _SMALL_X
    out = np.empty_like(x)
    xs = x[small]
    if xs.size:
        half = 0.5 * xs[..., None]
        nodes = half * (1 + _GL_NODES)
        out[small] = (half[..., 0]) * (F_prime(nodes) @ _GL_WEIGHTS)
    xl = x[~small]
    if xl.size:
        s = np.sqrt(1 + 2 * xl)
        out[~small] = (4 * np.arctan(s) - s * (3 + 4 * xl) / (1 + xl) ** 2) - F_LO
    return out.reshape(shape)


def _fm_inv(z, rtol=1e-15, max_iter=200):
    """Solve ``F(x) - F(0) = z`` elementwise by Newton safeguarded with bisection."""
    z = np.asarray(z, dtype=np.float64)
    shape = z.shape
    z = z.reshape(-1)
    lo = np.zeros_like(z)
    hi = np.ones_like(z)
    grow = _fm(hi) < z
    n_grow = 0
    while np.any(grow):
        hi[grow] *= 2.0
        grow = _fm(hi) < z
        n_grow += 1
        if n_grow > 1100:
            raise DomainError("F inverse: bracket growth overflowed")
    x = np.clip(z, 0.0, hi)
    active = z > 0
    x[~active] = 0.0
    for _ in range(max_iter):
        if not np.any(active):
            break
        xa = x[active]
        resid = _fm(xa) - z[active]
        lo_a, hi_a = lo[active], hi[active]
        below = resid < 0
        lo_a = np.where(below, xa, lo_a)
        hi_a = np.where(below, hi_a, xa)
        step = resid / F_prime(xa)
        x_new = xa - step
        outside = (x_new <= lo_a) | (x_new >= hi_a) | ~np.isfinite(x_new)
        x_new = np.where(outside, 0.5 * (lo_a + hi_a), x_new)
        exact = resid == 0
        x_new = np.where(exact, xa, x_new)
        done = (np.abs(x_new - xa) <= rtol * np.maximum(xa, 1e-300)) | exact | (hi_a - lo_a <= rtol * hi_a)
        x[active] = x_new
        lo[active], hi[active] = lo_a, hi_a
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return x.reshape(shape)


def F_inv(y):
    """Inverse of ``F``: maps ``[pi - 3, 2 pi)`` onto ``[0, inf)``."""
    y, scalar = _as_array(y)
    if not np.all(np.isfinite(y)) or np.any(y < F_LO) or np.any(y >= F_HI):
        raise DomainError("F_inv is defined on [pi - 3, 2 pi)")
    return _out(_fm_inv(y - F_LO), scalar)


def G(x):
    """``x^2 (1+2x)^{3/2} / (1+x)^2``; equals 0 at ``x = 0``."""
    x, scalar = _as_array(x)
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise DomainError("G is defined for finite x >= 0")
    return _out(x * x * (1 + 2 * x) ** 1.5 / (1 + x) ** 2, scalar)


def G_prime(x):
    x = np.asarray(x, dtype=np.float64)
    return G(x) * (2 / x + 3 / (1 + 2 * x) - 2 / (1 + x))


def tau(x, params):
    """Time for ``r`` to run from ``x`` down to zero: ``sigma_a^2 (F(x)-F(0)) / (sigma_w^2 G(x))``."""
    x, scalar = _as_array(x)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("tau is defined for finite x > 0")
    ratio = (params.sigma_a / params.sigma_w) ** 2
    return _out(ratio * _fm(x) / G(x), scalar)


def tau_prime(x, params):
    x = np.asarray(x, dtype=np.float64)
    ratio = (params.sigma_a / params.sigma_w) ** 2
    g = G(x)
    return ratio * (F_prime(x) * g - _fm(x) * G_prime(x)) / g**2


# ---------------------------------------------------------------------------
# time grid helpers
# ---------------------------------------------------------------------------


def _times(sol, t, closed_right=True, open_left=False):
    t, scalar = _as_array(t)
    T = sol.params.T
    slack = _T_SLACK * T
    if not np.all(np.isfinite(t)):
        raise DomainError("time must be finite")
    if np.any(t < -slack) or np.any(t > T + slack):
        raise DomainError(f"time must lie in [0, T] = [0, {T}]")
    t = np.clip(t, 0.0, T)
    if not closed_right and np.any(t >= T):
        raise DomainError("time must be strictly below T here")
    if open_left and np.any(t <= 0):
        raise DomainError("time must be strictly above 0 here")
    return t, scalar


def _r(sol, t):
    z = sol.fm_r0 - sol.rate * t
    r = _fm_inv(np.maximum(z, 0.0))
    r = np.where(t == 0, sol.r0, r)
    return np.maximum(r, 0.0)


def r_of_t(sol, t):
    """``r(t) = F^-1(F(r0) - (sigma_w^2/sigma_a^2) G(r0) t)``, clamped at 0."""
    t, scalar = _times(sol, t)
    return _out(_r(sol, t), scalar)


def r_prime(sol, t):
    """Analytic ``r'(t)``; finite on all of ``[0, T]``."""
    t, scalar = _times(sol, t)
    return _out(_r_prime_of_r(sol, _r(sol, t)), scalar)


def _r_prime_of_r(sol, r):
    return -sol.rate * (1 + r) ** 3 / ((1 + 3 * r) * np.sqrt(1 + 2 * r))


def sigma1_of_t(sol, t):
    t, scalar = _times(sol, t)
    r = _r(sol, t)
    return _out(sol.params.sigma_a**2 * G(r) / G(sol.r0), scalar)


def _sigma2_of_r(sol, r):
    p, r0 = sol.params, sol.r0
    return p.rho * p.sigma_a * p.sigma_v * r * np.sqrt(1 + 2 * r) / (r0 * math.sqrt(1 + 2 * r0))


def sigma2_of_t(sol, t):
    t, scalar = _times(sol, t)
    return _out(_sigma2_of_r(sol, _r(sol, t)), scalar)


# ---------------------------------------------------------------------------
# equilibrium coefficients as functions of r
# ---------------------------------------------------------------------------


def _lambda_of_r(sol, r):
    return 2 * sol.I * (1 + r) ** 2 / (1 + 2 * r)


def _mu_of_r(sol, r):
    p, r0 = sol.params, sol.r0
    const = p.rho * p.sigma_w**2 * p.sigma_v * r0**3 * (1 + 2 * r0) ** 2.5 / (p.sigma_a**3 * (1 + r0) ** 4)
    return -const * (1 + r) ** 4 / ((1 + 3 * r) * (1 + 2 * r) ** 2.5)


def _beta_const(sol):
    p, r0 = sol.params, sol.r0
    return p.sigma_w**2 * r0**2 * (1 + 2 * r0) ** 1.5 / (p.sigma_a**2 * (1 + r0) ** 2)


def _beta_of_r(sol, r):
    return _beta_const(sol) * (1 + r) ** 2 / (r * (1 + 2 * r) ** 1.5)


def _s_of_r(sol, r):
    return -_beta_const(sol) * (1 + r) ** 3 / ((1 + 3 * r) * (1 + 2 * r) ** 1.5)


def _alpha_of_r(sol, r):
    return _beta_const(sol) * (1 + r) ** 2 / ((1 + 3 * r) * (1 + 2 * r) ** 1.5)


def _J_of_r(sol, r):
    return _lambda_of_r(sol, r) / (1 + r)


@dataclass(frozen=True)
class Coefficients:
    lam: object
    mu: object
    beta: object
    s: object
    alpha: object
    J: object


def coefficients_at(sol, t, include_beta=True):
    """Price impact, drift, insider intensities and ``J`` at time(s) ``t``.

    ``beta`` is undefined at ``t = T``; asking for it there raises
    :class:`DomainError`. Pass ``include_beta=False`` to get the other five
    (``beta`` is then ``nan``).
    """
    t, scalar = _times(sol, t, closed_right=True)
    if include_beta and np.any(t >= sol.params.T):
        raise DomainError("beta is undefined at t = T (use the terminal block order)")
    r = _r(sol, t)
    if include_beta:
        beta = _beta_of_r(sol, r)
    else:
        beta = np.full_like(r, np.nan)
    vals = [_lambda_of_r(sol, r), _mu_of_r(sol, r), beta, _s_of_r(sol, r), _alpha_of_r(sol, r), _J_of_r(sol, r)]
    return Coefficients(*(_out(v, scalar) for v in vals))


def lambda_of_t(sol, t):
    t, scalar = _times(sol, t)
    return _out(_lambda_of_r(sol, _r(sol, t)), scalar)


def alpha_of_t(sol, t):
    t, scalar = _times(sol, t)
    return _out(_alpha_of_r(sol, _r(sol, t)), scalar)


def beta_of_t(sol, t):
    t, scalar = _times(sol, t, closed_right=False)
    return _out(_beta_of_r(sol, _r(sol, t)), scalar)


def J_of_t(sol, t):
    t, scalar = _times(sol, t)
    return _out(_J_of_r(sol, _r(sol, t)), scalar)


def J_prime(sol, t):
    t, scalar = _times(sol, t)
    r = _r(sol, t)
    return _out(-2 * sol.I / (1 + 2 * r) ** 2 * _r_prime_of_r(sol, r), scalar)


def lambda_prime(sol, t):
    """Slope of the price impact; strictly negative on ``(0, T)``."""
    t, scalar = _times(sol, t, closed_right=False, open_left=True)
    p, r0 = sol.params, sol.r0
    r = _r(sol, t)
    const = 2 * p.rho * p.sigma_w**2 * p.sigma_v * r0**3 * (1 + 2 * r0) ** 2.5 / (p.sigma_a**3 * (1 + r0) ** 4)
    return _out(-const * r * (1 + r) ** 4 / ((1 + 3 * r) * (1 + 2 * r) ** 2.5), scalar)


# ---------------------------------------------------------------------------
# K by quadrature
# ---------------------------------------------------------------------------


def _k_integrand_r(rho_, sol):
    # (I - J) r^2 dt with dt = dr / r'(r); r' < 0 flips [t, T] onto [0, r(t)].
    return (sol.I - _J_of_r(sol, rho_)) * rho_**2 / (-_r_prime_of_r(sol, rho_))


def K_of_t(sol, t, epsabs=1e-10):
    """``sigma_w^2 int_t^T (I - J(u)) r(u)^2 du`` by adaptive quadrature.

    The integral is taken in the variable ``r`` (``du = dr / r'``), which
    is smooth and avoids inverting ``F`` inside the integrand.
    """
    t, scalar = _times(sol, t)
    r_t = np.atleast_1d(_r(sol, t))
    out = np.empty_like(r_t)
    sw2 = sol.params.sigma_w**2
    t_flat = np.atleast_1d(t)
    for i, upper in enumerate(r_t):
        # empty integral at t = T, whatever the rounding of r(T)
        if upper <= 0 or t_flat[i] >= sol.params.T:
            out[i] = 0.0
            continue
        val, _ = integrate.quad(_k_integrand_r, 0.0, float(upper), args=(sol,),
                                epsabs=epsabs / sw2, epsrel=1e-12, limit=200)
        out[i] = sw2 * val
    return _out(out.reshape(np.shape(t)), scalar)


# ---------------------------------------------------------------------------
# conditional-mean curves f, g and the expected order rate
# ---------------------------------------------------------------------------


def _fg_consts(r0):
    a = 1 / (r0 * math.sqrt(1 + 2 * r0))
    b = (1 + r0 - r0 * r0) / (r0 * (1 + 2 * r0))
    return a, b


def _f_of_r(sol, r):
    a, b = _fg_consts(sol.r0)
    return 1 - a * (1 + 2 * r) ** 1.5 / (1 + r) + b * (1 + 2 * r) / (1 + r)


def _g_of_r(sol, r):
    a, b = _fg_consts(sol.r0)
    return (1 + 2 * r) / (1 + r) * (a * (1 + r - r * r) / np.sqrt(1 + 2 * r) - b)


def _f_r(sol, r):
    a, b = _fg_consts(sol.r0)
    return (-a * np.sqrt(1 + 2 * r) * (2 + r) + b) / (1 + r) ** 2


def _f_rr(sol, r):
    a, b = _fg_consts(sol.r0)
    return (a * (1 + 4 * r + r * r) / np.sqrt(1 + 2 * r) - 2 * b) / (1 + r) ** 3


def f_of_t(sol, t):
    """Normalised expected insider holdings ``E[theta_t | a] / a``."""
    t, scalar = _times(sol, t)
    return _out(_f_of_r(sol, _r(sol, t)), scalar)


def g_of_t(sol, t):
    """Normalised expected market-maker estimate ``E[Q_t | a] / a``."""
    t, scalar = _times(sol, t)
    return _out(_g_of_r(sol, _r(sol, t)), scalar)


def fprime_of_t(sol, t):
    """Expected order rate ``E[theta'_t | a] / a``, via the chain rule in ``r``.

    Finite on all of ``[0, T]``; the value at ``T`` is the left limit.
    """
    t, scalar = _times(sol, t)
    r = _r(sol, t)
    return _out(_f_r(sol, r) * _r_prime_of_r(sol, r), scalar)


def fsecond_of_t(sol, t):
    t, scalar = _times(sol, t)
    r = _r(sol, t)
    rp = _r_prime_of_r(sol, r)
    dlog = 3 / (1 + r) - 3 / (1 + 3 * r) - 1 / (1 + 2 * r)
    rpp = rp * dlog * rp
    return _out(_f_rr(sol, r) * rp**2 + _f_r(sol, r) * rpp, scalar)


def block_fraction(sol):
    """Expected terminal block order as a fraction of the target, ``1 - f(T-)``."""
    r0 = sol.r0
    return (math.sqrt(1 + 2 * r0) - 1 + r0 * (r0 - 1)) / (r0 * (1 + 2 * r0))


# ---------------------------------------------------------------------------
# price variance
# ---------------------------------------------------------------------------


def sigma4_of_t(sol, t):
    """``E[(v - P_t)^2]``."""
    t, scalar = _times(sol, t)
    r = _r(sol, t)
    p = sol.params
    return _out(_remaining_of_r(sol, r) + (1 - p.rho**2) * p.sigma_v**2, scalar)


def _remaining_of_r(sol, r):
    p, r0 = sol.params, sol.r0
    return p.rho**2 * p.sigma_v**2 * math.sqrt(1 + 2 * r0) / (1 + r0) ** 2 * (1 + r) ** 2 / np.sqrt(1 + 2 * r)


def remaining_variance(sol, t):
    """``E[(E[v | a] - P_t)^2] = Sigma4(t) - (1 - rho^2) sigma_v^2``."""
    t, scalar = _times(sol, t)
    return _out(_remaining_of_r(sol, _r(sol, t)), scalar)


def terminal_remaining_variance(sol):
    p, r0 = sol.params, sol.r0
    return p.rho**2 * p.sigma_v**2 * math.sqrt(1 + 2 * r0) / (1 + r0) ** 2


# ---------------------------------------------------------------------------
# autocorrelation of aggregate holdings
# ---------------------------------------------------------------------------


def scaled_autocorrelation(sol, t, sigma3):
    """Small-lag limit of the normalised covariance of consecutive ``Y`` increments, over ``h``.

    ``alpha (alpha Sigma3 / sigma_w^2 + r)``. ``sigma3`` is ``E[Q_t^2]``,
    which has no closed form; take it from :mod:`constrained_kyle.oracle`.
    """
    t, scalar = _times(sol, t, closed_right=False, open_left=True)
    sigma3 = np.asarray(sigma3, dtype=np.float64)
    if np.any(sigma3 < 0):
        raise DomainError("sigma3 is a variance and must be >= 0")
    return _out(_autocorr_of_r(sol, _r(sol, t), sigma3), scalar)


def _autocorr_of_r(sol, r, sigma3):
    alpha = _alpha_of_r(sol, r)
    return alpha * (alpha * sigma3 / sol.params.sigma_w**2 + r)


def scaled_autocorrelation_curve(sol, t, sigma3):
    """Same formula extended continuously to the closed interval ``[0, T]`` (for plotting)."""
    t, scalar = _times(sol, t)
    return _out(_autocorr_of_r(sol, _r(sol, t), np.asarray(sigma3, dtype=np.float64)), scalar)


def beta_squared_sigma1(sol, t):
    """``beta^2 Sigma1``, bounded on ``[0, T)`` (its closed form is evaluated directly)."""
    t, scalar = _times(sol, t)
    p, r0 = sol.params, sol.r0
    r = _r(sol, t)
    const = p.sigma_w**4 * r0**2 * (1 + 2 * r0) ** 1.5 / (p.sigma_a**2 * (1 + r0) ** 2)
    return _out(const * (1 + r) ** 2 / (1 + 2 * r) ** 1.5, scalar)


# ---------------------------------------------------------------------------
# residual checks
# ---------------------------------------------------------------------------

HJB_EQUATIONS = ("lambda_X", "lambda_Q", "mu", "s", "K")
FILTER_IDENTITIES = ("lambda_sigma_w2", "r_sigma_w2", "mu", "s")


def hjb_residuals(sol, t, j_scale=1.0):
    """Residuals of the five coefficient-matching equations of the value function.

    ``j_scale`` multiplies ``J`` (and ``J'``) before substitution; it exists
    so that tests can confirm the check detects a wrong ``J``. ``K'`` is the
    analytic derivative of the quadrature integral, built from the true ``J``.
    """
    t, _ = _times(sol, t)
    r = np.atleast_1d(_r(sol, t))
    I, sw2 = sol.I, sol.params.sigma_w**2
    lam, mu, s = _lambda_of_r(sol, r), _mu_of_r(sol, r), _s_of_r(sol, r)
    J_true = _J_of_r(sol, r)
    J = j_scale * J_true
    dJ = j_scale * (-2 * I / (1 + 2 * r) ** 2 * _r_prime_of_r(sol, r))
    dK = -sw2 * (I - J_true) * r * r
    return {
        "lambda_X": lam - 2 * I * (r + 1) + J * r,
        "lambda_Q": lam - (r + 1) * J,
        "mu": mu - s * J,
        "s": s * (J - 2 * I) + dJ + mu,
        "K": dK + sw2 * (I - J) * r * r,
    }


def filter_identity_residuals(sol, t):
    """Relative residuals of the filtering relations on ``[0, T)``.

    ``lambda sigma_w^2 = beta Sigma2``, ``r sigma_w^2 = beta Sigma1``,
    ``mu = -alpha lambda`` and ``s = -alpha (1 + r)``.
    """
    t, _ = _times(sol, t, closed_right=False)
    r = np.atleast_1d(_r(sol, t))
    sw2 = sol.params.sigma_w**2
    beta, alpha = _beta_of_r(sol, r), _alpha_of_r(sol, r)
    lam = _lambda_of_r(sol, r)
    s1 = sol.params.sigma_a**2 * G(r) / G(sol.r0)
    s2 = _sigma2_of_r(sol, r)

    def rel(a, b):
        return np.abs(a - b) / np.maximum(np.abs(a), np.abs(b))

    return {
        "lambda_sigma_w2": rel(lam * sw2, beta * s2),
        "r_sigma_w2": rel(r * sw2, beta * s1),
        "mu": rel(_mu_of_r(sol, r), -alpha * lam),
        "s": rel(_s_of_r(sol, r), -alpha * (1 + r)),
    }
