"""Nonnegative spike-and-slab regression by Gibbs sampling.

Model, with ``r`` the active set ``{i : z_i = 1}`` and ``s_z = |r|``::

    b | theta, sigma2      ~ N(A_r theta_r, sigma2 I)
    theta_r | sigma2, nu   ~ N+(0, sigma2 nu I)
    sigma2 ~ IG(a_sigma, b_sigma),  nu ~ IG(a_nu, b_nu)
    z_i | p0 ~ Bernoulli(p0),       p0 ~ Beta(a_p, b_p)

One sweep updates ``z`` coordinate-wise from its collapsed conditional
(``theta`` and ``sigma2`` integrated out), then ``sigma2`` with ``theta``
integrated out, then ``theta`` given ``sigma2``, then ``nu`` and ``p0``.
This ordering keeps the partially collapsed scheme valid.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.special import expit, gammaln, log_ndtr, logit, ndtr, ndtri, ndtri_exp

from .errors import InvalidArgumentError, NumericalFailureError, UnsupportedSizeError

__all__ = [
    "SpikeSlabConfig",
    "SamplerState",
    "PosteriorEnsemble",
    "gibbs_run",
    "log_marginal_likelihood",
    "conditional_z",
    "conditional_sigma2",
    "sample_truncated_mvn",
    "truncated_normal_1d",
    "gelman_rubin",
    "write_posterior",
    "read_posterior",
    "write_draws",
    "read_draws",
    "MAX_WIDTH",
]

MAX_WIDTH = 64


@dataclass(frozen=True)
class SpikeSlabConfig:
    a_sigma: float = 1e-4
    b_sigma: float = 1e-4
    a_nu: float = 0.5
    b_nu: float = 0.5
    a_p: float = 1.0
    b_p: float = 1.0
    n_chains: int = 3
    chain_length: int = 500
    burn_in: int = 100
    seed: int = 0
    inner_sweeps: int = 10
    n_workers: int = 1

    def __post_init__(self):
        for name in ("a_sigma", "b_sigma", "a_nu", "b_nu", "a_p", "b_p"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.n_chains < 1:
            raise InvalidArgumentError("n_chains must be >= 1")
        if not self.chain_length > self.burn_in >= 0:
            raise InvalidArgumentError("need chain_length > burn_in >= 0")
        if self.inner_sweeps < 1:
            raise InvalidArgumentError("inner_sweeps must be >= 1")


@dataclass
class SamplerState:
    theta: np.ndarray
    z: np.ndarray
    sigma2: float
    nu: float
    p0: float

    def copy(self):
        return SamplerState(self.theta.copy(), self.z.copy(), self.sigma2, self.nu, self.p0)


@dataclass
class PosteriorEnsemble:
    """Retained draws, arrays indexed ``[chain, draw, ...]``."""

    theta: np.ndarray
    z: np.ndarray
    sigma2: np.ndarray
    nu: np.ndarray
    p0: np.ndarray
    n_f: int = 6
    config: SpikeSlabConfig = field(default_factory=SpikeSlabConfig)

    @property
    def n_retained(self):
        return self.theta.shape[0] * self.theta.shape[1]

    @property
    def draws(self):
        return self.theta.reshape(-1, self.theta.shape[-1])

    @property
    def theta_mean(self):
        return self.draws.mean(axis=0)

    @property
    def theta_std(self):
        return self.draws.std(axis=0)

    @property
    def inclusion_frequency(self):
        return self.z.reshape(-1, self.z.shape[-1]).mean(axis=0)

    @property
    def n_c(self):
        return self.theta.shape[-1] // self.n_f

    def segment(self, s):
        """``(mean, std, inclusion)`` of segment ``s`` (1-based)."""
        sl = slice((s - 1) * self.n_f, s * self.n_f)
        return self.theta_mean[sl], self.theta_std[sl], self.inclusion_frequency[sl]

    def segment_draws(self, s):
        return self.draws[:, (s - 1) * self.n_f:s * self.n_f]

    def rhat(self):
        return gelman_rubin(self.theta)


# ---------------------------------------------------------------------------
# building blocks

class _Problem:
    """Cached system quantities for repeated marginal-likelihood evaluations."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.A.ndim != 2 or self.b.shape != (self.A.shape[0],):
            raise InvalidArgumentError("A must be (N, w) and b of length N")
        self.N, self.w = self.A.shape
        if self.w > MAX_WIDTH:
            raise UnsupportedSizeError(f"{self.w} columns exceed the supported maximum of {MAX_WIDTH}")
        self.btb = float(self.b @ self.b)

    def posterior(self, z, nu):
        """Ridge posterior of the active block.

        Returns ``(mu, R, S, logdet_sigma)`` with ``R^T R = A_r^T A_r + I/nu``
        and ``S = b^T b - mu^T Sigma^{-1} mu`` (computed as a residual).
        """
        idx = np.flatnonzero(z)
        s = idx.size
        if s == 0:
            return np.zeros(0), np.zeros((0, 0)), self.btb, 0.0
        aug = np.vstack([self.A[:, idx], np.eye(s) / np.sqrt(nu)])
        rhs = np.concatenate([self.b, np.zeros(s)])
        q, R = qr(aug, mode="economic")
        d = np.diag(R)
        if not np.all(np.isfinite(d)) or np.any(d == 0):
            raise NumericalFailureError(f"ridge normal matrix is singular (nu={nu:.3e}, active={idx.tolist()})")
        mu = solve_triangular(R, q.T @ rhs)
        res = rhs - aug @ mu
        S = float(res @ res)
        logdet = -2.0 * float(np.sum(np.log(np.abs(d))))
        return mu, R, S, logdet


def log_marginal_likelihood(problem, z, nu, cfg):
    """``log p(b | z, nu)`` with ``theta`` and ``sigma2`` integrated out."""
    if not isinstance(problem, _Problem):
        problem = _Problem(*problem)
    _, _, S, logdet = problem.posterior(z, nu)
    s = int(np.count_nonzero(z))
    a, bs, N = cfg.a_sigma, cfg.b_sigma, problem.N
    return (
        gammaln(a + 0.5 * N) + a * np.log(bs) - 0.5 * N * np.log(2 * np.pi) - 0.5 * s * np.log(nu)
        - gammaln(a) + 0.5 * logdet - (a + 0.5 * N) * np.log(bs + 0.5 * S)
    )


def _xi(log_ratio, p0):
    if p0 <= 0.0:
        return 0.0
    if p0 >= 1.0:
        return 1.0
    return float(expit(logit(p0) + log_ratio))


def conditional_z(i, state, system, cfg):
    """Inclusion probability ``P(z_i = 1 | z_-i, nu, p0, b)``."""
    problem = system if isinstance(system, _Problem) else _Problem(system.A, system.b)
    z1 = state.z.astype(bool).copy()
    z0 = z1.copy()
    z1[i], z0[i] = True, False
    lr = log_marginal_likelihood(problem, z1, state.nu, cfg) - log_marginal_likelihood(problem, z0, state.nu, cfg)
    return _xi(lr, state.p0)


def _inv_gamma(rng, shape, rate):
    return rate / rng.gamma(shape)


def conditional_sigma2(state, system, cfg, rng=None):
    """One draw of ``sigma2 | z, nu, b`` from ``IG(a + N/2, b + S/2)``."""
    rng = np.random.default_rng(rng)
    problem = system if isinstance(system, _Problem) else _Problem(system.A, system.b)
    _, _, S, _ = problem.posterior(state.z.astype(bool), state.nu)
    return _draw_sigma2(rng, S, problem.N, cfg)


def _draw_sigma2(rng, S, N, cfg):
    if S < 0:
        warnings.warn(f"negative residual quadratic form {S:.3e} clamped to zero", RuntimeWarning, stacklevel=3)
        S = 0.0
    return _inv_gamma(rng, cfg.a_sigma + 0.5 * N, cfg.b_sigma + 0.5 * S)


def truncated_normal_1d(rng, mean, std, size=None):
    """Draws from ``N(mean, std^2)`` restricted to ``[0, inf)`` by tail-safe inversion."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    alpha = -mean / std
    u = rng.random(size if size is not None else np.broadcast(mean, std).shape)
    # P(Z >= x) = u * P(Z >= alpha), solved in log space
    x = -ndtri_exp(np.log(u) + log_ndtr(-alpha))
    return np.maximum(mean + std * np.maximum(x, alpha), 0.0)


def _std_normal_interval(rng, lo, hi):
    """One standard normal draw conditioned on ``[lo, hi]``."""
    if lo > 0:
        return _upper_tail(rng, lo, hi)
    if hi < 0:
        return -_upper_tail(rng, -hi, -lo)
    plo, phi = ndtr(lo), ndtr(hi)
    x = ndtri(plo + rng.random() * (phi - plo))
    return min(max(x, lo), hi)


def _upper_tail(rng, lo, hi):
    # 0 < lo <= hi; invert the upper-tail probability in log space
    qlo = log_ndtr(-lo)
    qhi = log_ndtr(-hi) if np.isfinite(hi) else -np.inf
    u = rng.random()
    logq = qlo + np.log(u + (1.0 - u) * np.exp(qhi - qlo))
    x = -ndtri_exp(logq)
    return min(max(x, lo), hi)


def sample_truncated_mvn(mu, cov=None, rng=None, x0=None, n_sweeps=10, precision=None, max_tries=16):
    """Draw from ``N(mu, cov)`` restricted to the nonnegative orthant.

    Plain rejection from the untruncated normal is tried first (exact).  If
    no proposal is feasible after ``max_tries`` attempts, ``n_sweeps``
    Gibbs sweeps are run from the feasible point ``x0`` over the whitened
    coordinates ``y = L^{-1} (x - mu)``, each conditional being a standard
    normal restricted to an interval.  These sweeps leave the truncated law
    invariant.
    """
    rng = np.random.default_rng(rng)
    mu = np.asarray(mu, dtype=float)
    d = mu.size
    if d > MAX_WIDTH:
        raise UnsupportedSizeError(f"dimension {d} exceeds {MAX_WIDTH}")
    if d == 0:
        return np.zeros(0)
    try:
        if precision is None:
            L = np.linalg.cholesky(np.asarray(cov, dtype=float))
        else:
            # cov = Q^{-1} = (Lq Lq^T)^{-1}, so L = Lq^{-T} is a valid (upper) factor
            Lq = np.linalg.cholesky(np.asarray(precision, dtype=float))
            L = solve_triangular(Lq, np.eye(d), lower=True).T
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("covariance is not positive definite") from exc
    for _ in range(max_tries):
        x = mu + L @ rng.standard_normal(d)
        if np.all(x >= 0):
            return x
    x = np.maximum(np.zeros(d) if x0 is None else np.asarray(x0, dtype=float), 0.0)
    y = np.linalg.lstsq(L, x - mu, rcond=None)[0]
    for _ in range(n_sweeps):
        for j in range(d):
            col = L[:, j]
            c = mu + L @ y - col * y[j]
            lo, hi = -np.inf, np.inf
            pos, neg = col > 0, col < 0
            if pos.any():
                lo = np.max(-c[pos] / col[pos])
            if neg.any():
                hi = np.min(-c[neg] / col[neg])
            if lo > hi:  # round-off at an active constraint
                lo = hi = 0.5 * (lo + hi)
            y[j] = _std_normal_interval(rng, lo, hi)
    return np.maximum(mu + L @ y, 0.0)


# ---------------------------------------------------------------------------
# chains

def _initial_state(problem, rng):
    A, b = problem.A, problem.b
    theta, *_ = np.linalg.lstsq(A, b, rcond=None)
    theta = np.clip(theta, 0.0, None) * rng.uniform(0.5, 2.0, problem.w)
    r = b - A @ theta
    sigma2 = max(float(np.var(r)), 1e-300)
    return SamplerState(theta=theta, z=np.ones(problem.w, dtype=bool), sigma2=sigma2, nu=1.0, p0=0.5)


def _update_theta(problem, st, cfg, rng):
    idx = np.flatnonzero(st.z)
    theta = np.zeros(problem.w)
    if idx.size:
        mu, R, _, _ = problem.posterior(st.z, st.nu)
        prec = (R.T @ R) / st.sigma2
        theta[idx] = sample_truncated_mvn(mu, rng=rng, x0=st.theta[idx], n_sweeps=cfg.inner_sweeps, precision=prec)
    st.theta = theta


def _update_nu(problem, st, cfg, rng):
    s = int(np.count_nonzero(st.z))
    st.nu = _inv_gamma(rng, cfg.a_nu + 0.5 * s, cfg.b_nu + float(st.theta @ st.theta) / (2.0 * st.sigma2))


def _update_p0(problem, st, cfg, rng):
    s = int(np.count_nonzero(st.z))
    st.p0 = rng.beta(cfg.a_p + s, cfg.b_p + problem.w - s)


def _update_sigma2(problem, st, cfg, rng):
    _, _, S, _ = problem.posterior(st.z, st.nu)
    st.sigma2 = _draw_sigma2(rng, S, problem.N, cfg)


def _update_z(problem, st, cfg, rng):
    z = st.z.copy()
    current = log_marginal_likelihood(problem, z, st.nu, cfg)
    for i in rng.permutation(problem.w):
        z[i] = not z[i]
        other = log_marginal_likelihood(problem, z, st.nu, cfg)
        z[i] = not z[i]
        l1, l0 = (current, other) if z[i] else (other, current)
        new = rng.random() < _xi(l1 - l0, st.p0)
        if new != z[i]:
            z[i] = new
            current = other
    st.z = z
    st.theta = np.where(z, st.theta, 0.0)


def _run_chain(A, b, cfg, seed_seq):
    rng = np.random.default_rng(seed_seq)
    problem = _Problem(A, b)
    st = _initial_state(problem, rng)
    # one pass over the continuous blocks before the first indicator update
    _update_theta(problem, st, cfg, rng)
    _update_sigma2(problem, st, cfg, rng)
    _update_nu(problem, st, cfg, rng)
    _update_p0(problem, st, cfg, rng)
    keep = cfg.chain_length - cfg.burn_in
    out = {
        "theta": np.zeros((keep, problem.w)),
        "z": np.zeros((keep, problem.w), dtype=bool),
        "sigma2": np.zeros(keep),
        "nu": np.zeros(keep),
        "p0": np.zeros(keep),
    }
    for it in range(cfg.chain_length):
        _update_z(problem, st, cfg, rng)
        _update_sigma2(problem, st, cfg, rng)
        _update_theta(problem, st, cfg, rng)
        _update_nu(problem, st, cfg, rng)
        _update_p0(problem, st, cfg, rng)
        k = it - cfg.burn_in
        if k >= 0:
            out["theta"][k] = st.theta
            out["z"][k] = st.z
            out["sigma2"][k] = st.sigma2
            out["nu"][k] = st.nu
            out["p0"][k] = st.p0
    return out


def gibbs_run(system, cfg=SpikeSlabConfig(), n_f=None):
    """Run ``cfg.n_chains`` independent chains and pool the retained draws.

    ``system`` is an :class:`~plateid.assembly.EquilibriumSystem` or an
    ``(A, b)`` pair.
    """
    if isinstance(system, tuple):
        A, b = system
        n_f = n_f or np.asarray(A).shape[1]
    else:
        A, b = system.A, system.b
        n_f = n_f or system.n_f
    _Problem(A, b)  # validate early
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
    if cfg.n_workers > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.n_workers, cfg.n_chains)) as ex:
            chains = list(ex.map(_run_chain, [A] * cfg.n_chains, [b] * cfg.n_chains, [cfg] * cfg.n_chains, seeds))
    else:
        chains = [_run_chain(A, b, cfg, s) for s in seeds]
    stack = {k: np.stack([c[k] for c in chains]) for k in chains[0]}
    return PosteriorEnsemble(n_f=n_f, config=cfg, **stack)


def gelman_rubin(chains):
    """Potential scale reduction factor per coordinate; ``chains`` is (m, n, ...)."""
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape[:2]
    if m < 2 or n < 2:
        raise InvalidArgumentError("need at least two chains of length two")
    means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var / W)
    return np.where(W > 0, r, 1.0)


def write_posterior(ensemble, path):
    """Per segment a header line then ``theta_k mean std inclusion`` rows."""
    lines = []
    for s in range(1, ensemble.n_c + 1):
        mean, std, inc = ensemble.segment(s)
        lines.append(f"segment {s}")
        lines += [f"theta{k + 1} {float(mean[k])!r} {float(std[k])!r} {float(inc[k])!r}" for k in range(ensemble.n_f)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_posterior(path):
    """Returns ``{segment: (mean, std, inclusion)}``."""
    from .errors import FormatError

    path = Path(path)
    if not path.is_file():
        raise FormatError(f"posterior file {path} not found; run 'identify' first")
    out, cur, rows = {}, None, []

    def flush():
        if cur is not None:
            arr = np.array(rows, dtype=float).reshape(-1, 3)
            out[cur] = (arr[:, 0], arr[:, 1], arr[:, 2])

    for ln in path.read_text(encoding="utf-8").splitlines():
        parts = ln.split()
        if not parts:
            continue
        try:
            if parts[0] == "segment":
                flush()
                cur, rows = int(parts[1]), []
            else:
                rows.append([float(v) for v in parts[1:4]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: {exc}") from exc
    flush()
    if not out:
        raise FormatError(f"{path}: no segments found")
    return out


def write_draws(ensemble, path):
    """All retained draws, one line per ``(chain, draw)``.

    Columns: chain, draw, sigma2, nu, p0, theta_1..theta_P, z_1..z_P.
    """
    m, n, P = ensemble.theta.shape
    lines = [f"# n_f {ensemble.n_f} chains {m} draws {n} coefficients {P}"]
    for c in range(m):
        for d in range(n):
            vals = [repr(float(ensemble.sigma2[c, d])), repr(float(ensemble.nu[c, d])), repr(float(ensemble.p0[c, d]))]
            vals += [repr(float(v)) for v in ensemble.theta[c, d]]
            vals += [str(int(v)) for v in ensemble.z[c, d]]
            lines.append(f"{c} {d} " + " ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_draws(path, config=None):
    """Inverse of :func:`write_draws`; returns a :class:`PosteriorEnsemble`."""
    from .errors import FormatError

    path = Path(path)
    if not path.is_file():
        raise FormatError(f"draws file {path} not found; run 'identify' first")
    text = path.read_text(encoding="utf-8").splitlines()
    try:
        head = text[0].split()
        n_f, m, n, P = int(head[2]), int(head[4]), int(head[6]), int(head[8])
        data = np.array([[float(v) for v in ln.split()] for ln in text[1:] if ln.strip()])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.shape != (m * n, 5 + 2 * P):
        raise FormatError(f"{path}: expected {m * n} rows of {5 + 2 * P} columns")
    data = data.reshape(m, n, -1)
    return PosteriorEnsemble(
        theta=data[:, :, 5:5 + P], z=data[:, :, 5 + P:].astype(bool), sigma2=data[:, :, 2],
        nu=data[:, :, 3], p0=data[:, :, 4], n_f=n_f, config=config or SpikeSlabConfig(),
    )
