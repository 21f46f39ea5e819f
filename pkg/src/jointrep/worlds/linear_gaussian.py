"""Linear-Gaussian systems with an exact Kalman filter.

x_1 ~ N(m0, P0);  x_{t+1} = A x_t + B a_t + w_t;  o^k_t = H_k x_t + v^k_t
with diagonal noise covariances Q and R_k.  ``actions[t]`` is applied after
the observation at step t, matching the RSSM rollout convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError, UsageError


@dataclass
class LinearGaussianSpec:
    A: np.ndarray
    B: np.ndarray
    H: dict[str, np.ndarray]
    q: np.ndarray  # diagonal of the process noise covariance
    r: dict[str, np.ndarray]  # diagonals of the observation noise covariances
    m0: np.ndarray = None
    P0: np.ndarray = None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, float))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, float).reshape(n, -1)
        self.q = np.asarray(self.q, float).reshape(n)
        if not self.ids:
            self.ids = list(self.H)
        self.H = {k: np.atleast_2d(np.asarray(v, float)) for k, v in self.H.items()}
        self.r = {k: np.asarray(v, float).reshape(-1) for k, v in self.r.items()}
        self.m0 = np.zeros(n) if self.m0 is None else np.asarray(self.m0, float).reshape(n)
        self.P0 = np.diag(np.ones(n)) if self.P0 is None else np.asarray(self.P0, float).reshape(n, n)
        if self.A.shape != (n, n):
            raise ConfigError(f"A must be square, got {self.A.shape}")
        if max(abs(np.linalg.eigvals(self.A))) > 1 + 1e-12:
            raise ConfigError("spectral radius of A exceeds 1")
        if np.any(self.q < 0):
            raise ConfigError("process noise variances must be nonnegative")
        for k in self.ids:
            if self.H[k].shape[1] != n or self.r[k].shape != (self.H[k].shape[0],):
                raise ConfigError(f"observation model {k!r} inconsistent with state size {n}")
            if np.any(self.r[k] < 0):
                raise ConfigError(f"observation noise of {k!r} must be nonnegative")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def stacked(self):
        """Joint observation matrix and noise diagonal over all modalities."""
        return np.vstack([self.H[k] for k in self.ids]), np.concatenate([self.r[k] for k in self.ids])


def random_spec(rng: np.random.Generator, n: int = 3, m: int = 2, obs_dims=(2, 2), radius: float = 0.95) -> LinearGaussianSpec:
    """Random stable system; observation splits are named ``o0, o1, ...``."""
    A = rng.normal(size=(n, n))
    A *= radius / max(abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(n, m))
    H = {f"o{i}": rng.normal(size=(p, n)) for i, p in enumerate(obs_dims)}
    r = {k: rng.uniform(0.1, 1.0, v.shape[0]) for k, v in H.items()}
    return LinearGaussianSpec(A, B, H, rng.uniform(0.05, 0.5, n), r)


def simulate(spec: LinearGaussianSpec, T: int, rng: np.random.Generator, actions=None):
    """Sample one trajectory: returns (states (T, n), obs {id: (T, p)}, actions (T, m))."""
    if actions is None:
        actions = rng.uniform(-1, 1, (T, spec.m))
    actions = np.asarray(actions, float)
    x = rng.multivariate_normal(spec.m0, spec.P0)
    xs, obs = [], {k: [] for k in spec.ids}
    for t in range(T):
        xs.append(x)
        for k in spec.ids:
            obs[k].append(spec.H[k] @ x + np.sqrt(spec.r[k]) * rng.standard_normal(spec.r[k].shape))
        x = spec.A @ x + spec.B @ actions[t] + np.sqrt(spec.q) * rng.standard_normal(spec.n)
    return np.array(xs), {k: np.array(v) for k, v in obs.items()}, actions


def _update(mean, cov, H, R, o):
    S = H @ cov @ H.T + R
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericError("innovation covariance is not positive definite") from None
    # K = cov H^T S^{-1} via two triangular solves
    K = np.linalg.solve(L.T, np.linalg.solve(L, H @ cov)).T
    mean = mean + K @ (o - H @ mean)
    IKH = np.eye(len(mean)) - K @ H
    cov = IKH @ cov @ IKH.T + K @ R @ K.T  # Joseph form keeps symmetry
    return mean, cov


def kalman_posterior(spec: LinearGaussianSpec, observations: dict, actions):
    """Filtered means (T, n) and covariances (T, n, n)."""
    H, r = spec.stacked()
    o = np.concatenate([np.asarray(observations[k], float) for k in spec.ids], axis=-1)
    actions = np.asarray(actions, float)
    T = o.shape[0]
    if actions.shape[0] not in (T, T - 1):
        raise UsageError(f"kalman_posterior: {T} observations but {actions.shape[0]} actions")
    R, Q = np.diag(r), np.diag(spec.q)
    mean, cov = spec.m0.copy(), spec.P0.copy()
    means, covs = [], []
    for t in range(T):
        if t > 0:
            mean = spec.A @ mean + spec.B @ actions[t - 1]
            cov = spec.A @ cov @ spec.A.T + Q
        mean, cov = _update(mean, cov, H, R, o[t])
        if not np.all(np.isfinite(cov)) or np.min(np.linalg.eigvalsh(cov)) < -1e-12:
            raise NumericError(f"posterior covariance lost positive definiteness at step {t}")
        means.append(mean)
        covs.append(cov)
    return np.array(means), np.array(covs)


def steady_state_prior(spec: LinearGaussianSpec, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of the predicted-covariance Riccati recursion."""
    H, r = spec.stacked()
    R, Q = np.diag(r), np.diag(spec.q)
    P = np.eye(spec.n)
    for _ in range(max_iter):
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        P_post = P - K @ H @ P
        P_next = spec.A @ P_post @ spec.A.T + Q
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) < tol:
            return P_next
        P = P_next
    raise NumericError("Riccati recursion did not converge")


def steady_gain(spec: LinearGaussianSpec, P_prior: np.ndarray) -> np.ndarray:
    H, r = spec.stacked()
    return P_prior @ H.T @ np.linalg.inv(H @ P_prior @ H.T + np.diag(r))


def with_steady_start(spec: LinearGaussianSpec) -> LinearGaussianSpec:
    """Same system started at mean zero and the stationary prior covariance,
    so the filter gain is constant from the first step."""
    P = steady_state_prior(spec)
    return LinearGaussianSpec(spec.A, spec.B, spec.H, spec.q, spec.r, np.zeros(spec.n), P, list(spec.ids))


def linear_rssm(spec: LinearGaussianSpec, eps: float = 1e-6):
    """An RSSM whose eval-mode posterior means reproduce the steady-gain Kalman filter.

    The update gate saturates to exactly 1, the candidate works in its
    linear regime (tanh(eps x)/eps), identity encoders pass observations
    through and the posterior head applies the constant gain.  Requires
    ``spec`` to start from the stationary prior (see ``with_steady_start``).
    """
    from ..diffgraph.layers import MlpSpec
    from ..rssm import ModalityConfig, Rssm, RssmConfig

    n, m = spec.n, spec.m
    if np.any(spec.m0 != 0):
        raise ConfigError("linear_rssm needs a zero initial mean")
    mods = tuple(
        ModalityConfig(k, "vector", (spec.H[k].shape[0],), "reconstruction",
                       MlpSpec.make((spec.H[k].shape[0],), "identity"), MlpSpec.make((1,), "identity"))
        for k in spec.ids
    )
    cfg = RssmConfig(mods, action_dim=m, h_dim=n, s_dim=n, det_widths=(n,), dyn_widths=(n,),
                     var_widths=(n + sum(spec.H[k].shape[0] for k in spec.ids),), reward_widths=(1,),
                     activation="identity")
    model = Rssm(cfg)
    model.store.fill_(0.0)
    st = model.store
    for k in spec.ids:
        st[f"enc.{k}.l0.w"].value = np.eye(spec.H[k].shape[0])
    st["det.l0.w"].value = np.vstack([spec.A.T, spec.B.T])
    st["gru.b_u"].value = np.full(n, 40.0)
    w_c = np.zeros((2 * n, n))
    w_c[:n] = eps * np.eye(n)
    st["gru.w_c"].value = w_c
    st["dyn.l0.w"].value = np.eye(n)
    st["dyn.mean.w"].value = np.eye(n) / eps
    H, _ = spec.stacked()
    K = steady_gain(spec, spec.P0)
    p = H.shape[0]
    st["var.l0.w"].value = np.eye(n + p)
    st["var.mean.w"].value = np.vstack([((np.eye(n) - K @ H) / eps).T, K.T])
    return model
