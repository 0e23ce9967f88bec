"""Switching dynamics with a linear-Gaussian emission.

Its per-step posterior q(Z_i | Z_{i-1}, S_i, X_i) is the exact Kalman
measurement update, which makes the Gibbs sampler exact for this model and
gives the sampler tests a closed-form target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .emission import LinearGaussianEmission, linear_gaussian_log_prob
from .gaussian import Gaussian


@dataclass
class LinearGaussianSlds:
    A: np.ndarray  # (K, d, d)
    b: np.ndarray  # (K, d)
    B: np.ndarray  # (K, d, d) lower factors
    emission: LinearGaussianEmission
    z0: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.z0 = np.asarray(self.z0, dtype=np.float64)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def initial_latent(self) -> np.ndarray:
        return self.z0.copy()

    def dynamics_params(self, state: int):
        return self.A[state], self.b[state], self.B[state]

    def transition(self, z_prev, state: int) -> Gaussian:
        A, b, B = self.dynamics_params(state)
        return Gaussian(A @ z_prev + b, B)

    def recognition_features(self, sentences):
        return None

    def z_posterior_at(self, xs, i: int, z_prev, state: int, features=None) -> Gaussian:
        prior = self.transition(z_prev, state)
        m, P = prior.mean, prior.cov
        C, R = self.emission.C, self.emission.R
        S = C @ P @ C.T + R @ R.T
        gain = cho_solve(cho_factor(S, lower=True), C @ P).T
        mean = m + gain @ (np.asarray(xs[i]) - C @ m)
        I_KC = np.eye(len(m)) - gain @ C
        cov = I_KC @ P @ I_KC.T + gain @ R @ R.T @ gain.T
        return Gaussian.from_cov(mean, cov)

    def fill(self, zs, xs, i: int) -> np.ndarray:
        return self.emission.C @ zs[i]

    def observed_score(self, zs, xs, observed) -> float:
        return float(sum(
            linear_gaussian_log_prob(self.emission, zs[j], xs[j])
            for j in range(len(xs)) if observed[j]
        ))

    def simulate(self, states, rng: np.random.Generator):
        z = self.z0
        zs, xs = [], []
        for s in states:
            z = self.A[s] @ z + self.b[s] + self.B[s] @ rng.standard_normal(len(z))
            zs.append(z)
            xs.append(self.emission.C @ z + self.emission.R @ rng.standard_normal(self.emission.C.shape[0]))
        return np.array(zs), np.array(xs)


# ------------------------------------------------------------ exact smoothing


@dataclass
class Smoothed:
    mean: np.ndarray  # (N, d)
    cov: np.ndarray  # (N, d, d)
    lag: np.ndarray  # (N, d, d); lag[i] = Cov(z_i, z_{i-1} | X), lag[0] = 0
    log_lik: float


def smooth(model: LinearGaussianSlds, xs, states, observed=None) -> Smoothed:
    """Kalman filter and RTS smoother under a known state sequence.

    Positions with ``observed[i]`` false skip the measurement update.
    """
    N, d = len(states), model.z0.shape[0]
    observed = [True] * N if observed is None else observed
    C = model.emission.C
    Rc = model.emission.R @ model.emission.R.T
    mp, Pp, mf, Pf = np.zeros((N, d)), np.zeros((N, d, d)), np.zeros((N, d)), np.zeros((N, d, d))
    m, P, ll = model.z0, np.zeros((d, d)), 0.0
    for i, s in enumerate(states):
        A, b, B = model.dynamics_params(s)
        m, P = A @ m + b, A @ P @ A.T + B @ B.T
        mp[i], Pp[i] = m, P
        if observed[i]:
            S = C @ P @ C.T + Rc
            cf = cho_factor(S, lower=True)
            r = np.asarray(xs[i], dtype=np.float64) - C @ m
            gain = cho_solve(cf, C @ P).T
            ll -= 0.5 * (r @ cho_solve(cf, r) + 2 * np.log(np.diag(cf[0])).sum() + len(r) * np.log(2 * np.pi))
            m = m + gain @ r
            P = P - gain @ C @ P
            P = 0.5 * (P + P.T)
        mf[i], Pf[i] = m, P
    ms, Ps, lag = mf.copy(), Pf.copy(), np.zeros((N, d, d))
    for i in range(N - 2, -1, -1):
        A = model.A[states[i + 1]]
        G = np.linalg.solve(Pp[i + 1].T, (Pf[i] @ A.T).T).T
        ms[i] = mf[i] + G @ (ms[i + 1] - mp[i + 1])
        Ps[i] = Pf[i] + G @ (Ps[i + 1] - Pp[i + 1]) @ G.T
        lag[i + 1] = Ps[i + 1] @ G.T
    return Smoothed(ms, Ps, lag, float(ll))


def impute(model: LinearGaussianSlds, xs, states, observed) -> np.ndarray:
    """Posterior-mean reconstruction C E[z_i | observed X] of every position."""
    sm = smooth(model, xs, states, observed)
    return sm.mean @ model.emission.C.T


def fit_em(sequences, state_sequences, K: int, d: int, iters: int = 50,
           rng: np.random.Generator | None = None, jitter: float = 1e-6) -> tuple[LinearGaussianSlds, list[float]]:
    """Maximum-likelihood dynamics and emission by EM with known switching states.

    ``sequences`` holds ``(N, m)`` observation arrays.  The pre-story latent
    is pinned at zero.  Returns the fitted model and the log-likelihood of
    each E-step (non-decreasing up to round-off).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    m = np.asarray(sequences[0]).shape[1]
    model = LinearGaussianSlds(
        np.tile(0.5 * np.eye(d), (K, 1, 1)), np.zeros((K, d)), np.tile(np.eye(d), (K, 1, 1)),
        LinearGaussianEmission(rng.standard_normal((m, d)), np.eye(m)), np.zeros(d),
    )
    trace = []
    for _ in range(iters):
        Szu = np.zeros((K, d, d + 1))
        Suu = np.zeros((K, d + 1, d + 1))
        Szz_k = np.zeros((K, d, d))
        n_k = np.zeros(K)
        Sxz, Szz, Sxx, n = np.zeros((m, d)), np.zeros((d, d)), np.zeros((m, m)), 0
        ll = 0.0
        for xs, states in zip(sequences, state_sequences):
            xs = np.asarray(xs, dtype=np.float64)
            sm = smooth(model, xs, states)
            ll += sm.log_lik
            for i, s in enumerate(states):
                Ezz = sm.cov[i] + np.outer(sm.mean[i], sm.mean[i])
                if i == 0:
                    prev_m, prev_zz, cross = model.z0, np.outer(model.z0, model.z0), np.outer(sm.mean[0], model.z0)
                else:
                    prev_m = sm.mean[i - 1]
                    prev_zz = sm.cov[i - 1] + np.outer(prev_m, prev_m)
                    cross = sm.lag[i] + np.outer(sm.mean[i], prev_m)
                Euu = np.block([[prev_zz, prev_m[:, None]], [prev_m[None, :], np.ones((1, 1))]])
                Szu[s] += np.hstack([cross, sm.mean[i][:, None]])
                Suu[s] += Euu
                Szz_k[s] += Ezz
                n_k[s] += 1
                Sxz += np.outer(xs[i], sm.mean[i])
                Szz += Ezz
                Sxx += np.outer(xs[i], xs[i])
                n += 1
        trace.append(ll)
        A, b, B = model.A.copy(), model.b.copy(), model.B.copy()
        for k in range(K):
            if n_k[k] == 0:
                continue
            W = np.linalg.solve(Suu[k] + jitter * np.eye(d + 1), Szu[k].T).T
            A[k], b[k] = W[:, :d], W[:, d]
            Q = (Szz_k[k] - W @ Szu[k].T) / n_k[k]
            B[k] = np.linalg.cholesky(0.5 * (Q + Q.T) + jitter * np.eye(d))
        C = np.linalg.solve(Szz, Sxz.T).T
        Rc = (Sxx - C @ Sxz.T) / n
        R = np.linalg.cholesky(0.5 * (Rc + Rc.T) + jitter * np.eye(m))
        model = LinearGaussianSlds(A, b, B, LinearGaussianEmission(C, R), model.z0)
    return model, trace
