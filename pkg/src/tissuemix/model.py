"""Hierarchical model types, the raw-profile transform, and synthetic data.

The observation model: each gene i carries one normalized expression
reading r_i and an expression profile d_i of length N (one activity value
per network in the ensemble). With the weight vector constrained to sum
to one, the working representation drops the last component:

    mu_i = d_{i,N}
    D_i  = (d_{i,1} - d_{i,N}, ..., d_{i,N-1} - d_{i,N})^T

    r_i      ~ N(D_i^T beta_i + mu_i, 1/rho)
    beta_i   ~ N(K, Lambda^-1)

with priors rho ~ Gamma(a0, b0), K | Lambda ~ N(K0, (q0 Lambda)^-1),
Lambda ~ Wishart(dof n0, scale Lambda0). The population-level weight
vector of interest is K (length N-1), completed by 1 - sum(K).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .samplers import RngStream

__all__ = [
    "Dataset",
    "ExpressionProfile",
    "HyperParams",
    "ModelParams",
    "RawRecord",
    "default_hyperparams",
    "full_weights",
    "marginal_loglik",
    "marginal_loglik_grad_k",
    "random_profiles",
    "synth_generate",
    "transform",
    "untransform",
]

REFERENCE_LAMBDA_INV = np.array([[0.01, 0.005], [0.005, 0.008]])


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ExpressionProfile:
    """Per-network activity of one gene-linked output (length N).

    A single-network profile (length 1) is representable, but building a
    Dataset requires at least two networks.
    """

    d: np.ndarray
    gene: str | None = None

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 1 or d.shape[0] < 1:
            raise ValueError("profile must be a non-empty vector")
        if not np.all(np.isfinite(d)):
            raise ValueError("profile contains non-finite entries")
        object.__setattr__(self, "d", _freeze(d))

    @property
    def n_networks(self) -> int:
        return self.d.shape[0]


@dataclass(frozen=True)
class RawRecord:
    """One gene: normalized expression ratio plus its profile."""

    r: float
    profile: ExpressionProfile

    def __post_init__(self):
        if not np.isfinite(self.r):
            raise ValueError("expression reading must be finite")


@dataclass(frozen=True)
class Dataset:
    """Observed layer after the working transform.

    r and mu have length V; D is the (V, N-1) batch of difference
    profiles. Immutable and safe to share across threads.
    """

    r: np.ndarray
    mu: np.ndarray
    D: np.ndarray
    n_networks: int

    def __post_init__(self):
        r = _freeze(np.atleast_1d(self.r))
        mu = _freeze(np.atleast_1d(self.mu))
        D = _freeze(np.atleast_2d(self.D))
        if r.shape[0] == 0:
            raise ValueError("empty dataset")
        if not (r.shape[0] == mu.shape[0] == D.shape[0]):
            raise ValueError("inconsistent lengths")
        if D.shape[1] != self.n_networks - 1:
            raise ValueError(f"D width {D.shape[1]} != n_networks-1 = {self.n_networks - 1}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "D", D)

    @property
    def V(self) -> int:
        return self.r.shape[0]

    @property
    def dim(self) -> int:
        """Working dimension N-1."""
        return self.D.shape[1]


@dataclass(frozen=True)
class HyperParams:
    """Fixed prior constants."""

    a0: float
    b0: float
    q0: float
    n0: int
    K0: np.ndarray
    Lambda0: np.ndarray

    def __post_init__(self):
        if not (self.a0 > 0 and self.b0 > 0 and self.q0 > 0 and self.n0 >= 1):
            raise ValueError("hyperparameters must be positive")
        K0 = _freeze(np.atleast_1d(self.K0))
        Lambda0 = _freeze(np.atleast_2d(self.Lambda0))
        if Lambda0.shape != (K0.shape[0], K0.shape[0]):
            raise ValueError("Lambda0 shape inconsistent with K0")
        linalg.cholesky_batched(Lambda0)  # SPD check
        object.__setattr__(self, "K0", K0)
        object.__setattr__(self, "Lambda0", Lambda0)
        object.__setattr__(self, "n0", int(self.n0))

    @property
    def dim(self) -> int:
        return self.K0.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """One point in parameter space: weight mean K, precision matrix, rho."""

    K: np.ndarray
    Lam: np.ndarray
    rho: float

    def __post_init__(self):
        K = _freeze(np.atleast_1d(self.K))
        Lam = _freeze(np.atleast_2d(self.Lam))
        if Lam.shape != (K.shape[0], K.shape[0]):
            raise ValueError("Lam shape inconsistent with K")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        linalg.cholesky_batched(Lam)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Lam", Lam)


def transform(records) -> Dataset:
    """Build the working Dataset from raw (r_i, d_i) records."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    n = records[0].profile.n_networks
    if n < 2:
        raise ValueError("datasets need at least 2 networks")
    for i, rec in enumerate(records):
        if rec.profile.n_networks != n:
            raise ValueError(f"record {i} has {rec.profile.n_networks} networks, expected {n}")
    r = np.array([rec.r for rec in records])
    d = np.stack([rec.profile.d for rec in records])
    mu = d[:, -1].copy()
    D = d[:, :-1] - mu[:, None]
    return Dataset(r=r, mu=mu, D=D, n_networks=n)


def untransform(ds: Dataset) -> np.ndarray:
    """Reconstruct the raw (V, N) profile matrix from a Dataset."""
    d = np.empty((ds.V, ds.n_networks))
    d[:, -1] = ds.mu
    d[:, :-1] = ds.D + ds.mu[:, None]
    return d


def default_hyperparams(N: int) -> HyperParams:
    """Weakly informative defaults for an ensemble of N networks.

    For N = 3 the precision prior scale is the inverse of the reference
    covariance [[0.01, 0.005], [0.005, 0.008]]; other N fall back to the
    inverse of 0.01*I. K0 entries are 1/3 (nearly irrelevant at
    q0 = 0.001).
    """
    if N < 2:
        raise ValueError("need at least 2 networks")
    dim = N - 1
    if N == 3:
        lam0 = np.linalg.inv(REFERENCE_LAMBDA_INV)
    else:
        lam0 = np.linalg.inv(0.01 * np.eye(dim))
    return HyperParams(a0=0.5, b0=0.5, q0=0.001, n0=1, K0=np.full(dim, 1.0 / 3.0), Lambda0=lam0)


def full_weights(K: np.ndarray) -> np.ndarray:
    """Append the implied last weight 1 - sum(K)."""
    K = np.atleast_1d(np.asarray(K, dtype=np.float64))
    return np.concatenate([K, [1.0 - K.sum()]])


def random_profiles(
    rng: RngStream, V: int, N: int, include_constant: bool = True
) -> list[ExpressionProfile]:
    """V binary profiles drawn uniformly from {0,1}^N.

    Constant profiles (all networks agree) have D_i = 0 and carry no
    weight information, but they pin down the observation precision: a
    gene whose networks all agree reads r_i ~ N(mu_i, 1/rho) exactly.
    With binary profiles and N = 3 the non-constant classes alone leave
    (rho, Lambda) on a flat likelihood ridge, so constants are included
    by default; pass include_constant=False to draw only informative-
    for-K profiles.
    """
    if N < 2 or N > 62:
        raise ValueError("N must be in [2, 62]")
    n_codes = 2**N
    out = []
    while len(out) < V:
        u = rng.uniforms(V - len(out))
        codes = np.minimum((u * n_codes).astype(np.int64), n_codes - 1)
        if not include_constant:
            codes = codes[(codes != 0) & (codes != n_codes - 1)]
        for c in codes:
            bits = [(int(c) >> k) & 1 for k in range(N)]
            out.append(ExpressionProfile(np.array(bits, dtype=np.float64)))
    return out[:V]


def synth_generate(rng: RngStream, truth: ModelParams, profiles) -> Dataset:
    """Simulate one reading per profile under the generative model."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no profiles")
    dim = truth.K.shape[0]
    if profiles[0].n_networks != dim + 1:
        raise ValueError(
            f"profiles have {profiles[0].n_networks} networks but truth implies {dim + 1}"
        )
    ds0 = transform([RawRecord(0.0, p) for p in profiles])
    V = ds0.V
    cov = linalg.inverse_batched(truth.Lam)
    L = linalg.cholesky_batched(cov)
    z = rng.normals(V * dim).reshape(V, dim)
    beta = truth.K + z @ L.T
    eps = rng.normals(V) / np.sqrt(truth.rho)
    r = np.einsum("vd,vd->v", ds0.D, beta) + ds0.mu + eps
    return Dataset(r=r, mu=ds0.mu, D=ds0.D, n_networks=ds0.n_networks)


def _marginal_sd2(ds: Dataset, p: ModelParams) -> np.ndarray:
    lam_inv = linalg.inverse_batched(p.Lam)
    return 1.0 / p.rho + np.einsum("vd,de,ve->v", ds.D, lam_inv, ds.D)


def marginal_loglik(ds: Dataset, p: ModelParams) -> float:
    """Log-likelihood with the per-gene latent weights integrated out.

    Each gene contributes log N(r_i | D_i^T K + mu_i, 1/rho + D_i^T
    Lambda^-1 D_i). This is the ascent target of the EM iteration.
    """
    s2 = _marginal_sd2(ds, p)
    resid = ds.r - ds.mu - ds.D @ p.K
    terms = -0.5 * (np.log(2.0 * np.pi * s2) + resid**2 / s2)
    return float(linalg.reduce_sum(terms))


def marginal_loglik_grad_k(ds: Dataset, p: ModelParams) -> np.ndarray:
    """Gradient of marginal_loglik with respect to K."""
    s2 = _marginal_sd2(ds, p)
    resid = ds.r - ds.mu - ds.D @ p.K
    return ds.D.T @ (resid / s2)
