"""Coordinate-ascent variational engine.

The posterior over (rho, beta, K, Lambda) is approximated by a factored
form Q(rho) Q(beta) Q(K, Lambda) whose blocks stay in their prior
families: Gamma for rho, per-gene Gaussians for beta, and Gaussian-Wishart
for (K, Lambda). One sweep updates the blocks in a fixed order
(expectations, rho, beta, then K/Lambda); the evidence lower bound is
non-decreasing across sweeps and is used as the convergence criterion.

Per-gene work is batched and may be chunked across worker threads; all
reductions use the deterministic fixed-tree contract, so results are
bit-identical for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, multigammaln

from . import linalg
from .model import Dataset, HyperParams
from .samplers import GammaParams, RngStream, sample_gamma

__all__ = [
    "VbState",
    "VbTrace",
    "vb_elbo",
    "vb_fit",
    "vb_init",
    "vb_posterior_sample",
    "vb_step",
]

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class VbState:
    """All variational parameters plus cached expectations.

    lam0l_inv is the accumulated Wishart rate of Q(Lambda); the scale of
    Q(Lambda) is its inverse, obtained by explicit inversion each sweep.
    """

    a_rho: float
    b_rho: float
    mu_beta: np.ndarray  # (V, d)
    lam_beta: np.ndarray  # (V, d, d) per-gene precisions
    k0k: np.ndarray  # (d,) mean of Q(K | Lambda)
    lam0l_inv: np.ndarray  # (d, d) Wishart rate of Q(Lambda)
    e_beta: np.ndarray  # (V, d)
    e_bbt: np.ndarray  # (V, d, d) second moments of beta
    e_lam: np.ndarray  # (d, d)
    e_rho: float
    e_k: np.ndarray  # (d,)
    e_lamk: np.ndarray  # (d,)

    @property
    def dim(self) -> int:
        return self.k0k.shape[0]

    @property
    def V(self) -> int:
        return self.mu_beta.shape[0]


@dataclass
class VbTrace:
    """Per-iteration bound values and parameter movement."""

    elbo: np.ndarray
    delta_k0k: np.ndarray
    delta_rho: np.ndarray
    delta_lam: np.ndarray

    def __len__(self) -> int:
        return len(self.elbo)


def vb_init(ds: Dataset, hp: HyperParams) -> VbState:
    """Start every block at its prior values.

    Per-gene precisions and the stored Wishart rate of Q(Lambda) both
    start at Lambda0 (the rate is the quantity the sweep accumulates and
    inverts); means start at K0 and the rho block at (a0, b0).
    """
    if hp.dim != ds.dim:
        raise ValueError(f"hyperparams dim {hp.dim} != dataset dim {ds.dim}")
    V, d = ds.V, ds.dim
    lam_beta = np.broadcast_to(hp.Lambda0, (V, d, d)).copy()
    mu_beta = np.broadcast_to(hp.K0, (V, d)).copy()
    lam0l_inv = hp.Lambda0.copy()
    sigma_beta = linalg.inverse_batched(lam_beta)
    e_bbt = np.einsum("vi,vj->vij", mu_beta, mu_beta) + sigma_beta
    e_lam = (hp.n0 + V) * linalg.inverse_batched(lam0l_inv)
    return VbState(
        a_rho=hp.a0,
        b_rho=hp.b0,
        mu_beta=mu_beta,
        lam_beta=lam_beta,
        k0k=hp.K0.copy(),
        lam0l_inv=lam0l_inv,
        e_beta=mu_beta.copy(),
        e_bbt=e_bbt,
        e_lam=e_lam,
        e_rho=hp.a0 / hp.b0,
        e_k=hp.K0.copy(),
        e_lamk=e_lam @ hp.K0,
    )


def _resid_moment_sums(state: VbState, ds: Dataset, plan: linalg.ExecPlan) -> float:
    """sum_i [(r-mu)^2 - 2(r-mu) D^T E[beta] + D^T E[beta beta^T] D]."""

    def kernel(lo, hi):
        rm = ds.r[lo:hi] - ds.mu[lo:hi]
        D = ds.D[lo:hi]
        sigma = linalg.inverse_batched(state.lam_beta[lo:hi])
        e_bbt = np.einsum("vi,vj->vij", state.mu_beta[lo:hi], state.mu_beta[lo:hi]) + sigma
        quad = np.einsum("vi,vij,vj->v", D, e_bbt, D)
        cross = np.einsum("vi,vi->v", D, state.e_beta[lo:hi])
        return linalg.reduce_sum(rm**2 - 2.0 * rm * cross + quad, deterministic=plan.deterministic)

    return float(linalg.tree_combine(plan.map(kernel, ds.V)))


def vb_step(state: VbState, ds: Dataset, hp: HyperParams, plan: linalg.ExecPlan | None = None) -> VbState:
    """One full coordinate-ascent sweep in the fixed block order."""
    plan = plan or linalg.ExecPlan()
    V, d = ds.V, ds.dim
    nu = hp.n0 + V
    qv = hp.q0 + V

    # Expectations of the current Q(K, Lambda) block.
    lam0l = linalg.spd_jitter_retry(linalg.inverse_batched, state.lam0l_inv, "Q(Lambda) rate inversion")
    e_lam = nu * lam0l
    e_lamk = e_lam @ state.k0k

    # rho block (the residual sum carries the current beta moments).
    a_rho = hp.a0 + 0.5 * V
    b_rho = hp.b0 + 0.5 * _resid_moment_sums(state, ds, plan)
    e_rho = a_rho / b_rho

    # beta block, batched over genes.
    def beta_kernel(lo, hi):
        D = ds.D[lo:hi]
        rm = ds.r[lo:hi] - ds.mu[lo:hi]
        lam_b = linalg.gemm_batched(
            D[:, :, None], D[:, :, None], transb=True, alpha=e_rho, beta=1.0, C=e_lam
        )
        sigma_b = linalg.spd_jitter_retry(linalg.inverse_batched, lam_b, "beta precision inversion")
        rhs = e_lamk[None, :] + e_rho * D * rm[:, None]
        mu_b = np.einsum("vij,vj->vi", sigma_b, rhs)
        e_bbt = np.einsum("vi,vj->vij", mu_b, mu_b) + sigma_b
        return (
            lam_b,
            mu_b,
            e_bbt,
            linalg.reduce_sum(mu_b, deterministic=plan.deterministic),
            linalg.reduce_sum(e_bbt, deterministic=plan.deterministic),
        )

    parts = plan.map(beta_kernel, V)
    lam_beta = np.concatenate([p[0] for p in parts])
    mu_beta = np.concatenate([p[1] for p in parts])
    e_bbt = np.concatenate([p[2] for p in parts])
    sum_mu = linalg.tree_combine([p[3] for p in parts])
    sum_bbt = linalg.tree_combine([p[4] for p in parts])

    # K / Lambda block from the refreshed beta moments.
    k0k = (sum_mu + hp.q0 * hp.K0) / qv
    lam0_inv = linalg.inverse_batched(hp.Lambda0)
    lam0l_inv = (
        lam0_inv
        + sum_bbt
        + hp.q0 * np.outer(hp.K0, hp.K0)
        - qv * np.outer(k0k, k0k)
    )
    lam0l_inv = 0.5 * (lam0l_inv + lam0l_inv.T)

    lam0l_new = linalg.spd_jitter_retry(linalg.inverse_batched, lam0l_inv, "Q(Lambda) rate inversion")
    e_lam_new = nu * lam0l_new
    return VbState(
        a_rho=a_rho,
        b_rho=b_rho,
        mu_beta=mu_beta,
        lam_beta=lam_beta,
        k0k=k0k,
        lam0l_inv=lam0l_inv,
        e_beta=mu_beta,
        e_bbt=e_bbt,
        e_lam=e_lam_new,
        e_rho=e_rho,
        e_k=k0k,
        e_lamk=e_lam_new @ k0k,
    )


def _wishart_log_norm(dof: float, scale: np.ndarray) -> float | None:
    """Log normalizer of Wishart(dof, scale); None when the density is improper."""
    d = scale.shape[0]
    if dof <= d - 1:
        return None
    _, logdet = np.linalg.slogdet(scale)
    return 0.5 * dof * d * np.log(2.0) + 0.5 * dof * logdet + multigammaln(0.5 * dof, d)


def _e_log_det_lam(dof: float, scale: np.ndarray) -> float:
    d = scale.shape[0]
    _, logdet = np.linalg.slogdet(scale)
    return float(np.sum(digamma(0.5 * (dof + 1 - np.arange(1, d + 1)))) + d * np.log(2.0) + logdet)


def vb_elbo(state: VbState, ds: Dataset, hp: HyperParams, plan: linalg.ExecPlan | None = None) -> float:
    """Exact lower bound on the log evidence under the current Q.

    When the Wishart prior is improper (dof <= dim - 1, as with the
    defaults for three or more networks), its log normalizer is omitted
    and the bound is defined up to an additive constant; differences
    across sweeps, which drive convergence detection, are unaffected.
    """
    plan = plan or linalg.ExecPlan()
    V, d = ds.V, ds.dim
    nu = hp.n0 + V
    qv = hp.q0 + V
    S = linalg.inverse_batched(state.lam0l_inv)  # scale of Q(Lambda)
    e_rho = state.a_rho / state.b_rho
    e_lnrho = float(digamma(state.a_rho) - np.log(state.b_rho))
    e_lnlam = _e_log_det_lam(nu, S)

    def gene_kernel(lo, hi):
        D = ds.D[lo:hi]
        rm = ds.r[lo:hi] - ds.mu[lo:hi]
        mu_b = state.mu_beta[lo:hi]
        sigma = linalg.inverse_batched(state.lam_beta[lo:hi])
        e_bbt = np.einsum("vi,vj->vij", mu_b, mu_b) + sigma
        resid = linalg.reduce_sum(
            rm**2
            - 2.0 * rm * np.einsum("vi,vi->v", D, mu_b)
            + np.einsum("vi,vij,vj->v", D, e_bbt, D),
            deterministic=plan.deterministic,
        )
        dev = mu_b - state.k0k
        scatter = linalg.reduce_sum(
            sigma + np.einsum("vi,vj->vij", dev, dev), deterministic=plan.deterministic
        )
        sign, logdet_lam = np.linalg.slogdet(state.lam_beta[lo:hi])
        if np.any(sign <= 0):
            raise linalg.NumericError("non-PD beta precision in bound evaluation")
        logdet_sigma = linalg.reduce_sum(-logdet_lam, deterministic=plan.deterministic)
        return resid, scatter, logdet_sigma

    parts = plan.map(gene_kernel, V)
    resid_sum = linalg.tree_combine([p[0] for p in parts])
    scatter_sum = linalg.tree_combine([p[1] for p in parts])
    logdet_sigma_sum = linalg.tree_combine([p[2] for p in parts])

    # Likelihood and beta prior.
    t_lik = 0.5 * V * (e_lnrho - LOG_2PI) - 0.5 * e_rho * resid_sum
    t_beta = (
        0.5 * V * e_lnlam
        - 0.5 * V * d * LOG_2PI
        - 0.5 * (nu * float(np.trace(S @ scatter_sum)) + V * d / qv)
    )

    # K and Lambda priors.
    dk = state.k0k - hp.K0
    t_k = (
        0.5 * d * np.log(hp.q0)
        - 0.5 * d * LOG_2PI
        + 0.5 * e_lnlam
        - 0.5 * hp.q0 * (nu * float(dk @ S @ dk) + d / qv)
    )
    lam0_inv = linalg.inverse_batched(hp.Lambda0)
    t_lam = 0.5 * (hp.n0 - d - 1) * e_lnlam - 0.5 * nu * float(np.trace(lam0_inv @ S))
    z_prior = _wishart_log_norm(hp.n0, hp.Lambda0)
    if z_prior is not None:
        t_lam -= z_prior

    # rho prior.
    t_rho = (
        hp.a0 * np.log(hp.b0)
        - gammaln(hp.a0)
        + (hp.a0 - 1.0) * e_lnrho
        - hp.b0 * e_rho
    )

    # Entropies (negative E[ln Q]).
    h_beta = 0.5 * logdet_sigma_sum + 0.5 * V * d * (1.0 + LOG_2PI)
    h_rho = (
        state.a_rho
        - np.log(state.b_rho)
        + gammaln(state.a_rho)
        + (1.0 - state.a_rho) * digamma(state.a_rho)
    )
    e_lnq_k = 0.5 * d * np.log(qv) - 0.5 * d * LOG_2PI + 0.5 * e_lnlam - 0.5 * d
    z_q = _wishart_log_norm(nu, S)
    if z_q is None:
        raise linalg.NumericError("Q(Lambda) is improper; dataset too small")
    e_lnq_lam = 0.5 * (nu - d - 1) * e_lnlam - 0.5 * nu * d - z_q

    return float(t_lik + t_beta + t_k + t_lam + t_rho + h_beta + h_rho - e_lnq_k - e_lnq_lam)


def _rel_delta(new, old) -> float:
    denom = max(float(np.max(np.abs(old))), 1e-300)
    return float(np.max(np.abs(np.asarray(new) - np.asarray(old)))) / denom


def vb_fit(
    ds: Dataset,
    hp: HyperParams,
    max_iter: int = 300,
    rel_tol: float = 1e-8,
    plan: linalg.ExecPlan | None = None,
    compute_elbo: bool = True,
    param_tol: float = 1e-10,
) -> tuple[VbState, VbTrace]:
    """Iterate sweeps until the bound (or parameter movement) settles.

    With compute_elbo=True the stop rule is a relative bound change below
    rel_tol; otherwise the fallback is max parameter delta below param_tol.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    plan = plan or linalg.ExecPlan()
    state = vb_init(ds, hp)
    elbos, d_k, d_r, d_l = [], [], [], []
    prev_elbo = None
    for _ in range(max_iter):
        new = vb_step(state, ds, hp, plan)
        d_k.append(_rel_delta(new.k0k, state.k0k))
        d_r.append(_rel_delta(new.a_rho / new.b_rho, state.a_rho / state.b_rho))
        d_l.append(_rel_delta(new.lam0l_inv, state.lam0l_inv))
        state = new
        if compute_elbo:
            elbo = vb_elbo(state, ds, hp, plan)
            elbos.append(elbo)
            if prev_elbo is not None and abs(elbo - prev_elbo) < rel_tol * abs(elbo):
                break
            prev_elbo = elbo
        else:
            elbos.append(np.nan)
            if max(d_k[-1], d_r[-1], d_l[-1]) < param_tol:
                break
    trace = VbTrace(
        elbo=np.array(elbos),
        delta_k0k=np.array(d_k),
        delta_rho=np.array(d_r),
        delta_lam=np.array(d_l),
    )
    return state, trace


def vb_posterior_sample(
    rng: RngStream,
    state: VbState,
    hp: HyperParams,
    V: int,
    n_samples: int,
) -> dict[str, np.ndarray]:
    """Joint draws of (K, Lambda, rho) from the fitted Q.

    Lambda is drawn first (Wishart with dof n0+V and the fitted scale),
    then K given that Lambda, then rho from its Gamma block. Returns
    arrays 'K' (n, d), 'Lambda' (n, d, d), 'rho' (n,).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    d = state.dim
    nu = hp.n0 + V
    qv = hp.q0 + V
    scale = linalg.inverse_batched(state.lam0l_inv)
    R = linalg.cholesky_batched(scale)
    k_draws = np.empty((n_samples, d))
    lam_draws = np.empty((n_samples, d, d))
    chunk = max(1, min(n_samples, 4_000_000 // max(nu * d, 1)))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        u = rng.normals(m * nu * d).reshape(m, nu, d)
        S = u @ R.T
        lam = np.einsum("mnd,mne->mde", S, S)
        lam_draws[done : done + m] = lam
        cov_k = linalg.inverse_batched(qv * lam)
        Lk = linalg.cholesky_batched(cov_k)
        uk = rng.normals(m * d).reshape(m, d)
        k_draws[done : done + m] = state.k0k + np.einsum("mij,mj->mi", Lk, uk)
        done += m
    rho_draws = sample_gamma(rng, GammaParams(state.a_rho, state.b_rho), size=n_samples)
    return {"K": k_draws, "Lambda": lam_draws, "rho": np.asarray(rho_draws)}
