"""Expectation-maximization point estimation.

The E-step computes, per gene, the posterior covariance Sigma_i and mean
M_i of the latent weight vector plus the expected squared residual S_i;
the M-step updates (rho, K, Lambda) in closed form. The ascent target is
the beta-marginalized log-likelihood from the model module (the updates
carry no prior terms), which is non-decreasing across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .model import Dataset, ModelParams, marginal_loglik

__all__ = ["EmState", "EmTrace", "em_fit", "em_step"]


@dataclass
class EmState:
    """Current point estimate with the E-step cache."""

    params: ModelParams
    Sigma: np.ndarray  # (V, d, d)
    M: np.ndarray  # (V, d)
    S: np.ndarray  # (V,)


@dataclass
class EmTrace:
    """Per-iteration log-likelihood and parameter path."""

    loglik: np.ndarray  # (n,)
    K: np.ndarray  # (n, d)
    rho: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.loglik)


def _estep(params: ModelParams, ds: Dataset, plan: linalg.ExecPlan):
    lam_k = params.Lam @ params.K

    def kernel(lo, hi):
        D = ds.D[lo:hi]
        rm = ds.r[lo:hi] - ds.mu[lo:hi]
        prec = linalg.gemm_batched(
            D[:, :, None], D[:, :, None], transb=True, alpha=params.rho, beta=1.0, C=params.Lam
        )
        sigma = linalg.spd_jitter_retry(linalg.inverse_batched, prec, "E-step covariance")
        m = np.einsum("vij,vj->vi", sigma, lam_k[None, :] + params.rho * rm[:, None] * D)
        second = np.einsum("vi,vj->vij", m, m) + sigma
        s = (
            rm**2
            - 2.0 * rm * np.einsum("vi,vi->v", D, m)
            + np.einsum("vi,vij,vj->v", D, second, D)
        )
        return (
            sigma,
            m,
            s,
            linalg.reduce_sum(m, deterministic=plan.deterministic),
            linalg.reduce_sum(second, deterministic=plan.deterministic),
            linalg.reduce_sum(s, deterministic=plan.deterministic),
        )

    parts = plan.map(kernel, ds.V)
    sigma = np.concatenate([p[0] for p in parts])
    m = np.concatenate([p[1] for p in parts])
    s = np.concatenate([p[2] for p in parts])
    sum_m = linalg.tree_combine([p[3] for p in parts])
    sum_second = linalg.tree_combine([p[4] for p in parts])
    sum_s = float(linalg.tree_combine([p[5] for p in parts]))
    return sigma, m, s, sum_m, sum_second, sum_s


def em_step(state: EmState, ds: Dataset, plan: linalg.ExecPlan | None = None) -> EmState:
    """One E-step plus joint M-step."""
    plan = plan or linalg.ExecPlan()
    V = ds.V
    sigma, m, s, sum_m, sum_second, sum_s = _estep(state.params, ds, plan)
    if sum_s <= 0.0:
        raise linalg.NumericError("non-positive residual sum in M-step")
    rho_new = V / sum_s
    k_new = sum_m / V
    lam_inv = sum_second / V - np.outer(k_new, k_new)
    lam_inv = 0.5 * (lam_inv + lam_inv.T)
    lam_new = linalg.spd_jitter_retry(linalg.inverse_batched, lam_inv, "M-step precision")
    lam_new = 0.5 * (lam_new + lam_new.T)
    params = ModelParams(K=k_new, Lam=lam_new, rho=float(rho_new))
    return EmState(params=params, Sigma=sigma, M=m, S=s)


def em_fit(
    ds: Dataset,
    init: ModelParams,
    max_iter: int = 1000,
    rel_tol: float = 1e-10,
    plan: linalg.ExecPlan | None = None,
) -> tuple[ModelParams, EmTrace]:
    """Iterate until the marginal log-likelihood settles.

    Returns the final parameters and the per-iteration trace (evaluated
    after each update).
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    plan = plan or linalg.ExecPlan()
    state = EmState(params=init, Sigma=np.empty(0), M=np.empty(0), S=np.empty(0))
    lls, ks, rhos = [], [], []
    prev = marginal_loglik(ds, init)
    for _ in range(max_iter):
        state = em_step(state, ds, plan)
        ll = marginal_loglik(ds, state.params)
        lls.append(ll)
        ks.append(state.params.K)
        rhos.append(state.params.rho)
        if abs(ll - prev) < rel_tol * abs(ll):
            break
        prev = ll
    return state.params, EmTrace(loglik=np.array(lls), K=np.stack(ks), rho=np.array(rhos))
