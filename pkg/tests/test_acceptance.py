"""Acceptance suite: one test per criterion, one printed line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the PASS/FAIL
line for every criterion as it completes.
"""

import itertools
import os
import time
from statistics import median

import numpy as np
import pytest
from scipy import stats

from tissuemix import analysis, boolnet, cli, em, gibbs, linalg, model, oracles, vb
from tissuemix.samplers import (
    GammaParams,
    RngStream,
    RngStreamSet,
    WishartParams,
    sample_gamma,
    sample_mvn,
    sample_wishart,
)

from conftest import reference_lambda
from test_boolnet import all_stimuli, random_toy_net

ACCEPTANCE_SEED = 404
TRUE_K = np.array([0.1, 0.3])
TRUE_RHO = 100.0
TRUE_WEIGHTS = np.array([0.1, 0.3, 0.6])


def report(criterion: int, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE C{criterion:02d}: {status} {detail}")


def table1_dataset(seed: int):
    rng = RngStream(seed)
    profiles = model.random_profiles(rng, 4000, 3)
    truth = model.ModelParams(K=TRUE_K, Lam=reference_lambda(), rho=TRUE_RHO)
    return model.synth_generate(rng, truth, profiles)


@pytest.fixture(scope="module")
def table1():
    """Reference-regime dataset with all three fits, shared across criteria."""
    t0 = time.perf_counter()
    ds = table1_dataset(ACCEPTANCE_SEED)
    hp = model.default_hyperparams(3)

    vb_state, vb_trace = vb.vb_fit(ds, hp, max_iter=300, rel_tol=1e-8)
    vb_draws = vb.vb_posterior_sample(RngStream(1), vb_state, hp, ds.V, 8_000)
    vb_report = analysis.summarize(vb_draws)
    w_vb = np.array(vb_report["full_weights"]["mode_vector"])

    em_params, em_trace = em.em_fit(ds, model.ModelParams(K=hp.K0, Lam=hp.Lambda0, rho=1.0))
    w_em = model.full_weights(em_params.K)

    cfg = gibbs.ChainConfig(iterations=10_000, burn_in=2_000, thin=1, seed=ACCEPTANCE_SEED)
    chain = gibbs.gibbs_run(RngStream(ACCEPTANCE_SEED), ds, hp, cfg, plan=linalg.ExecPlan())
    w_gibbs = model.full_weights(chain.K.mean(axis=0))

    elapsed = time.perf_counter() - t0
    return {
        "ds": ds,
        "hp": hp,
        "vb_state": vb_state,
        "vb_trace": vb_trace,
        "vb_report": vb_report,
        "w_vb": w_vb,
        "em_params": em_params,
        "em_trace": em_trace,
        "w_em": w_em,
        "chain": chain,
        "w_gibbs": w_gibbs,
        "elapsed": elapsed,
    }


def test_c01_synthetic_recovery(table1):
    errs = {
        "vb": float(np.linalg.norm(table1["w_vb"] - TRUE_WEIGHTS)),
        "em": float(np.linalg.norm(table1["w_em"] - TRUE_WEIGHTS)),
        "gibbs": float(np.linalg.norm(table1["w_gibbs"] - TRUE_WEIGHTS)),
    }
    within_budget = table1["elapsed"] < 300.0
    ok = all(e <= 0.02 for e in errs.values()) and within_budget
    report(
        1,
        ok,
        f"weight errors vb={errs['vb']:.4f} em={errs['em']:.4f} gibbs={errs['gibbs']:.4f} "
        f"(tol 0.02); fits took {table1['elapsed']:.0f}s (budget 300s)",
    )
    assert errs["vb"] <= 0.02
    assert errs["em"] <= 0.02
    assert errs["gibbs"] <= 0.02
    assert within_budget


def test_c02_five_k_sweep():
    draw_rng = RngStream(77_000)
    errors = {"vb": [], "em": [], "gibbs": []}
    hp = model.default_hyperparams(3)
    for rep in range(5):
        # first two coordinates of a flat Dirichlet over three weights
        g = np.array([sample_gamma(draw_rng, GammaParams(1.0, 1.0)) for _ in range(3)])
        k_true = (g / g.sum())[:2]
        w_true = model.full_weights(k_true)
        truth = model.ModelParams(K=k_true, Lam=reference_lambda(), rho=TRUE_RHO)
        rng = RngStream(5000 + rep)
        ds = model.synth_generate(rng, truth, model.random_profiles(rng, 4000, 3))

        state, _ = vb.vb_fit(ds, hp, max_iter=300)
        draws = vb.vb_posterior_sample(RngStream(6000 + rep), state, hp, ds.V, 8_000)
        w_vb = np.array(analysis.summarize(draws)["full_weights"]["mode_vector"])
        errors["vb"].append(np.linalg.norm(w_vb - w_true))

        params, _ = em.em_fit(ds, model.ModelParams(K=hp.K0, Lam=hp.Lambda0, rho=1.0))
        errors["em"].append(np.linalg.norm(model.full_weights(params.K) - w_true))

        cfg = gibbs.ChainConfig(iterations=10_000, burn_in=2_000, thin=1, seed=7000 + rep)
        chain = gibbs.gibbs_run(RngStream(7000 + rep), ds, hp, cfg)
        errors["gibbs"].append(np.linalg.norm(model.full_weights(chain.K.mean(axis=0)) - w_true))

    avg = {m: float(np.mean(v)) for m, v in errors.items()}
    ok = all(a <= 0.02 for a in avg.values())
    report(2, ok, f"average weight errors over 5 draws: " + " ".join(f"{m}={a:.4f}" for m, a in avg.items()))
    for m, a in avg.items():
        assert a <= 0.02, f"{m}: average error {a:.4f}"


def test_c03_rho_recovery(table1):
    em_rho = table1["em_params"].rho
    vb_rho_mode = table1["vb_report"]["parameters"]["rho"]["mode"]
    em_ok = abs(em_rho - TRUE_RHO) <= 0.05 * TRUE_RHO
    vb_ok = abs(vb_rho_mode - TRUE_RHO) <= 0.10 * TRUE_RHO
    report(
        3,
        em_ok and vb_ok,
        f"EM rho={em_rho:.2f} ({abs(em_rho - TRUE_RHO):.1f}% tol 5%), "
        f"VB rho mode={vb_rho_mode:.2f} ({abs(vb_rho_mode - TRUE_RHO):.1f}% tol 10%)",
    )
    assert em_ok
    assert vb_ok


def test_c04_vb_convergence_profile(table1):
    e = table1["vb_trace"].elbo
    rel_steps = np.abs(np.diff(e)) / np.abs(e[1:])
    monotone = bool(np.all(np.diff(e) >= -1e-9 * np.abs(e[1:])))
    hits = np.nonzero(rel_steps < 1e-8)[0]
    converged_iter = int(hits[0]) + 2 if hits.size else None
    ok = monotone and converged_iter is not None and converged_iter <= 300
    report(
        4,
        ok,
        f"monotone={monotone}; per-sweep relative change at sweep 300: {rel_steps[-1]:.1e} "
        f"(first 1e-8 crossing within 300 sweeps: {converged_iter}); "
        "measured crossings on this regime: ~1e-5 at ~180 sweeps, 1e-8 at ~1.4-1.7k sweeps",
    )
    assert monotone, "bound decreased beyond the 1e-9 relative slack"
    assert converged_iter is not None and converged_iter <= 300, (
        "per-sweep relative bound change did not reach 1e-8 within 300 sweeps: "
        f"last change {rel_steps[-1]:.2e}. Exact coordinate ascent on this model needs "
        "~1.4-1.7k sweeps to cross 1e-8 (the visible plateau at ~100-200 sweeps sits near 1e-5); "
        "estimates are stable from ~50 sweeps, so criteria 1-3 are unaffected."
    )


def test_c05_em_ascent():
    hp = model.default_hyperparams(3)
    truth = model.ModelParams(K=TRUE_K, Lam=reference_lambda(), rho=TRUE_RHO)
    worst = 0.0
    for seed in range(900, 920):
        rng = RngStream(seed)
        ds = model.synth_generate(rng, truth, model.random_profiles(rng, 50, 3))
        _, trace = em.em_fit(ds, model.ModelParams(K=hp.K0, Lam=hp.Lambda0, rho=1.0), max_iter=200)
        ll = trace.loglik
        drops = np.diff(ll) + 1e-9 * np.abs(ll[1:])
        worst = min(worst, float(drops.min()))
        assert np.all(drops >= 0.0), f"seed {seed}: log-likelihood decreased"
    report(5, True, f"20 instances at V=50: marginal log-likelihood never decreased (worst slackful step {worst:.1e})")


def test_c06_gibbs_desk_scale():
    # quadrature comparison
    profiles = [model.ExpressionProfile(np.array(v, dtype=float)) for v in ([1, 0], [0, 1], [1, 0])]
    truth = model.ModelParams(K=np.array([0.3]), Lam=np.array([[50.0]]), rho=40.0)
    ds = model.synth_generate(RngStream(50), truth, profiles)
    hp = model.HyperParams(a0=2.0, b0=0.2, q0=0.5, n0=3, K0=np.array([1 / 3]), Lambda0=np.array([[50.0]]))
    mom = oracles.oracle_posterior_mean(ds, hp, res=320)
    cfg = gibbs.ChainConfig(iterations=22_000, burn_in=2_000, thin=1, seed=7)
    chain = gibbs.gibbs_run(RngStream(7), ds, hp, cfg)
    se_k = chain.K[:, 0].std(ddof=1) / np.sqrt(gibbs.ess(chain.K[:, 0]))
    se_r = chain.rho.std(ddof=1) / np.sqrt(gibbs.ess(chain.rho))
    z_k = (chain.K.mean() - mom.e_k) / se_k
    z_r = (chain.rho.mean() - mom.e_rho) / se_r
    quad_ok = abs(z_k) < 3.0 and abs(z_r) < 3.0

    # prior-reproduction (successive-conditional) check at alpha = 0.001
    V = 5
    profiles5 = [
        model.ExpressionProfile(np.array(v, dtype=float))
        for v in ([1, 0], [0, 1], [1, 0], [0, 1], [1, 0])
    ]
    base = model.transform([model.RawRecord(0.0, p) for p in profiles5])
    hpg = model.HyperParams(a0=2.0, b0=1.0, q0=1.0, n0=7, K0=np.array([0.3]), Lambda0=np.array([[2.0]]))
    M = 40_000
    u = RngStreamSet.for_batch(1000, M).normals(hpg.n0)
    lam_prior = hpg.Lambda0[0, 0] * np.sum(u**2, axis=1)
    k_prior = hpg.K0[0] + RngStream(1001).normals(M) / np.sqrt(hpg.q0 * lam_prior)
    rho_prior = np.asarray(sample_gamma(RngStream(1002), GammaParams(hpg.a0, hpg.b0), size=M))

    rng = RngStream(2000)
    streams = RngStreamSet.for_batch(2000, V, base=500_000)
    lam0 = sample_wishart(rng, WishartParams(hpg.n0, hpg.Lambda0))
    k0 = sample_mvn(rng, hpg.K0, hpg.q0 * lam0, mode="precision")
    rho0 = float(sample_gamma(rng, GammaParams(hpg.a0, hpg.b0)))
    beta0 = np.stack([sample_mvn(rng, k0, lam0, mode="precision") for _ in range(V)])
    state = gibbs.ChainState(K=k0, Lam=lam0, rho=rho0, beta=beta0)
    N = 15_000
    k_c = np.empty(N)
    lam_c = np.empty(N)
    rho_c = np.empty(N)
    for n in range(N):
        eps = rng.normals(V) / np.sqrt(state.rho)
        r = np.einsum("vd,vd->v", base.D, state.beta) + base.mu + eps
        ds_n = model.Dataset(r=r, mu=base.mu, D=base.D, n_networks=2)
        state = gibbs.gibbs_step(rng, state, ds_n, hpg, streams=streams)
        k_c[n], lam_c[n], rho_c[n] = state.K[0], state.Lam[0, 0], state.rho

    def zstat(prior_x, chain_x):
        se1 = prior_x.std(ddof=1) / np.sqrt(len(prior_x))
        se2 = chain_x.std(ddof=1) / np.sqrt(gibbs.ess(chain_x))
        return (prior_x.mean() - chain_x.mean()) / np.sqrt(se1**2 + se2**2)

    zs = [
        zstat(k_prior, k_c),
        zstat(k_prior**2, k_c**2),
        zstat(lam_prior, lam_c),
        zstat(lam_prior**2, lam_c**2),
        zstat(rho_prior, rho_c),
        zstat(rho_prior**2, rho_c**2),
    ]
    geweke_ok = all(abs(z) < 3.29 for z in zs)
    ok = quad_ok and geweke_ok
    report(
        6,
        ok,
        f"quadrature z_K={z_k:+.2f} z_rho={z_r:+.2f} (|z|<3); "
        f"prior-reproduction max |z|={max(abs(z) for z in zs):.2f} (crit 3.29)",
    )
    assert quad_ok
    assert geweke_ok


def test_c07_sampler_statistics():
    n = 1_000_000
    big = sample_gamma(RngStream(10), GammaParams(2000.5, 1.0), size=n)
    mean_ok = abs(big.mean() - 2000.5) < 3.0 * np.sqrt(2000.5 / n)

    unit = sample_gamma(RngStream(11), GammaParams(1.0, 1.0), size=200_000)
    var_ok = abs(unit.var() - 1.0) < 3.0 * np.sqrt(8.0 / 200_000)

    ks_ok = True
    for a, b in [(0.5, 0.5), (1.0, 1.0), (2000.5, 1.0)]:
        draws = sample_gamma(RngStream(13), GammaParams(a, b), size=10_000)
        ks_ok &= stats.kstest(draws, stats.gamma(a, scale=1.0 / b).cdf).pvalue > 0.001

    u = RngStreamSet.for_batch(32, 100_000).normals(20).reshape(100_000, 10, 2)
    R = linalg.cholesky_batched(np.eye(2) / 10.0)
    S = u @ R.T
    wish_mean = np.einsum("mnd,mne->mde", S, S).mean(axis=0)
    wish_ok = np.linalg.norm(wish_mean - np.eye(2)) < 0.05

    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    L = linalg.cholesky_batched(cov)
    z = RngStreamSet.for_batch(21, 100_000).normals(2) @ L.T + np.array([5.0, 7.0])
    mvn_mean_ok = np.all(np.abs(z.mean(0) - [5.0, 7.0]) < 3.0 * np.sqrt(2.0 / 100_000))
    mvn_cov_ok = np.linalg.norm(np.cov(z.T) - cov) < 0.05 * np.linalg.norm(cov)

    ok = mean_ok and var_ok and ks_ok and wish_ok and mvn_mean_ok and mvn_cov_ok
    report(
        7,
        ok,
        f"gamma mean/var/KS={mean_ok}/{var_ok}/{ks_ok}, wishart moment={wish_ok}, "
        f"mvn mean/cov={mvn_mean_ok}/{mvn_cov_ok}",
    )
    assert ok


def test_c08_elbo_cross_validation():
    rng = RngStream(404)
    truth = model.ModelParams(K=TRUE_K, Lam=reference_lambda(), rho=TRUE_RHO)
    ds = model.synth_generate(rng, truth, model.random_profiles(rng, 5, 3))
    hp = model.default_hyperparams(3)
    state, _ = vb.vb_fit(ds, hp, max_iter=150)
    closed = vb.vb_elbo(state, ds, hp)
    mc = oracles.oracle_mc_elbo(state, ds, hp, 200_000, RngStream(808))
    z = (closed - mc.estimate) / mc.se
    ok = abs(z) < 3.0
    report(8, ok, f"closed={closed:.4f} mc={mc.estimate:.4f} se={mc.se:.4f} z={z:+.2f}")
    assert ok


def test_c09_parallel_correctness_scaling():
    hp = model.default_hyperparams(3)
    truth = model.ModelParams(K=TRUE_K, Lam=reference_lambda(), rho=TRUE_RHO)
    cores = os.cpu_count() or 1

    # correctness gate: serial and parallel estimates agree
    ds = table1_dataset(321)
    s1, _ = vb.vb_fit(ds, hp, max_iter=30, plan=linalg.ExecPlan(workers=1), compute_elbo=False, param_tol=0.0)
    s4, _ = vb.vb_fit(ds, hp, max_iter=30, plan=linalg.ExecPlan(workers=4), compute_elbo=False, param_tol=0.0)
    agree = np.allclose(s1.k0k, s4.k0k, rtol=1e-8) and np.isclose(s1.b_rho, s4.b_rho, rtol=1e-8)

    # serial scaling across the size sweep
    sizes = [4000, 5000, 6000, 7000, 8000]
    serial_times = []
    parallel_times = []
    for size in sizes:
        rng = RngStream(1234)
        dsv = model.synth_generate(rng, truth, model.random_profiles(rng, size, 3))

        def run_once(workers):
            t0 = time.perf_counter()
            vb.vb_fit(dsv, hp, max_iter=80, plan=linalg.ExecPlan(workers=workers),
                      compute_elbo=False, param_tol=0.0)
            return time.perf_counter() - t0

        run_once(1)  # warm-up discarded
        serial_times.append(median(run_once(1) for _ in range(5)))
        if cores >= 4:
            parallel_times.append(median(run_once(cores) for _ in range(5)))

    increasing = all(b > a for a, b in zip(serial_times, serial_times[1:]))
    detail = (
        f"serial/parallel estimates agree={agree}; serial seconds over {sizes}: "
        + "/".join(f"{t:.2f}" for t in serial_times)
        + f" increasing={increasing}"
    )
    if cores >= 4:
        speedups = [s / p for s, p in zip(serial_times, parallel_times)]
        speedup_ok = all(s > 1.0 for s in speedups)
        # parallel time grows more slowly than serial across the sweep
        sublinear = (parallel_times[-1] / parallel_times[0]) < (serial_times[-1] / serial_times[0]) * 1.1
        detail += f"; speedups={['%.2f' % s for s in speedups]} sublinear={sublinear}"
        ok = agree and increasing and speedup_ok and sublinear
        report(9, ok, detail)
        assert speedup_ok and sublinear
    else:
        detail += f"; speedup clauses skipped (host has {cores} core(s), criterion conditions on >= 4)"
        ok = agree and increasing
        report(9, ok, detail)
    assert agree
    assert increasing


def test_c10_boolean_network_semantics():
    rng = np.random.default_rng(99)
    override_ok = True
    ensemble_ok = True
    for trial in range(100):
        net = random_toy_net(rng, n_inputs=int(rng.integers(3, 7)), n_gates=int(rng.integers(3, 9)))
        node = str(rng.choice(list(net.gates)))
        stuck = int(rng.integers(0, 2))
        fault = boolnet.FaultMap({node: stuck})
        # exhaustive stimuli: the overridden node never moves
        for stim in all_stimuli(net):
            full = {**boolnet.evaluate(net, fault, stim)}
            if node in net.outputs and full[node] != stuck:
                override_ok = False
        # ensemble profiles against the independent recursive oracle
        faults = [fault, boolnet.FaultMap(), boolnet.FaultMap({net.inputs[0]: 1})]
        stimuli = list(itertools.islice(all_stimuli(net), 3))
        profiles = boolnet.profiles_for_ensemble(net, faults, stimuli)
        idx = 0
        for stim in stimuli:
            per_fault = [oracles.brute_force_evaluate(net, f, stim) for f in faults]
            for out in net.outputs:
                want = np.array([pf[out] for pf in per_fault], dtype=float)
                if not np.array_equal(profiles[idx].d, want):
                    ensemble_ok = False
                idx += 1
    ok = override_ok and ensemble_ok
    report(10, ok, f"100 random netlists: override invariance={override_ok}, ensemble vs truth-table={ensemble_ok}")
    assert ok


def test_c11_real_data_pipeline_shape(tmp_path):
    # the original 56-gene fibroblast dataset is not redistributable; this
    # exercises the exact pipeline shape on a mock of the same dimensions
    rng = RngStream(56)
    truth = model.ModelParams(K=np.array([0.65, 0.28]), Lam=reference_lambda(), rho=5.0)
    ds = model.synth_generate(rng, truth, model.random_profiles(rng, 56, 3))
    path = tmp_path / "mock56.csv"
    cli.write_dataset_csv(str(path), ds)
    loaded = cli.read_dataset_csv(str(path))
    back = tmp_path / "mock56_back.csv"
    cli.write_dataset_csv(str(back), loaded)
    roundtrip_ok = path.read_bytes() == back.read_bytes() and loaded.V == 56 and loaded.n_networks == 3

    out = tmp_path / "fit"
    rc = cli.main(
        ["fit", "--method", "em", "--dataset", str(path), "--out", str(out), "--seed", "56"]
    )
    import json

    report_json = json.load(open(out / "report.json"))
    w = report_json["estimates"]["full_weights"]
    triple_ok = rc == 0 and len(w) == 3 and abs(sum(w) - 1.0) < 1e-9
    ok = roundtrip_ok and triple_ok
    report(11, ok, f"56-gene round-trip={roundtrip_ok}; report emits full-weight triple={triple_ok} (w={np.round(w, 3).tolist()})")
    assert ok
