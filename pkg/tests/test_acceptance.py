"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the
terminal summary) or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import math
import sys
import time
from pathlib import Path

import cvxpy as cp
import numpy as np
import pytest
import torch
from scipy.stats import norm

sys.path.insert(0, str(Path(__file__).parent))

from o3unlearn.backbone import (IGNORE_INDEX, forward, layer_reps, lm_cross_entropy, lm_loss, mask_tokens,  # noqa: E402
                                masked_lm_loss, mlm_loss)
from o3unlearn.bench.config import RunConfig  # noqa: E402
from o3unlearn.bench.metrics import U2R_UNDEFINED, auroc  # noqa: E402
from o3unlearn.bench.pipeline import Benchmark, build_report, evaluate, run_continual  # noqa: E402
from o3unlearn.bench.report import dumps_report  # noqa: E402
from o3unlearn.bench.state import load_state, save_state  # noqa: E402
from o3unlearn.detector import cel_loss  # noqa: E402
from o3unlearn.gate import GateConfig, MixedGaussian, _mixture_median, soft_weight, target_logits  # noqa: E402
from o3unlearn.lora import clone_adapters, orth_loss  # noqa: E402
from o3unlearn.numeric import finite_diff_grad, mahalanobis, relative_error  # noqa: E402
from o3unlearn.scoring import (Hypersphere, bank_from_reps, boundary_distance, cosine_distance,  # noqa: E402
                               fit_hypersphere, score_reps, svdd_dual_objective)

from helpers import flat_adapters, grads_to_flat, random_adapters, random_params, set_flat, tiny_config  # noqa: E402

SEEDS = (0, 1, 2)
RESULTS: list[str] = []


def record(n: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    RESULTS.append(line)
    print(line)


_RUN_SECONDS: dict[tuple, float] = {}


@functools.lru_cache(maxsize=None)
def continual_run(seed: int, lambda_orth: float = 0.1):
    torch.set_num_threads(1)
    cfg = RunConfig().replace(run__seed=seed, unlearn__lambda_orth=lambda_orth)
    t0 = time.perf_counter()
    state = run_continual(cfg)
    _RUN_SECONDS[(seed, lambda_orth)] = time.perf_counter() - t0
    return state


# ---------------------------------------------------------------- criterion 1

def _grad_case(kind: str, seed: int) -> float:
    r = np.random.default_rng(seed)
    if kind == "orth":
        prevs = [r.normal(size=(8, 3)) for _ in range(2)]
        cur = r.normal(size=(8, 3))
        _, g = orth_loss(prevs, cur)
        return relative_error(g, finite_diff_grad(lambda a: orth_loss(prevs, a)[0], cur))

    causal = kind == "ce"
    cfg = tiny_config(causal=causal, d_model=8, n_layers=2)
    params = random_params(cfg, seed=seed, scale=0.3)
    ad = random_adapters(cfg, seed=seed + 100)
    ids = r.integers(4, cfg.vocab_size, size=(3, 6))
    if kind == "ce":
        tgt = r.integers(4, cfg.vocab_size, size=(3, 6))
        tgt[:, :2] = IGNORE_INDEX
        _, grads = lm_cross_entropy(params, cfg, ad, ids, tgt)
        analytic = grads_to_flat(ad, grads)
        loss = lambda: lm_loss(params, cfg, ad, ids, tgt)  # noqa: E731
    elif kind == "mlm":
        masked, labels = mask_tokens(ids, 30, r)
        _, grads = mlm_loss(params, cfg, ad, masked, labels)
        analytic = grads_to_flat(ad, grads)
        loss = lambda: masked_lm_loss(params, cfg, ad, masked, labels)  # noqa: E731
    else:
        key = clone_adapters(random_adapters(cfg, seed=seed + 200))
        masked, _ = mask_tokens(ids, 30, r)
        with torch.no_grad():
            k_reps = layer_reps(params, cfg, torch.from_numpy(ids), key)
        tensors = [t for s in sorted(ad) for t in (ad[s].a, ad[s].b)]
        for t in tensors:
            t.requires_grad_(True)
        g = torch.autograd.grad(cel_loss(layer_reps(params, cfg, torch.from_numpy(masked), ad), k_reps), tensors)
        for t in tensors:
            t.requires_grad_(False)
        analytic = np.concatenate([x.numpy().ravel() for x in g])
        loss = lambda: cel_loss(layer_reps(params, cfg, torch.from_numpy(masked), ad), k_reps)  # noqa: E731

    x0 = flat_adapters(ad)

    def f(vec):
        set_flat(ad, vec)
        with torch.no_grad():
            return float(loss())

    fd = finite_diff_grad(f, x0)
    set_flat(ad, x0)
    return relative_error(analytic, fd)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {k: max(_grad_case(k, s) for s in range(5)) for k in ("ce", "orth", "cel", "mlm")}
    secs = time.perf_counter() - t0
    passed = all(v < 1e-4 for v in worst.values()) and secs < 60
    record(1, "gradient suite", passed,
           ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f" ({secs:.1f}s, limit 60s)")
    assert passed


# ---------------------------------------------------------------- criterion 2

def _brute_maha(x, samples):
    mu = samples.mean(axis=0)
    c = samples - mu
    cov = c.T @ c / len(samples)
    d = len(mu)
    eps = max(1e-6 * np.trace(cov) / d, 1e-10)
    inv = np.linalg.inv(cov + eps * np.eye(d))
    diff = x - mu
    return sum(diff[i] * inv[i, j] * diff[j] for i in range(d) for j in range(d))


def _brute_cos(x, bank):
    return -max(float(np.dot(x, row)) / (math.sqrt(np.dot(x, x)) * math.sqrt(np.dot(row, row))) for row in bank)


def _mix_cdf(d, m):
    return 0.5 * norm.cdf((d - m.mu_used) / m.sigma_used) + 0.5 * norm.cdf((d - m.mu_rest) / m.sigma_rest)


def _random_mixture(r):
    m1, m2 = r.normal(0, 5, size=2)
    s1, s2 = r.uniform(0.2, 5.0, size=2)
    return MixedGaussian(m1, s1, m2, s2, _mixture_median(m1, s1, m2, s2))


def test_criterion_2_scoring_oracles():
    t0 = time.perf_counter()
    err = dict.fromkeys(("maha", "cos", "score", "boundary", "soft", "auroc"), 0.0)
    gamma = 1000.0
    for case in range(100):
        r = np.random.default_rng(1000 + case)
        L, n, d = 2, 15, 4
        reps = r.normal(size=(n, L, d))
        bank = bank_from_reps(reps)
        x = r.normal(size=(L, d))
        s = score_reps(x, bank, gamma)[0]
        for l in range(L):
            m_ref = _brute_maha(x[l], reps[:, l, :])
            c_ref = _brute_cos(x[l], reps[:, l, :])
            err["maha"] = max(err["maha"], abs(mahalanobis(x[l], bank.stats[l]) - m_ref) / max(1.0, abs(m_ref)))
            err["cos"] = max(err["cos"], abs(cosine_distance(x[l], reps[:, l, :]) - c_ref))
            err["score"] = max(err["score"], abs(s[l] - (m_ref + gamma * c_ref)) / max(1.0, abs(s[l])))
        c, radius = r.normal(size=L), abs(r.normal())
        h = Hypersphere(c, radius, 0.1, np.ones(1))
        err["boundary"] = max(err["boundary"], abs(boundary_distance(s, h) - (math.sqrt(sum((s - c) ** 2)) - radius)))
        mix = _random_mixture(r)
        dv = r.normal(mix.center, 3.0)
        p, q = _mix_cdf(dv, mix), _mix_cdf(2 * mix.center - dv, mix)
        w_ref = 1.0 / (1.0 + math.exp(-10.0 * (1.0 - max(p, q) + min(p, q))))
        err["soft"] = max(err["soft"], abs(soft_weight(dv, mix, 10.0) - w_ref))
        a, b = r.normal(size=40), r.normal(0.3, 1.0, size=30).round(1)
        brute = sum((y > v) + 0.5 * (y == v) for v in a for y in b) / (len(a) * len(b))
        err["auroc"] = max(err["auroc"], abs(auroc(a, b) - brute))
    secs = time.perf_counter() - t0
    tol = {"maha": 1e-9, "cos": 1e-12, "score": 1e-9, "boundary": 1e-12, "soft": 1e-12, "auroc": 1e-12}
    passed = all(err[k] <= tol[k] for k in tol) and secs < 60
    record(2, "scoring oracles (100 cases)", passed,
           ", ".join(f"{k} {err[k]:.1e}/{tol[k]:.0e}" for k in tol) + f" ({secs:.1f}s)")
    assert passed


# ---------------------------------------------------------------- criterion 3

def _qp_objective(points, nu):
    n = len(points)
    a = cp.Variable(n)
    diag = np.einsum("ij,ij->i", points, points)
    prob = cp.Problem(cp.Maximize(diag @ a - cp.sum_squares(points.T @ a)),
                      [a >= 0, a <= min(1.0, 1.0 / (nu * n)), cp.sum(a) == 1])
    prob.solve()
    return prob.value


def test_criterion_3_svdd():
    t0 = time.perf_counter()
    nu, n = 0.1, 30
    gaps, fracs = [], []
    for seed in range(20):
        pts = np.random.default_rng(seed).normal(size=(n, 4))
        h = fit_hypersphere(pts, nu)
        gaps.append(abs(svdd_dual_objective(pts, h.duals) - _qp_objective(pts, nu)))
        fracs.append(float(np.mean(boundary_distance(pts, h) > 1e-9)))
    secs = time.perf_counter() - t0
    passed = max(gaps) <= 1e-4 and max(fracs) <= nu + 2 / n and secs < 60
    record(3, "SVDD vs dense QP", passed,
           f"max objective gap {max(gaps):.1e} (tol 1e-4), max outlier fraction {max(fracs):.3f} "
           f"(limit {nu + 2 / n:.3f}) over 20 seeds ({secs:.1f}s)")
    assert passed


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_soft_weight():
    r = np.random.default_rng(4)
    zeta = 10.0
    center_err = refl_err = far_err = 0.0
    for _ in range(10):
        mix = _random_mixture(r)
        center_err = max(center_err, abs(soft_weight(mix.center, mix, zeta) - 1.0 / (1.0 + math.exp(-zeta))))
        d = r.normal(mix.center, 10.0, size=1000)
        refl_err = max(refl_err, float(np.max(np.abs(soft_weight(d, mix, zeta)
                                                     - soft_weight(2 * mix.center - d, mix, zeta)))))
        sigma = max(mix.sigma_used, mix.sigma_rest)
        for dv in (mix.center + 50 * sigma, mix.center - 50 * sigma):
            far_err = max(far_err, abs(soft_weight(dv, mix, zeta) - 0.5))
    passed = center_err <= 1e-9 and refl_err <= 1e-12 and far_err <= 1e-6
    record(4, "soft-weight analytics", passed,
           f"center {center_err:.1e} (1e-9), reflection {refl_err:.1e} (1e-12), far field {far_err:.1e} (1e-6)")
    assert passed


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_ood_separation():
    runs = [continual_run(s) for s in SEEDS]
    secs = sum(_RUN_SECONDS[(s, 0.1)] for s in SEEDS)
    T = len(runs[0].stages)
    means = {(t, k): float(np.mean([r.stages[t - 1]["auroc"][k] for r in runs]))
             for t in range(1, T + 1) for k in ("rd", "u1", "u2")}
    worst = min(means.values())
    passed = worst >= 0.90 and secs < 600
    record(5, "OOD separation", passed,
           f"min seed-averaged AUROC {worst:.3f} (>= 0.90) over {T} requests x rd/u1/u2; "
           + "; ".join(f"t{t}: " + "/".join(f"{means[(t, k)]:.3f}" for k in ("rd", "u1", "u2"))
                       for t in range(1, T + 1))
           + f" ({secs:.0f}s incl. unlearning, limit 600s)")
    assert passed


# ---------------------------------------------------------------- criterion 6

def _continual_failures(state) -> list[str]:
    base, final = state.base, state.stages[-1]
    bad = []
    for t in range(len(state.stages)):
        for key in ("su", "du"):
            if not final[key][t] <= 0.5 * base[key][t]:
                bad.append(f"{key}{t + 1} {final[key][t]:.3f} > 0.5 x {base[key][t]:.3f}")
    for key in ("rd", "u1", "u2"):
        if abs(final[key] - base[key]) > 0.05 + 1e-12:
            bad.append(f"{key} {base[key]:.3f} -> {final[key]:.3f}")
    ratio = build_report(state)["u2r"]
    if ratio == U2R_UNDEFINED:
        num = sum(base["su"]) + sum(base["du"]) - sum(final["su"]) - sum(final["du"])
        if not num > 0:
            bad.append("u2r undefined with no unlearning gain")
    elif not ratio > 0:
        bad.append(f"u2r {ratio:.3f} <= 0")
    return bad


def test_criterion_6_continual():
    runs = {s: continual_run(s) for s in SEEDS}
    secs = sum(_RUN_SECONDS[(s, 0.1)] for s in SEEDS)
    fails = {s: _continual_failures(r) for s, r in runs.items()}
    passed = not any(fails.values()) and secs < 1800
    parts = []
    for s, r in runs.items():
        f = r.stages[-1]
        u = build_report(r)["u2r"]
        tag = "ok" if not fails[s] else "violations: " + ", ".join(fails[s])
        parts.append(f"seed {s}: su {[round(v, 3) for v in f['su']]} du {[round(v, 3) for v in f['du']]} "
                     f"rd/u1/u2 {f['rd']:.2f}/{f['u1']:.2f}/{f['u2']:.2f} u2r "
                     f"{u if isinstance(u, str) else round(u, 2)} [{tag}]")
    record(6, "continual unlearning (T=3, 3 seeds)", passed, "; ".join(parts) + f" ({secs:.0f}s)")
    assert passed


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_orthogonality():
    parts, ok = [], True
    for s in SEEDS:
        with_orth, without = continual_run(s, 0.1), continual_run(s, 0.0)
        o1 = [st["orth_to_previous"] for st in with_orth.stages[1:]]
        o0 = [st["orth_to_previous"] for st in without.stages[1:]]
        rd1, rd0 = with_orth.stages[-1]["rd"], without.stages[-1]["rd"]
        good = all(a <= 0.5 * b for a, b in zip(o1, o0)) and rd1 >= rd0
        ok &= good
        parts.append(f"seed {s}: orth t2/t3 {o1[0]:.3g}/{o1[1]:.3g} vs {o0[0]:.3g}/{o0[1]:.3g}, "
                     f"rd {rd1:.2f} vs {rd0:.2f} [{'ok' if good else 'violated'}]")
    record(7, "orthogonality ablation (lambda 0.1 vs 0)", ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_gates():
    state = continual_run(0)
    bench = Benchmark.from_config(state.cfg)
    soft = state.stages[-1]
    hard = evaluate(state, bench, gated=True, gate=GateConfig(state.cfg.gate.zeta, "hard"))
    T = len(soft["su"])
    soft_sum = float(np.mean([soft["su"][t] + soft["du"][t] for t in range(T)]))
    hard_sum = float(np.mean([hard["su"][t] + hard["du"][t] for t in range(T)]))
    gate_ok = soft_sum <= hard_sum + 0.02

    prompts = bench.utility_sets()["rd"].prompts[:32]
    ids = torch.from_numpy(np.concatenate([np.full((32, 1), 2), prompts], axis=1))
    with torch.no_grad():
        base = forward(state.target_params, state.target_cfg, ids)[0][:, -1, :].numpy()
        full = forward(state.target_params, state.target_cfg, ids, state.stack.current, 1.0)[0][:, -1, :].numpy()
    w0 = target_logits(state.target_params, state.target_cfg, prompts, state.stack.current, 0.0)
    w1 = target_logits(state.target_params, state.target_cfg, prompts, state.stack.current, 1.0)
    sweep = [target_logits(state.target_params, state.target_cfg, prompts, state.stack.current, w)
             for w in (0.25, 0.5, 0.75)]
    sweep_ok = np.array_equal(w0, base) and np.array_equal(w1, full) and all(np.isfinite(x).all() for x in sweep)
    passed = gate_ok and sweep_ok
    record(8, "hard vs soft gate", passed,
           f"mean S.U.+D.U. soft {soft_sum:.3f} vs hard {hard_sum:.3f} (soft <= hard + 0.02); hard rd/u1/u2 "
           f"{hard['rd']:.2f}/{hard['u1']:.2f}/{hard['u2']:.2f}; w=0 bit-exact base {np.array_equal(w0, base)}, "
           f"w=1 bit-exact full {np.array_equal(w1, full)}")
    assert passed


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_determinism(tmp_path):
    reference = continual_run(0)
    ref_report = dumps_report(build_report(reference))
    again = run_continual(RunConfig().replace(run__seed=0))
    same_report = dumps_report(build_report(again)) == ref_report

    p1, p2 = tmp_path / "a.o3s", tmp_path / "b.o3s"
    save_state(p1, reference)
    save_state(p2, load_state(p1))
    loaded = load_state(p1)
    bit_exact = p1.read_bytes() == p2.read_bytes() and all(
        torch.equal(loaded.target_params[k], reference.target_params[k]) for k in reference.target_params)

    partial = run_continual(RunConfig().replace(run__seed=0), until=2)
    p3 = tmp_path / "after2.o3s"
    save_state(p3, partial)
    resumed = run_continual(partial.cfg, state=load_state(p3))
    resume_ok = dumps_report(build_report(resumed)) == ref_report

    passed = same_report and bit_exact and resume_ok
    record(9, "determinism and persistence", passed,
           f"identical reports {same_report}, save/load bit-exact {bit_exact}, resume after request 2 {resume_ok}")
    assert passed


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
