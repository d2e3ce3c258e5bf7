"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
terminal summary, sorted by criterion number.
"""

import itertools
import time
from collections import Counter

import numpy as np
import pytest

import conftest
from specedge import harness
from specedge.draft import DraftParams, build_draft_tree
from specedge.harness import PricingConfig, Trace, compute_metrics, cost_efficiency
from specedge.lm import NGramModel, TableModel, random_ngram, session_prompt, verify_stream
from specedge.messages import VerifyRequest
from specedge.proactive import ALL_LEAVES, SINGLE_BEST, expected_gain, measure_gain_components
from specedge.scheduler import VerifyQueue, batch_verify, calibrate_draft_depth, plan_batch
from specedge.simnet import LatencyModel, SimConfig, run_simulation, work_conserving
from specedge.verify import autoregressive_dist, enumerate_emission_dist, tv_distance, verify_tree

GREEDY = TableModel([0.1, 0.2, 0.6, 0.1], temperature=1e-9)


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")


def _model(kind: str, vocab: int, rng: np.random.Generator):
    if kind == "table":
        return TableModel(rng.dirichlet(np.full(vocab, 0.5)))
    rows = {(t,): rng.dirichlet(np.full(vocab, 0.5)) for t in range(vocab)}
    # zero out a few entries so rejections hit sparse supports
    for key in list(rows)[::2]:
        row = rows[key].copy()
        row[rng.integers(vocab)] = 0.0
        rows[key] = row / row.sum()
    return NGramModel(vocab, 1, rows)


def test_exact_losslessness():
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for vocab in (2, 3, 4):
        for tk, dk in itertools.product(("table", "ngram"), repeat=2):
            rng = np.random.default_rng(1000 * vocab + 10 * len(tk) + len(dk))
            target, draft = _model(tk, vocab, rng), _model(dk, vocab, rng)
            for horizon, budget, branching, depth in itertools.product((1, 2, 3), (1, 3, 8), (1, 2), (1, 3)):
                if branching > vocab:
                    continue
                dist = enumerate_emission_dist(target, draft, [0], DraftParams(budget, branching, depth), horizon)
                worst = max(worst, tv_distance(dist, autoregressive_dist(target, [0], horizon)))
                cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5
    record(1, ok, f"max TV {worst:.2e} over {cases} cases in {elapsed:.2f} s (need < 1e-9, < 5 s)")
    assert ok


def test_statistical_losslessness():
    vocab, horizon, per, total = 3, 3, 2000, 100_000
    target = random_ngram(vocab, 1, np.random.default_rng(11), temperature=0.9)
    draft = random_ngram(vocab, 1, np.random.default_rng(12))
    # latency does not change what is emitted; a short verify keeps proactive work to one pass
    lat = LatencyModel(rtt_ms=0.0, verify_ms=1.0, verify_slope=0.0)
    counts, expected = Counter(), Counter()
    t0 = time.perf_counter()
    for batch in range(total // per):
        res = run_simulation(SimConfig(target, draft, seed=batch, sessions=per, prompt_len=1,
                                       max_new_tokens=horizon, budget=4, branching=2, depth_policy="fixed",
                                       depth=2, verify_capacity=per, latency=lat))
        counts.update(res.outputs.values())
        prompts = Counter(session_prompt(batch, s, 1, vocab) for s in range(per))
        for prompt, n in prompts.items():
            for seq, p in autoregressive_dist(target, list(prompt), horizon).items():
                expected[seq] += p * n
    elapsed = time.perf_counter() - t0
    tv = tv_distance({k: v / total for k, v in counts.items()}, {k: v / total for k, v in expected.items()})
    ok = tv <= 0.01 and elapsed < 30
    record(2, ok, f"TV {tv:.4f} over {total} runs in {elapsed:.1f} s (need <= 0.01, < 30 s)")
    assert ok


def test_depth_calibration():
    got = [calibrate_draft_depth(94.2, 11, rtt) for rtt in (15, 40, 50)]
    ok = got == [7, 5, 4]
    record(3, ok, f"depths {got} at rtt 15/40/50 (need [7, 5, 4])")
    assert ok


def test_pipeline_doubling():
    t0 = time.perf_counter()
    lat = LatencyModel(rtt_ms=15.0, verify_ms=94.2, draft_pass_ms=11.0)

    def metrics(mode, sessions):
        res = run_simulation(SimConfig(GREEDY, GREEDY, mode=mode, sessions=sessions, max_new_tokens=1024,
                                       latency=lat))
        return compute_metrics(Trace.from_result(res), warmup_rounds=1)

    pipe, solo = metrics("specedge", 2), metrics("server_only_sd", 1)
    ratio = (pipe.server_throughput / pipe.tpv_mean) / (solo.server_throughput / solo.tpv_mean)
    elapsed = time.perf_counter() - t0
    ok = 1.9 <= ratio <= 2.1 and pipe.server_busy_fraction >= 0.95 and elapsed < 5
    record(4, ok, f"throughput ratio at equal tokens/verify {ratio:.3f}, busy {pipe.server_busy_fraction:.3f},"
                  f" {elapsed:.2f} s (need [1.9, 2.1], >= 0.95, < 5 s)")
    assert ok


def test_proactive_gain():
    def sim(mode, seed, policy=SINGLE_BEST):
        return run_simulation(SimConfig(GREEDY, GREEDY, mode=mode, seed=seed, max_new_tokens=128,
                                        proactive_policy=policy))

    def tpv(res):
        return np.mean([r.accepted_len + 1 for r in res.rounds])

    margins = [tpv(sim("specedge", s)) - tpv(sim("disagg_naive", s)) for s in range(10)]

    def gain(policy):
        g = measure_gain_components(sim("specedge", 0, policy).rounds)
        return expected_gain(g.p_align, g.p_match_given_align, g.t_draft, g.h_expan).expected_gain

    best, leaves = gain(SINGLE_BEST), gain(ALL_LEAVES)
    ok = min(margins) > 0 and best >= leaves
    record(5, ok, f"min tokens/verify margin {min(margins):.3f} over 10 seeds; gain single_best {best:.3f}"
                  f" vs all_leaves {leaves:.3f} (need > 0, >=)")
    assert ok


def test_cost_formula():
    pricing = PricingConfig(4.05, 0.35, 2)
    server = cost_efficiency(31.78, pricing, server_only=True)
    edge = cost_efficiency(66.54, pricing)
    errs = (abs(server - 28.25) / 28.25, abs(edge - 50.60) / 50.60)
    ok = max(errs) <= 0.015
    record(6, ok, f"{server:.2f} vs 28.25, {edge:.2f} vs 50.60 k tok/$ (errors {errs[0]:.2%}, {errs[1]:.2%};"
                  f" need <= 1.5%)")
    assert ok


def test_batch_equals_solo():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    members = mismatched = 0
    for _ in range(1000):
        vocab = int(rng.integers(2, 7))
        target = random_ngram(vocab, 2, rng, temperature=float(rng.uniform(0.5, 1.5)))
        draft = random_ngram(vocab, 2, rng)
        seed = int(rng.integers(2**31))
        queue, ctx = VerifyQueue(), {}
        for s in range(int(rng.integers(1, 7))):
            ctx[s] = rng.integers(0, vocab, int(rng.integers(1, 13))).tolist()
            params = DraftParams(int(rng.integers(1, 13)), int(rng.integers(1, 3)), int(rng.integers(1, 5)))
            queue.admit(VerifyRequest(s, 1, build_draft_tree(draft, ctx[s], params)))
        plan = plan_batch(queue, len(ctx))
        rngs = {s: verify_stream(seed, s) for s in ctx}
        for resp, req in zip(batch_verify(plan, target, ctx, rngs), plan.members):
            solo = verify_tree(target, ctx[req.session], req.tree, verify_stream(seed, req.session))
            members += 1
            mismatched += resp.outcome != solo
    elapsed = time.perf_counter() - t0
    ok = mismatched == 0 and elapsed < 10
    record(7, ok, f"{mismatched} of {members} members differ across 1000 batches in {elapsed:.2f} s"
                  f" (need 0, < 10 s)")
    assert ok


def _sweep_configs():
    cfg = harness.load_config(None)
    target = harness.build_model(cfg, "target")
    draft = harness.build_model(cfg, "draft", target)
    rng = np.random.default_rng(8)
    out = []
    for i in range(16):
        lat = LatencyModel(rtt_ms=float(rng.uniform(0, 60)), rtt_jitter=float(rng.uniform(0, 0.5)))
        out.append(SimConfig(target, draft, seed=i, sessions=int(rng.integers(1, 6)),
                             verify_capacity=int(rng.integers(1, 4)), max_new_tokens=48, latency=lat))
    # lockstep baselines hold work back by design, so only their single-session form is swept
    for mode in ("server_only_sd", "server_only_ar", "layer_split_ar", "disagg_naive"):
        out.append(SimConfig(target, draft, mode=mode, seed=20, max_new_tokens=48))
    return out


def test_work_conservation():
    results = [work_conserving(run_simulation(c)) for c in _sweep_configs()]
    ok = len(results) == 20 and all(results)
    record(8, ok, f"{sum(results)} of {len(results)} configs never idle with a queued request (need 20 of 20)")
    assert ok


def test_sim_wire_agreement():
    rng = np.random.default_rng(9)
    agree = 0
    for _ in range(10):
        over = {"seed": int(rng.integers(1000)), "sessions": int(rng.integers(1, 4)),
                "max_new_tokens": int(rng.integers(8, 33)), "rtt_ms": float(rng.uniform(0, 50)),
                "tree.budget": int(rng.integers(4, 33)), "verify_capacity": int(rng.integers(1, 4))}
        sim = harness.run_one(harness.load_config(None, over))
        wire = harness.run_one(harness.load_config(None, {**over, "transport": "wire"}))
        agree += sim.outputs == wire.outputs
    ok = agree == 10
    record(9, ok, f"{agree} of 10 random configs commit identical tokens per session (need 10 of 10)")
    assert ok


RTTS = (15, 20, 30, 40, 50)
RATIO_TOL = 0.15


def _itl(mode: str, rtt: float) -> float:
    vals = []
    for seed in range(5):
        cfg = harness.load_config(None, {"mode": mode, "rtt_ms": rtt, "seed": seed})
        out = harness.run_one(cfg)
        vals.append(harness.summarize(out.meta, out.trace)["itl_mean_ms"])
    return float(np.mean(vals))


def test_rtt_sensitivity_shape():
    ratios = {}
    for rtt in RTTS:
        ratios[rtt] = _itl("specedge", rtt) / _itl("server_only_sd", rtt)
    split = _itl("layer_split_ar", 15) / _itl("specedge", 15)
    beats = all(r < 1 + RATIO_TOL for r in ratios.values())
    ok = beats and split >= 2.5 * (1 - RATIO_TOL)
    shown = ", ".join(f"{k}:{v:.3f}" for k, v in ratios.items())
    record(10, ok, f"specedge/server_only ITL by rtt {{{shown}}}; layer_split/specedge at 15 = {split:.2f}"
                   f" (need every ratio < 1 within 15%, split >= 2.5 within 15%)")
    assert ok
