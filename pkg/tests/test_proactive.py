from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from specedge.draft import DraftParams, best_path, build_draft_tree
from specedge.lm import TableModel
from specedge.messages import VerifyResponse
from specedge.proactive import (ACCELERATED, ALL_LEAVES, DEEPER, SINGLE_BEST, Alignment, InFlight, RoundRecord,
                                check_alignment, expected_gain, fresh_passes, measure_gain_components,
                                new_session, post_verify_update, proactive_expand, proactive_pass_limit,
                                select_expansion_heads)
from specedge.simnet import SimConfig, run_simulation
from specedge.verify import VerifyOutcome

Q = TableModel([0.5, 0.25, 0.125, 0.125])
GREEDY = TableModel([0.1, 0.2, 0.6, 0.1], temperature=1e-9)


def inflight(tree, prompt=(1,), seq=1):
    return replace(new_session(0, prompt), inflight=InFlight(seq, tree))


def test_single_best_head_is_best_path_leaf():
    tree = build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2))
    [head] = select_expansion_heads(tree, SINGLE_BEST)
    assert tree.path(head) == best_path(tree) == (0, 0)


def test_chain_has_one_head_under_both_policies():
    tree = build_draft_tree(GREEDY, [1], DraftParams(budget=3, branching=1, depth=3))
    assert select_expansion_heads(tree, SINGLE_BEST) == select_expansion_heads(tree, ALL_LEAVES)


def test_full_binary_tree_all_leaves():
    tree = build_draft_tree(TableModel([0.3, 0.3, 0.2, 0.2]), [1], DraftParams(budget=6, branching=2, depth=2))
    assert len(select_expansion_heads(tree, ALL_LEAVES)) == 4


def test_zero_passes_drafts_nothing():
    tree = build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2))
    pro = proactive_expand(Q, inflight(tree), select_expansion_heads(tree), 0, 2, 32)
    assert pro.t_draft == 0


def greedy_chain_case():
    tree = build_draft_tree(GREEDY, [1], DraftParams(budget=2, branching=1, depth=2))
    state = inflight(tree)
    heads = select_expansion_heads(tree)
    pro = proactive_expand(GREEDY, state, heads, 2, 1, 32)
    return tree, state, pro


def test_greedy_chain_proactive_continuation():
    tree, _, pro = greedy_chain_case()
    new = [pro.tree.path(i)[len(best_path(tree)):] for i in range(pro.first, len(pro.tree))]
    assert new == [(2,), (2, 2)]
    assert pro.t_draft == 2


def test_all_leaves_budget_split_across_heads():
    tree = build_draft_tree(TableModel([0.3, 0.3, 0.2, 0.2]), [1], DraftParams(budget=6, branching=2, depth=2))
    heads = select_expansion_heads(tree, ALL_LEAVES)
    pro = proactive_expand(Q, inflight(tree), heads, 1, 1, 4)
    parents = sorted(pro.tree.nodes[i].parent for i in range(pro.first, len(pro.tree)))
    assert parents == sorted(heads)


def test_complete_alignment_preserves_branch():
    tree, state, pro = greedy_chain_case()
    align = check_alignment(state.committed, VerifyOutcome((2, 2), 2), pro)
    assert align.status is Alignment.COMPLETE
    assert align.preserved_tokens == 2


def test_no_proactive_tree_is_miss():
    assert check_alignment((1,), VerifyOutcome((2,), 2), None).status is Alignment.MISS


def test_prefix_acceptance_is_miss():
    tree, state, pro = greedy_chain_case()
    align = check_alignment(state.committed, VerifyOutcome((2,), 0), pro)
    assert align.status is Alignment.MISS and not align.path_aligned


def test_wrong_bonus_is_path_aligned_miss():
    tree, state, pro = greedy_chain_case()
    align = check_alignment(state.committed, VerifyOutcome((2, 2), 3), pro)
    assert align.status is Alignment.MISS and align.path_aligned


def test_miss_rebuilds_from_scratch():
    tree, state, pro = greedy_chain_case()
    out = VerifyOutcome((2,), 0)
    nxt = post_verify_update(replace(state, proactive=pro), VerifyResponse(0, 1, out),
                             check_alignment(state.committed, out, pro))
    assert nxt.committed == (1, 2, 0) and nxt.seed is None and nxt.inflight is None
    assert fresh_passes(nxt, 7, ACCELERATED) == fresh_passes(nxt, 7, DEEPER) == 7


def test_aligned_round_bookkeeping():
    tree, state, pro = greedy_chain_case()
    out = VerifyOutcome((2, 2), 2)
    align = check_alignment(state.committed, out, pro)
    nxt = post_verify_update(replace(state, proactive=pro), VerifyResponse(0, 1, out), align)
    assert nxt.committed == (1, 2, 2, 2)
    assert nxt.preserved == 2
    assert [n.token for n in nxt.seed.nodes] == [2]
    assert fresh_passes(nxt, 7, ACCELERATED) == 5
    assert fresh_passes(nxt, 7, DEEPER) == 7


def test_bonus_only_round_commits_one_token():
    state = inflight(build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2)))
    out = VerifyOutcome((), 3)
    nxt = post_verify_update(state, VerifyResponse(0, 1, out), check_alignment(state.committed, out, None))
    assert nxt.committed == (1, 3)


def test_stale_response_rejected():
    from specedge.errors import ProtocolError
    state = inflight(build_draft_tree(Q, [1], DraftParams(budget=3, branching=2, depth=2)))
    with pytest.raises(ProtocolError):
        post_verify_update(state, VerifyResponse(0, 9, VerifyOutcome((), 3)), check_alignment((1,), VerifyOutcome((), 3), None))


def test_expected_gain_examples():
    assert expected_gain(0.5, 0.5, 8, 1).expected_gain == pytest.approx(1.75)
    assert expected_gain(0.9, 0.3, 4, 4).expected_gain == 0
    assert expected_gain(0.0, 0.7, 9, 2).expected_gain == 0


@pytest.mark.parametrize("args", [(0.5, 0.5, 8, 0), (1.2, 0.5, 8, 1), (0.5, 0.5, -1, 1)])
def test_expected_gain_rejects_bad_inputs(args):
    with pytest.raises(ValueError):
        expected_gain(*args)


def test_pass_limit():
    assert proactive_pass_limit(15, 94.2, 11, 7) == 7
    assert proactive_pass_limit(0, 20, 11, 7) == 2


def sim(target, draft, **kw):
    return run_simulation(SimConfig(target, draft, max_new_tokens=kw.pop("max_new_tokens", 64), **kw))


def test_identical_greedy_models_always_align():
    gain = measure_gain_components(sim(GREEDY, GREEDY).rounds)
    assert gain.p_align == 1.0 and gain.p_match_given_align == 1.0


def test_disjoint_support_never_aligns():
    res = sim(TableModel([0.0, 0.0, 0.5, 0.5]), TableModel([0.5, 0.5, 0.0, 0.0]))
    assert measure_gain_components(res.rounds).p_align == 0.0


def test_components_are_hand_counted_frequencies():
    rows = []
    flags = [(True, True), (True, False), (False, False), (True, True), (False, False)]
    for i, (pa, al) in enumerate(flags):
        rows.append(RoundRecord(0, i, 0.0, 1.0, 3, 3, 5, 2, 0, pa, al, 2 if al else 0, 6, 1))
    rows.append(RoundRecord(0, 5, 0.0, 1.0, 3, 3, 5, 2, 0, False, False, 0, 0, 0))  # no expansion: excluded
    g = measure_gain_components(rows)
    assert (g.p_align, g.p_match_given_align, g.t_draft, g.h_expan) == (3 / 5, 2 / 3, 6, 1)
    assert measure_gain_components(rows, window=2).p_align == 0.5


def test_proactive_beats_naive_on_identical_greedy_models():
    for seed in range(5):
        pro = sim(GREEDY, GREEDY, seed=seed, mode="specedge")
        naive = sim(GREEDY, GREEDY, seed=seed, mode="disagg_naive")
        tpv = lambda r: np.mean([x.accepted_len + 1 for x in r.rounds])
        assert all(x.aligned for x in pro.rounds if x.h_expan)
        assert tpv(pro) > tpv(naive)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 20), st.integers(1, 20), st.integers(1, 20))
def test_gain_monotonicity(pa, pm, t, h, dt):
    assume(t > h)
    g = expected_gain(pa, pm, t, h).expected_gain
    assert expected_gain(pa, pm, t + dt, h).expected_gain >= g
    assert expected_gain(pa, pm, t, h + 1).expected_gain <= g


@given(st.integers(0, 50), st.sampled_from(["specedge", "disagg_naive"]), st.sampled_from([DEEPER, ACCELERATED]))
def test_committed_prefix_only_grows(seed, mode, reuse):
    from specedge.harness import build_model, load_config
    cfg = load_config(None)
    tgt = build_model(cfg, "target")
    res = sim(tgt, build_model(cfg, "draft", tgt), seed=seed, mode=mode, proactive_reuse=reuse, max_new_tokens=24)
    seen = {}
    for c in res.commits:
        assert c.index == seen.get(c.session, -1) + 1
        seen[c.session] = c.index
    for s, out in res.outputs.items():
        assert tuple(c.token for c in res.commits if c.session == s) == out
