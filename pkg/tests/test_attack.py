"""Tests for the suffix optimizer: objectives, gradients, projection,
candidate machinery, the veto, the full loop, ablations, and transfer."""

import math

import numpy as np
import pytest

from speclab import attack, specdec, tinylm
from speclab.errors import ConfigError, InputError

import helpers


class TestCollectAttackedPositions:
    def test_single_cycle_chain_structure(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, attack_cycles=1, draft_budget=3)
        x_delta = tuple(prompts[0])
        entries = attack.collect_attacked_positions(target, drafter, x_delta, cfg)
        assert len(entries) == 3
        assert entries[0].context == x_delta
        assert entries[1].context == x_delta + (entries[0].draft_token,)
        assert entries[2].context == x_delta + (entries[0].draft_token, entries[1].draft_token)

    def test_deterministic(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, attack_cycles=2)
        a = attack.collect_attacked_positions(target, drafter, prompts[1], cfg)
        b = attack.collect_attacked_positions(target, drafter, prompts[1], cfg)
        assert a == b

    def test_two_cycles_extend_committed_prefix(self, target, drafter, prompts, space_id):
        """With K=1 the second entry's context is the first cycle's committed
        prefix; verified by replaying the greedy decode trace."""
        cfg = helpers.base_attack_config(space_id, attack_cycles=2, draft_budget=1)
        x_delta = tuple(prompts[2])
        entries = attack.collect_attacked_positions(target, drafter, x_delta, cfg)
        assert len(entries) == 2
        decode_cfg = specdec.DecodeConfig(draft_budget=1, max_tokens=6, mode="greedy", seed=0)
        trace = specdec.speculative_decode(target, drafter, x_delta, decode_cfg)
        committed_first = trace.cycles[0].draft_tokens[: trace.cycles[0].num_accepted] + (
            trace.cycles[0].fallback_token,
        )
        assert entries[1].context == x_delta + committed_first
        assert entries[1].context[: len(entries[0].context)] == entries[0].context


class TestSemanticAnchors:
    def test_single_anchor(self, target, prompts):
        anchors = attack.build_semantic_anchors(target, prompts[0], 1)
        assert len(anchors) == 1
        assert anchors[0].prefix == ()
        np.testing.assert_array_equal(anchors[0].distribution, tinylm.forward(target, prompts[0]))

    def test_prefixes_follow_greedy_continuation(self, target, prompts):
        anchors = attack.build_semantic_anchors(target, prompts[1], 6)
        greedy = specdec.autoregressive_decode(target, prompts[1], 6, "greedy")
        for t, anchor in enumerate(anchors):
            assert anchor.prefix == greedy[:t]

    def test_empty_suffix_gives_zero_semantic_loss(self, target, prompts):
        """Anchors are built from the clean prompt, so the adversarial and
        clean contexts coincide when the suffix is empty."""
        anchors = attack.build_semantic_anchors(target, prompts[0], 8)
        assert attack.semantic_loss(target, anchors, prompts[0]) == 0.0


class TestRejectionLoss:
    def test_probability_one_gives_zero(self):
        model = helpers.constant_model([1.0 - 2e-16, 1e-30, 1e-30])
        positions = [attack.AttackedPosition(0, 0, (0,), 0)]
        assert attack.rejection_loss(model, positions) == pytest.approx(0.0, abs=1e-9)

    def test_single_entry_half(self):
        model = helpers.constant_model([0.5, 0.5])
        positions = [attack.AttackedPosition(0, 0, (0,), 1)]
        assert attack.rejection_loss(model, positions) == pytest.approx(math.log(2), abs=1e-12)

    def test_mean_of_surprisals(self):
        model = helpers.constant_model([0.5, 0.25, 0.125, 0.125])
        positions = [
            attack.AttackedPosition(0, 0, (0,), 0),  # prob 0.5
            attack.AttackedPosition(0, 1, (0, 1), 1),  # prob 0.25
        ]
        expected = (math.log(2) + math.log(4)) / 2
        assert attack.rejection_loss(model, positions) == pytest.approx(expected, abs=1e-12)

    def test_empty_positions_rejected(self, target):
        with pytest.raises(InputError):
            attack.rejection_loss(target, [])


class TestSemanticLoss:
    def test_worked_kl_example(self):
        model = helpers.constant_model([0.25, 0.75])
        anchor = attack.SemanticAnchor(0, (), np.array([0.5, 0.5]))
        got = attack.semantic_loss(model, [anchor], (0,))
        want = 0.5 * math.log(2) + 0.5 * math.log(2.0 / 3.0)
        assert got == pytest.approx(want, abs=1e-12)

    def test_nonnegative(self, target, prompts):
        rng = np.random.default_rng(5)
        anchors = attack.build_semantic_anchors(target, prompts[0], 6)
        for _ in range(10):
            delta = tuple(int(t) for t in rng.integers(0, target.vocab_size, 5))
            assert attack.semantic_loss(target, anchors, tuple(prompts[0]) + delta) >= 0.0


class TestNullSpaceProjection:
    def test_orthogonal_case_unchanged(self):
        g_rej = np.array([[0.0, 1.0]])
        g_sem = np.array([[1.0, 0.0]])
        np.testing.assert_array_equal(attack.null_space_project(g_rej, g_sem, 0.0), g_rej)

    def test_parallel_case_is_zero(self):
        g = np.array([[1.5, -2.0, 0.5]])
        np.testing.assert_array_equal(attack.null_space_project(g, g, 0.0), np.zeros_like(g))

    def test_component_removal_worked_example(self):
        g_rej = np.array([[1.0, 1.0]])
        g_sem = np.array([[1.0, 0.0]])
        np.testing.assert_array_equal(attack.null_space_project(g_rej, g_sem, 0.0), [[0.0, 1.0]])

    def test_orthogonality_and_idempotence_random(self):
        """100 random pairs: damped output is near-orthogonal to the
        constraint gradient, and the undamped projection is idempotent."""
        rng = np.random.default_rng(8)
        for _ in range(100):
            shape = (int(rng.integers(1, 5)), int(rng.integers(2, 7)))
            a = rng.normal(size=shape)
            b = rng.normal(size=shape)
            xi = float(rng.uniform(1e-10, 1e-6))
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            proj = attack.null_space_project(a, b, xi)
            bound = xi * na * nb / (nb**2 + xi) + 1e-9
            assert abs(float(proj.reshape(-1) @ b.reshape(-1))) <= bound
            exact = attack.null_space_project(a, b, 0.0)
            assert abs(float(exact.reshape(-1) @ b.reshape(-1))) < 1e-9 * na * nb
            twice = attack.null_space_project(exact, b, 0.0)
            assert np.linalg.norm(twice - exact) <= 1e-9 * max(np.linalg.norm(exact), 1e-12)


class TestFinalDirection:
    def test_zero_weight_restores_feasibility_only(self):
        g_sem = np.array([[1.0, 2.0]])
        g_null = np.array([[3.0, 4.0]])
        np.testing.assert_array_equal(attack.final_direction(g_sem, g_null, 0.0), -g_sem)

    def test_zero_semantic_gradient(self):
        g_null = np.array([[0.5, -1.0]])
        np.testing.assert_array_equal(attack.final_direction(np.zeros((1, 2)), g_null, 2.0), 2.0 * g_null)

    def test_arithmetic(self):
        got = attack.final_direction(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]]), 2.0)
        np.testing.assert_array_equal(got, [[-1.0, 4.0]])


class TestGradientFidelity:
    def test_rejection_and_semantic_gradients_match_finite_differences(self, target, drafter, prompts, space_id):
        """Both attack gradients agree with central differences of their
        losses under the one-hot relaxation (rel. error < 1e-4)."""
        cfg = helpers.base_attack_config(space_id, suffix_len=3, attack_cycles=1, sem_positions=3)
        x = tuple(prompts[0])
        delta = (space_id,) * cfg.suffix_len
        x_delta = x + delta
        span = (len(x), len(x_delta))
        positions = attack.collect_attacked_positions(target, drafter, x_delta, cfg)
        anchors = attack.build_semantic_anchors(target, x, cfg.sem_positions)
        rej_terms = attack.rejection_terms(positions, len(x_delta))
        sem_terms = attack.semantic_terms(anchors)
        # the term decomposition reproduces the loss values exactly
        assert tinylm.loss_value(target, x_delta, span, rej_terms) == pytest.approx(
            attack.rejection_loss(target, positions), abs=1e-12
        )
        assert tinylm.loss_value(target, x_delta, span, sem_terms) == pytest.approx(
            attack.semantic_loss(target, anchors, x_delta), abs=1e-12
        )
        grads = attack.objective_gradients(target, x_delta, span, positions, anchors, cfg)
        for grad, terms in ((grads.grad_rej, rej_terms), (grads.grad_sem, sem_terms)):
            fd = helpers.fd_gradient(target, x_delta, span, terms)
            assert np.linalg.norm(fd - grad) / max(np.linalg.norm(fd), 1e-12) < 1e-4


class TestProposeCandidates:
    def _state(self, delta, v):
        return attack.SuffixState(delta, tinylm.one_hot(delta, v), 0.0, 0.0, 0, [])

    def test_zero_gradient_uniform_single_mutations(self):
        rng = np.random.default_rng(0)
        delta = (0, 1, 2)
        state = self._state(delta, 5)
        candidates = attack.propose_candidates(state, np.zeros((3, 5)), 4, 8, rng)
        assert len(candidates) == 8
        for cand in candidates:
            diffs = [j for j in range(3) if cand[j] != delta[j]]
            assert len(diffs) == 1

    def test_top1_worked_example(self):
        state = self._state((0,), 3)
        grad = np.array([[0.0, 5.0, 1.0]])
        candidates = attack.propose_candidates(state, grad, 1, 4, np.random.default_rng(0))
        assert candidates == [(1,)]

    def test_batch_larger_than_pool_returns_pool(self):
        state = self._state((0, 0), 3)
        grad = np.zeros((2, 3))
        candidates = attack.propose_candidates(state, grad, 2, 100, np.random.default_rng(0))
        assert len(candidates) == 4  # 2 positions x top-2 of the other tokens
        assert len(set(candidates)) == 4

    def test_every_candidate_single_substitution(self, space_id):
        rng = np.random.default_rng(2)
        delta = tuple(int(t) for t in rng.integers(0, 7, 6))
        state = self._state(delta, 7)
        grad = rng.normal(size=(6, 7))
        for cand in attack.propose_candidates(state, grad, 3, 10, rng):
            assert sum(1 for j in range(6) if cand[j] != delta[j]) == 1

    def test_deterministic_given_rng_state(self):
        grad = np.random.default_rng(4).normal(size=(5, 9))
        state = self._state((0, 1, 2, 3, 4), 9)
        a = attack.propose_candidates(state, grad, 4, 12, np.random.default_rng(6))
        b = attack.propose_candidates(state, grad, 4, 12, np.random.default_rng(6))
        assert a == b


class TestKlVetoSelect:
    def test_all_infeasible_returns_none(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, kl_bound=1e-9)
        candidates = [(space_id,) * cfg.suffix_len]
        anchors = attack.build_semantic_anchors(target, prompts[0], cfg.sem_positions)
        assert attack.kl_veto_select(target, drafter, prompts[0], candidates, anchors, cfg) is None

    def test_single_feasible_selected(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, kl_bound=100.0)
        cand = (space_id,) * cfg.suffix_len
        anchors = attack.build_semantic_anchors(target, prompts[0], cfg.sem_positions)
        picked = attack.kl_veto_select(target, drafter, prompts[0], [cand], anchors, cfg)
        assert picked is not None and picked.suffix == cand

    def test_argmax_rejection_loss_with_index_tiebreak(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, kl_bound=100.0)
        rng = np.random.default_rng(3)
        candidates = [tuple(int(t) for t in rng.integers(0, target.vocab_size, cfg.suffix_len)) for _ in range(4)]
        anchors = attack.build_semantic_anchors(target, prompts[0], cfg.sem_positions)
        picked = attack.kl_veto_select(target, drafter, prompts[0], candidates, anchors, cfg)
        evals = [attack.evaluate_suffix(target, drafter, prompts[0], c, anchors, cfg) for c in candidates]
        best_idx = max(range(4), key=lambda i: (evals[i][0], -i))
        assert picked.suffix == candidates[best_idx]
        assert picked.loss_rej == evals[best_idx][0]


class TestOptimizeSuffix:
    def test_zero_iterations_returns_feasible_init(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, iterations=0)
        state = attack.optimize_suffix(target, drafter, prompts[0], cfg)
        assert state.delta == (space_id,) * cfg.suffix_len
        assert state.history == []
        assert state.loss_sem <= cfg.kl_bound
        np.testing.assert_array_equal(state.relaxation, tinylm.one_hot(state.delta, target.vocab_size))

    def test_deterministic_given_seed(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, iterations=4, batch=12)
        s1 = attack.optimize_suffix(target, drafter, prompts[3], cfg)
        s2 = attack.optimize_suffix(target, drafter, prompts[3], cfg)
        assert s1.delta == s2.delta
        assert s1.history == s2.history

    def test_infeasible_initialization_raises_config_error(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, kl_bound=1e-9)
        with pytest.raises(ConfigError):
            attack.optimize_suffix(target, drafter, prompts[0], cfg)

    def test_full_pipeline_collapses_acceptance(self, full_runs):
        """Final rejection loss never falls below the initial one, and the
        attacked greedy accepted length drops below clean on the toy pair."""
        clean, attacked, state = full_runs[0]
        assert state.loss_rej >= state.history[0].loss_rej - 1e-12
        assert attacked.tau < clean.tau

    def test_feasibility_and_monotonicity_per_iteration(self, full_runs):
        for _, _, state in full_runs:
            prev = -math.inf
            for rec in state.history:
                assert rec.loss_sem <= 0.5 + 1e-12
                assert rec.loss_rej >= prev - 1e-12
                prev = rec.loss_rej


class TestAblations:
    def test_full_variant_matches_optimize_suffix(self, target, drafter, prompts, space_id):
        cfg = helpers.base_attack_config(space_id, iterations=3, batch=10)
        s1 = attack.optimize_suffix(target, drafter, prompts[5], cfg)
        s2 = attack.ablation_run(target, drafter, prompts[5], cfg, "full")
        assert s1.delta == s2.delta
        assert s1.history == s2.history
        assert (s1.loss_rej, s1.loss_sem) == (s2.loss_rej, s2.loss_sem)

    def test_orthogonal_gradients_make_projection_identity(self):
        """With orthogonal gradients the projected direction is the raw
        rejection gradient, so the full direction differs from rej-only
        scoring (at weight 1) exactly by the feasibility term."""
        g_rej = np.array([[0.0, 2.0], [1.0, 0.0]])
        g_sem = np.array([[3.0, 0.0], [0.0, -1.0]])
        assert float(np.sum(g_rej * g_sem)) == 0.0
        projected = attack.null_space_project(g_rej, g_sem, 0.0)
        np.testing.assert_array_equal(projected, g_rej)
        full_dir = attack.final_direction(g_sem, projected, 1.0)
        np.testing.assert_array_equal(full_dir + g_sem, g_rej)

    def test_full_pareto_dominates_naive_joint(self, full_runs, naive_joint_runs):
        """Paired over the 10 toy prompts, full reaches lower-or-equal final
        semantic loss at matched-or-better rejection loss >= 60% of the time."""
        wins = 0
        for (_, _, full_state), (_, _, naive_state) in zip(full_runs, naive_joint_runs):
            if (
                full_state.loss_sem <= naive_state.loss_sem + 1e-12
                and full_state.loss_rej >= naive_state.loss_rej - 1e-12
            ):
                wins += 1
        assert wins >= 6

    def test_variant_validation(self, target, drafter, prompts, space_id):
        with pytest.raises(ConfigError):
            attack.ablation_run(target, drafter, prompts[0], helpers.base_attack_config(space_id), "bogus")


class TestTransfer:
    def test_source_drafter_reproduces_attacked_tau(self, target, drafter, prompts, full_runs):
        _, attacked, state = full_runs[0]
        res = attack.transfer_evaluate(state.delta, target, [drafter], [prompts[0]], helpers.GREEDY_DECODE)[0]
        assert res.attacked_tau[0] == attacked.tau

    def test_empty_suffix_changes_nothing(self, target, drafter, prompts):
        res = attack.transfer_evaluate((), target, [drafter], prompts[:3], helpers.GREEDY_DECODE)[0]
        assert res.attacked_tau == res.clean_tau

    def test_transfers_to_independently_distilled_drafter(self, target, drafter_b, prompts, full_runs):
        """Suffixes optimized against drafter A reduce drafter B's accepted
        length on at least half of the prompts."""
        wins = 0
        for prompt, (_, _, state) in zip(prompts, full_runs):
            res = attack.transfer_evaluate(state.delta, target, [drafter_b], [prompt], helpers.GREEDY_DECODE)[0]
            wins += res.attacked_tau[0] < res.clean_tau[0]
        assert wins >= 5


class TestAttackRecord:
    def test_record_is_json_ready_and_complete(self, full_runs, space_id, vocab):
        _, _, state = full_runs[0]
        cfg = helpers.base_attack_config(space_id, seed=1000)
        record = attack.attack_record(state, cfg, variant="full", prompt_id=0, vocab=vocab)
        import json

        parsed = json.loads(json.dumps(record))
        assert parsed["final_suffix"] == list(state.delta)
        assert parsed["final_suffix_text"] == vocab.decode(state.delta)
        assert len(parsed["history"]) == len(state.history)
        assert parsed["config"]["kl_bound"] == 0.5
        assert parsed["prompt_id"] == 0
        # per-iteration entries carry the incumbent suffix, ids and text
        assert parsed["history"][-1]["suffix"] == list(state.delta)
        assert parsed["history"][-1]["suffix_text"] == vocab.decode(state.delta)
