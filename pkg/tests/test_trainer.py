import hashlib
import json

import numpy as np
import pytest

from data import generate_synthetic3d, make_viewset
from errors import ConfigError, DimensionError, TrainingError
from networks import init_params
from trainer import (
    OptimizerStates,
    _discriminator_step,
    _main_step,
    adversarial_pairs,
    assemble_consensus,
    assemble_q,
    build_neighbor_sets,
    common_alignment_gap,
    fit,
    forward_embeddings,
    prepare_viewset,
    train_epoch,
)


def _digest(params, names):
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.values[name]).tobytes())
    return h.hexdigest()


def _brute_force_neighbors(q, n_omega):
    unit = q / np.linalg.norm(q, axis=1, keepdims=True)
    out = []
    for i in range(len(q)):
        scored = sorted((-(unit[i] @ unit[j]), j) for j in range(len(q)) if j != i)
        out.append([j for _, j in scored[:n_omega]])
    return out


class TestNeighborSets:
    def test_basis_vectors(self):
        q = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert build_neighbor_sets(q, 1) == [[1], [0], [0]]

    def test_ties_go_to_lower_index(self):
        q = np.ones((5, 3))
        assert build_neighbor_sets(q, 2) == [[1, 2], [0, 2], [0, 1], [0, 1], [0, 1]]

    def test_two_segments_match_brute_force(self):
        rng = np.random.default_rng(42)
        q = np.vstack([rng.normal([5.0, 0.0, 0.0], 0.3, size=(8, 3)), rng.normal([0.0, 5.0, 0.0], 0.3, size=(8, 3))])
        sets = build_neighbor_sets(q, 3)
        assert sets == _brute_force_neighbors(q, 3)
        for i, row in enumerate(sets):
            assert all((j < 8) == (i < 8) for j in row)

    def test_never_contains_self(self):
        q = np.random.default_rng(42).normal(size=(12, 4))
        for i, row in enumerate(build_neighbor_sets(q, 5)):
            assert i not in row and len(set(row)) == 5

    def test_n_omega_must_stay_below_n(self):
        with pytest.raises(ConfigError):
            build_neighbor_sets(np.eye(3), 3)

    def test_n_omega_positive(self):
        with pytest.raises(ConfigError):
            build_neighbor_sets(np.eye(3), 0)


class TestConsensus:
    def test_mean_of_views(self):
        np.testing.assert_allclose(assemble_consensus([np.array([[0.0, 2.0]]), np.array([[2.0, 0.0]])]), [[1.0, 1.0]])
        c = [np.array([[1.0, 2.0]]), np.array([[3.0, 6.0]])]
        np.testing.assert_allclose(assemble_consensus(c), [[2.0, 4.0]])

    def test_aligned_views(self):
        c = np.random.default_rng(42).normal(size=(4, 3))
        np.testing.assert_allclose(assemble_consensus([c, c.copy(), c.copy()]), c)

    def test_single_view_is_identity(self):
        c = np.random.default_rng(42).normal(size=(4, 3))
        np.testing.assert_array_equal(assemble_consensus([c]), c)

    def test_masked_mean_skips_hidden_views(self):
        c = [np.array([[1.0], [1.0]]), np.array([[5.0], [5.0]]), np.array([[9.0], [9.0]])]
        mask = np.array([[True, True, True], [True, False, True]])
        np.testing.assert_allclose(assemble_consensus(c, mask), [[5.0], [5.0]])
        mask = np.array([[True, True, False], [False, True, False]])
        np.testing.assert_allclose(assemble_consensus(c, mask), [[3.0], [5.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            assemble_consensus([np.ones((2, 3)), np.ones((2, 4))])

    def test_empty(self):
        with pytest.raises(DimensionError):
            assemble_consensus([])

    def test_q_layout(self):
        c_star = np.zeros((2, 3))
        z = [np.ones((2, 2)), 2 * np.ones((2, 2))]
        q = assemble_q(c_star, z)
        assert q.shape == (2, 7)
        np.testing.assert_array_equal(q[:, 3:5], 1.0)
        np.testing.assert_array_equal(q[:, 5:], 2.0)


class TestAlignmentGap:
    def test_single_pair(self):
        assert common_alignment_gap([np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])]) == pytest.approx(5.0)

    def test_identical_views(self):
        c = np.random.default_rng(42).normal(size=(6, 3))
        assert common_alignment_gap([c, c, c]) == 0.0

    def test_single_view(self):
        assert common_alignment_gap([np.ones((3, 2))]) == 0.0

    def test_hidden_rows_are_skipped(self):
        a = np.array([[0.0, 0.0], [0.0, 0.0]])
        b = np.array([[3.0, 4.0], [100.0, 0.0]])
        mask = np.array([[True, True], [True, False]])
        assert common_alignment_gap([a, b], mask) == pytest.approx(5.0)


class TestAdversarialPairs:
    def test_cycle(self):
        assert adversarial_pairs(3) == [(0, 1), (1, 2), (2, 0)]

    def test_all(self):
        pairs = adversarial_pairs(3, "all")
        assert len(pairs) == 6 and all(v != u for v, u in pairs)

    def test_two_views(self):
        assert adversarial_pairs(2) == [(0, 1), (1, 0)]

    def test_single_view(self):
        assert adversarial_pairs(1) == [] and adversarial_pairs(1, "all") == []


class TestForward:
    def test_q_columns(self, tiny_config, tiny_data):
        params = init_params(tiny_config, tiny_data.dims, 42)
        emb = forward_embeddings(params, tiny_data)
        assert emb.q.shape == (30, tiny_config.dim_c + 3 * tiny_config.dim_z)
        np.testing.assert_allclose(emb.c_star, np.mean(emb.c, axis=0))
        np.testing.assert_array_equal(emb.q[:, : tiny_config.dim_c], emb.c_star)

    def test_dims_mismatch(self, tiny_config, tiny_data):
        params = init_params(tiny_config, [3, 3], 42)
        with pytest.raises(DimensionError):
            forward_embeddings(params, tiny_data)

    def test_prepare_applies_missing_then_normalizes(self, tiny_config):
        raw = generate_synthetic3d(seed=3, n_per_cluster=10)
        data = prepare_viewset(raw, tiny_config.with_overrides(missing_ratio=0.5))
        assert (~data.mask.all(axis=1)).sum() == 15
        for v, view in enumerate(data.views):
            present = view[data.mask[:, v]]
            assert present.min() >= 0.0 and present.max() <= 1.0
            assert not view[~data.mask[:, v]].any()


class TestSteps:
    def test_zero_learning_rate_keeps_params(self, tiny_config, tiny_data):
        config = tiny_config.with_overrides(learning_rate=0.0)
        params = init_params(config, tiny_data.dims, 42)
        before = _digest(params, params.names())
        q_ref = forward_embeddings(params, tiny_data).q
        after, _, _ = train_epoch(params, OptimizerStates.from_config(config), tiny_data, config, 0, q_ref)
        assert _digest(after, after.names()) == before

    def test_discriminator_step_only_moves_discriminators(self, tiny_config, tiny_data):
        params = init_params(tiny_config, tiny_data.dims, 42)
        states = OptimizerStates.from_config(tiny_config)
        main_before = _digest(params, params.names("main"))
        disc_before = _digest(params, params.names("disc"))
        after, _, _ = _discriminator_step(
            params, states.disc, list(tiny_data.views), tiny_data.mask, adversarial_pairs(3), 0
        )
        assert _digest(after, after.names("main")) == main_before
        assert _digest(after, after.names("disc")) != disc_before

    def test_main_step_leaves_discriminators(self, tiny_config, tiny_data):
        params = init_params(tiny_config, tiny_data.dims, 42)
        states = OptimizerStates.from_config(tiny_config)
        q_ref = forward_embeddings(params, tiny_data).q
        main_before = _digest(params, params.names("main"))
        disc_before = _digest(params, params.names("disc"))
        after, _, parts = _main_step(
            params, states.main, list(tiny_data.views), tiny_data.mask, q_ref, adversarial_pairs(3), tiny_config, 0
        )
        assert _digest(after, after.names("disc")) == disc_before
        assert _digest(after, after.names("main")) != main_before
        assert len(parts["rec"]) == 3 and len(parts["cor"]) == 3 and parts["ent"] > 0

    def test_reconstruction_only_objective(self, tiny_config, tiny_data):
        config = tiny_config.with_overrides(alpha=0.0, beta=0.0)
        params = init_params(config, tiny_data.dims, 42)
        q_ref = forward_embeddings(params, tiny_data).q
        _, _, breakdown = train_epoch(params, OptimizerStates.from_config(config), tiny_data, config, 0, q_ref)
        assert breakdown.total == pytest.approx(breakdown.rec_sum)
        assert breakdown.cor_sum > 0 and breakdown.ent > 0

    def test_disabled_groups_report_zero(self, tiny_config, tiny_data):
        config = tiny_config.with_overrides(use_cor_dis=False, use_ent=False)
        params = init_params(config, tiny_data.dims, 42)
        q_ref = forward_embeddings(params, tiny_data).q
        _, _, breakdown = train_epoch(params, OptimizerStates.from_config(config), tiny_data, config, 0, q_ref)
        assert breakdown.cor_sum == 0.0 and breakdown.ent == 0.0
        assert breakdown.dis_generator == 0.0 and breakdown.dis_discriminator == 0.0
        assert breakdown.total == pytest.approx(breakdown.rec_sum)


class TestFit:
    def test_log_records(self, tiny_config, tiny_data):
        result = fit(tiny_data, tiny_config)
        assert [r["epoch"] for r in result.log] == [1, 2, 3]
        for record in result.log:
            for key in ("rec", "cor", "dis_generator", "dis_discriminator", "ent", "total", "align"):
                assert np.isfinite(record[key])
            assert len(record["rec_per_view"]) == 3
            assert "acc" not in record

    def test_deterministic(self, tiny_config, tiny_data):
        a = fit(tiny_data, tiny_config)
        b = fit(tiny_data, tiny_config)
        assert np.array_equal(a.embeddings.q, b.embeddings.q)
        assert [r["total"] for r in a.log] == [r["total"] for r in b.log]

    def test_seed_changes_run(self, tiny_config, tiny_data):
        a = fit(tiny_data, tiny_config)
        b = fit(tiny_data, tiny_config.with_overrides(seed=43))
        assert not np.array_equal(a.embeddings.q, b.embeddings.q)

    def test_zero_epochs(self, tiny_config, tiny_data):
        config = tiny_config.with_overrides(epochs=0)
        result = fit(tiny_data, config)
        assert result.log == []
        expected = forward_embeddings(init_params(config, tiny_data.dims, config.seed), tiny_data)
        np.testing.assert_array_equal(result.embeddings.q, expected.q)

    def test_eval_every(self, tiny_config, tiny_data):
        result = fit(tiny_data, tiny_config.with_overrides(eval_every=2))
        assert "acc" not in result.log[0]
        assert {"acc", "nmi", "pur"} <= set(result.log[1])
        assert 0.0 <= result.log[1]["acc"] <= result.log[1]["pur"] + 1e-9

    def test_mini_batches(self, tiny_config, tiny_data):
        result = fit(tiny_data, tiny_config.with_overrides(batch_size=8))
        assert len(result.log) == 3
        assert all(np.isfinite(r["total"]) for r in result.log)

    def test_missing_views(self, tiny_config):
        raw = generate_synthetic3d(seed=5, n_per_cluster=10)
        config = tiny_config.with_overrides(missing_ratio=0.5)
        data = prepare_viewset(raw, config)
        result = fit(data, config)
        assert np.isfinite(result.embeddings.q).all()
        assert result.embeddings.q.shape == (30, 4 + 3 * 4)

    def test_all_pairs(self, tiny_config, tiny_data):
        result = fit(tiny_data, tiny_config.with_overrides(adversarial_pairing="all"))
        assert all(np.isfinite(r["dis_discriminator"]) for r in result.log)

    def test_progress_hook(self, tiny_config, tiny_data):
        seen = []
        fit(tiny_data, tiny_config, progress=lambda epoch, record: seen.append((epoch, record["epoch"])))
        assert seen == [(0, 1), (1, 2), (2, 3)]

    def test_n_omega_too_large(self, tiny_config, tiny_data):
        with pytest.raises(ConfigError):
            fit(tiny_data, tiny_config.with_overrides(n_omega=30))

    def test_n_omega_clamp_is_logged(self, tiny_config, tiny_data, capsys):
        fit(tiny_data, tiny_config.with_overrides(n_omega=29, epochs=1))
        events = [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.strip()]
        clamped = [e for e in events if e["event"] == "tr_n_omega_clamped"]
        assert len(clamped) == 1
        assert clamped[0]["effective"] == 28 and clamped[0]["batch"] == 30

    def test_small_last_batch_is_logged(self, tiny_config, tiny_data, capsys):
        fit(tiny_data, tiny_config.with_overrides(batch_size=4, epochs=1))
        events = [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.strip()]
        assert [e["batch"] for e in events if e["event"] == "tr_n_omega_clamped"] == [2]

    def test_no_clamp_warning_by_default(self, tiny_config, tiny_data, capsys):
        fit(tiny_data, tiny_config.with_overrides(epochs=1))
        assert "tr_n_omega_clamped" not in capsys.readouterr().err

    def test_k_above_n(self, tiny_config, tiny_data):
        with pytest.raises(ConfigError):
            fit(tiny_data, tiny_config.with_overrides(n_clusters=31))

    def test_non_finite_loss(self, tiny_config):
        views = [np.full((6, 2), 1e200), np.full((6, 2), -1e200)]
        data = make_viewset(views)
        config = tiny_config.with_overrides(normalize="none", use_cor_dis=False, use_ent=False, epochs=1)
        with pytest.raises(TrainingError) as info:
            fit(data, config)
        assert info.value.component == "rec" and info.value.epoch == 0
        assert info.value.exit_code == 3
