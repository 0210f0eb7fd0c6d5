import math

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tape
from errors import ConfigError, ContractError, DimensionError, DomainError
from losses import (
    density_ratio_kernel,
    loss_cor,
    loss_dis_discriminator,
    loss_dis_generator,
    loss_ent,
    loss_rec,
    neighbor_cross_entropy,
    neighbor_masks,
    objective_var,
    plugin_neighbor_mi,
    similarity_m,
    total_objective,
)


def _value(var):
    return float(var.value[0, 0])


def _const(tape, value):
    return tape.constant(np.asarray(value, dtype=np.float64))


class TestReconstruction:
    def test_perfect_reconstruction(self):
        tape = Tape()
        x = _const(tape, np.arange(6.0).reshape(3, 2))
        assert _value(loss_rec(x, x)) == 0.0

    def test_single_row(self):
        tape = Tape()
        assert _value(loss_rec(_const(tape, [[1, 2]]), _const(tape, [[0, 0]]))) == 5.0

    def test_all_masked(self):
        tape = Tape()
        out = loss_rec(_const(tape, [[1, 2], [3, 4]]), _const(tape, [[0, 0], [0, 0]]), mask=[False, False])
        assert _value(out) == 0.0

    def test_mask_skips_hidden_rows(self):
        tape = Tape()
        out = loss_rec(_const(tape, [[1, 2], [3, 4]]), _const(tape, [[0, 0], [0, 0]]), mask=[True, False])
        assert _value(out) == 5.0

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            loss_rec(_const(tape, np.ones((2, 2))), _const(tape, np.ones((2, 3))))

    def test_mask_length(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            loss_rec(_const(tape, np.ones((2, 2))), _const(tape, np.ones((2, 2))), mask=[True])

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(42)
        x, x_hat = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        perm = rng.permutation(5)
        tape = Tape()
        a = _value(loss_rec(_const(tape, x), _const(tape, x_hat)))
        b = _value(loss_rec(_const(tape, x[perm]), _const(tape, x_hat[perm])))
        assert a == pytest.approx(b, rel=1e-12)


class TestCorrelation:
    def test_constant_c(self):
        tape = Tape()
        assert _value(loss_cor(_const(tape, [[1.0, -2.0]]), _const(tape, [[3.0, 3.0, 3.0]]))) == 0.0

    def test_hand_outer_product(self):
        tape = Tape()
        assert _value(loss_cor(_const(tape, [[1.0, 0.0]]), _const(tape, [[2.0, 4.0]]))) == pytest.approx(2.0)

    def test_zero_z(self):
        tape = Tape()
        assert _value(loss_cor(_const(tape, np.zeros((3, 2))), _const(tape, np.ones((3, 4)) * [1, 2, 3, 4]))) == 0.0

    def test_matches_explicit_outer_product(self):
        rng = np.random.default_rng(42)
        z, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
        centered = c - c.mean(axis=1, keepdims=True)
        expected = sum(np.abs(np.outer(z[i], centered[i])).sum() for i in range(4))
        tape = Tape()
        assert _value(loss_cor(_const(tape, z), _const(tape, c))) == pytest.approx(expected, rel=1e-12)

    def test_per_sample_shift_invariance(self):
        rng = np.random.default_rng(42)
        z, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
        shift = rng.normal(size=(4, 1))
        tape = Tape()
        a = _value(loss_cor(_const(tape, z), _const(tape, c)))
        b = _value(loss_cor(_const(tape, z), _const(tape, c + shift)))
        assert a == pytest.approx(b, rel=1e-10)

    def test_row_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            loss_cor(_const(tape, np.ones((2, 2))), _const(tape, np.ones((3, 2))))


class TestAdversarial:
    def test_discriminator_at_half(self):
        tape = Tape()
        half = _const(tape, np.full((3, 1), 0.5))
        assert _value(loss_dis_discriminator(half, half)) == pytest.approx(6 * math.log(2))

    def test_perfect_discriminator(self):
        tape = Tape()
        real = _const(tape, np.full((4, 1), 1 - 1e-9))
        fake = _const(tape, np.full((4, 1), 1e-9))
        assert _value(loss_dis_discriminator(real, fake)) == pytest.approx(0.0, abs=1e-7)

    def test_discriminator_single_sample(self):
        tape = Tape()
        out = loss_dis_discriminator(_const(tape, [[0.9]]), _const(tape, [[0.1]]))
        assert _value(out) == pytest.approx(0.2107, abs=1e-4)

    def test_extreme_scores_are_clamped(self):
        tape = Tape()
        out = loss_dis_discriminator(_const(tape, [[0.0]]), _const(tape, [[1.0]]))
        assert _value(out) == pytest.approx(-2 * math.log(1e-12), rel=1e-6)

    def test_weights_drop_samples(self):
        tape = Tape()
        real = _const(tape, [[0.9], [0.2]])
        fake = _const(tape, [[0.1], [0.7]])
        out = loss_dis_discriminator(real, fake, real_weights=[True, False], fake_weights=[True, False])
        assert _value(out) == pytest.approx(-2 * math.log(0.9))

    def test_generator_optimum(self):
        tape = Tape()
        assert _value(loss_dis_generator(_const(tape, np.ones((3, 1))))) == pytest.approx(0.0, abs=1e-9)

    def test_generator_at_half(self):
        tape = Tape()
        assert _value(loss_dis_generator(_const(tape, np.full((5, 1), 0.5)))) == pytest.approx(5 * math.log(2))

    def test_generator_two_samples(self):
        tape = Tape()
        assert _value(loss_dis_generator(_const(tape, [[0.25], [0.5]]))) == pytest.approx(2.0794, abs=1e-4)

    def test_scores_must_be_a_column(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            loss_dis_generator(_const(tape, np.full((2, 2), 0.5)))


class TestSimilarity:
    def test_self(self):
        assert similarity_m([1.0, 2.0], [1.0, 2.0]) == pytest.approx(math.e)

    def test_orthogonal(self):
        assert similarity_m([1.0, 0.0], [0.0, 3.0]) == pytest.approx(1.0)

    def test_antiparallel(self):
        assert similarity_m([1.0, 1.0], [-2.0, -2.0]) == pytest.approx(0.36788, abs=1e-5)

    def test_zero_vector(self):
        with pytest.raises(DomainError):
            similarity_m([0.0, 0.0], [1.0, 0.0])

    def test_range(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            a, b = rng.normal(size=4), rng.normal(size=4)
            assert math.exp(-1) - 1e-12 <= similarity_m(a, b) <= math.e + 1e-12


class TestNeighborEntropy:
    def test_identical_rows(self):
        tape = Tape()
        q = _const(tape, np.tile([[1.0, 2.0, 3.0]], (4, 1)))
        out = loss_ent(q, [[1], [0], [3], [2]])
        assert _value(out) == pytest.approx(math.log(2))

    def test_orthogonal_rows(self):
        # anchors 0 and 1 each contribute -1, anchor 2 contributes 0
        tape = Tape()
        q = _const(tape, [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        out = loss_ent(q, [[1], [0], [0]])
        assert _value(out) == pytest.approx(-2.0 / 3.0)

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(42)
        q = rng.normal(size=(7, 4))
        positives = [[(i + 1) % 7, (i + 3) % 7] for i in range(7)]
        unit = q / np.linalg.norm(q, axis=1, keepdims=True)
        expected = neighbor_cross_entropy(np.exp(unit @ unit.T), positives, "negatives")
        tape = Tape()
        assert _value(loss_ent(_const(tape, q), positives)) == pytest.approx(expected, rel=1e-12)

    def test_closer_positive_lowers_loss(self):
        def value(angle):
            tape = Tape()
            q = _const(tape, [[1.0, 0.0], [math.cos(angle), math.sin(angle)], [0.0, -1.0], [-1.0, 0.0]])
            return _value(loss_ent(q, [[1], [0], [3], [2]]))

        angles = [1.2, 0.9, 0.6, 0.4]
        values = [value(a) for a in angles]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_no_negatives(self):
        tape = Tape()
        with pytest.raises(ConfigError):
            loss_ent(_const(tape, [[1.0, 0.0], [0.0, 1.0]]), [[1], [0]])

    def test_self_as_positive(self):
        with pytest.raises(ContractError):
            neighbor_masks([[0], [0], [1]], 3)

    def test_positive_out_of_range(self):
        with pytest.raises(ContractError):
            neighbor_masks([[3], [0], [1]], 3)

    def test_wrong_number_of_lists(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            loss_ent(_const(tape, np.eye(3)), [[1], [0]])


class TestObjective:
    def test_reduces_to_reconstruction(self):
        out = total_objective([1.0, 2.0], [5.0, 5.0], 7.0, 9.0, alpha=0.0, beta=0.0)
        assert out.total == 3.0

    def test_all_zero(self):
        assert total_objective(0.0, 0.0, 0.0, 0.0, 0.01, 0.01).total == 0.0

    def test_hand_combination(self):
        out = total_objective(1.0, 2.0, 3.0, 4.0, alpha=0.01, beta=0.01)
        assert out.total == pytest.approx(1.09)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            total_objective(1.0, 1.0, 1.0, 1.0, alpha=-0.1, beta=0.0)

    def test_breakdown_record(self):
        out = total_objective([1.0, 2.0], [0.5, 0.5], [0.25, 0.25], 3.0, 0.1, 0.2, dis_discriminator=4.0)
        record = out.to_record()
        assert record["rec"] == 3.0 and record["rec_per_view"] == [1.0, 2.0]
        assert record["dis_generator"] == 0.5 and record["dis_discriminator"] == 4.0
        assert record["total"] == pytest.approx(3.0 + 0.1 * (1.0 + 0.5) + 0.2 * 3.0)

    def test_differentiable_form_agrees(self):
        tape = Tape()
        rec = [_const(tape, [[1.0]]), _const(tape, [[2.0]])]
        cor = [_const(tape, [[0.5]]), _const(tape, [[1.5]])]
        dis = [_const(tape, [[3.0]])]
        ent = _const(tape, [[4.0]])
        expected = total_objective([1.0, 2.0], [0.5, 1.5], 3.0, 4.0, 0.01, 0.02).total
        assert _value(objective_var(rec, cor, dis, ent, 0.01, 0.02)) == pytest.approx(expected)


class TestLossGradients:
    def test_rec(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(4, 3))
        mask = [True, False, True, True]
        report = ad.finite_difference_check(
            lambda t, p: loss_rec(t.constant(x), p["x_hat"], mask), {"x_hat": rng.normal(size=(4, 3))}
        )
        assert report.passed, report.worst

    def test_cor(self):
        rng = np.random.default_rng(42)
        report = ad.finite_difference_check(
            lambda t, p: loss_cor(p["z"], p["c"]), {"z": rng.normal(size=(4, 3)), "c": rng.normal(size=(4, 5))}
        )
        assert report.passed, report.worst

    def test_dis(self):
        rng = np.random.default_rng(42)

        def f(tape, p):
            real = ad.unary("sigmoid", p["real"])
            fake = ad.unary("sigmoid", p["fake"])
            return ad.add(loss_dis_discriminator(real, fake), loss_dis_generator(fake))

        report = ad.finite_difference_check(f, {"real": rng.normal(size=(5, 1)), "fake": rng.normal(size=(5, 1))})
        assert report.passed, report.worst

    def test_ent(self):
        rng = np.random.default_rng(42)
        positives = [[(i + 1) % 6, (i + 2) % 6] for i in range(6)]
        report = ad.finite_difference_check(lambda t, p: loss_ent(p["q"], positives), {"q": rng.normal(size=(6, 4))})
        assert report.passed, report.worst


class TestNeighborInformation:
    def test_cross_entropy_matches_information_identity(self):
        rng = np.random.default_rng(42)
        n, k, n_omega = 512, 8, 4
        labels = rng.integers(0, k, size=n)
        positives = []
        for i in range(n):
            same = np.flatnonzero((labels == labels[i]) & (np.arange(n) != i))
            positives.append(rng.choice(same, size=n_omega, replace=False).tolist())

        m = density_ratio_kernel(labels, positives)
        empirical = neighbor_cross_entropy(m, positives, denominator="all")
        mi = plugin_neighbor_mi(labels, positives)
        predicted = -n_omega * mi + n_omega * math.log(n)
        assert empirical == pytest.approx(predicted, rel=0.05)

    def test_independent_neighbors_carry_no_information(self):
        labels = np.array([0, 0, 1, 1])
        positives = [[1, 2], [0, 3], [0, 3], [1, 2]]
        assert plugin_neighbor_mi(labels, positives) == pytest.approx(0.0, abs=1e-12)

    def test_unknown_denominator(self):
        with pytest.raises(ConfigError):
            neighbor_cross_entropy(np.ones((3, 3)), [[1], [2], [0]], denominator="some")
