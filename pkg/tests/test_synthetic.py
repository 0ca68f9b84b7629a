import numpy as np
import pytest

from fedmirror.clients import ClientDataset
from fedmirror.errors import DomainError
from fedmirror.synthetic import (
    FederationInstance,
    SyntheticSpec,
    client_gradient,
    generate,
    global_gradient,
    global_loss,
    heterogeneity_at_opt,
    instance_hash,
    load_instance,
    min_norm_solution,
    random_interpolation_instance,
    save_instance,
    serialize_instance,
)


@pytest.fixture(scope="module")
def default_instance():
    return generate(SyntheticSpec(seed=0))


def small_instance(seed=0):
    return generate(
        SyntheticSpec(clients=2, samples_per_client=3, dim=10, decay=1.5, seed=seed)
    )


class TestGenerate:
    def test_default_shape(self, default_instance):
        inst = default_instance
        assert inst.num_clients == 20
        assert inst.dim == 1000
        assert all(c.num_samples == 30 for c in inst.clients)
        assert inst.stacked_inputs.shape == (600, 1000)

    def test_optimum_interpolates(self, default_instance):
        inst = default_instance
        y = inst.stacked_targets
        resid = np.linalg.norm(inst.stacked_inputs @ inst.w_star - y)
        assert resid <= 1e-6 * np.linalg.norm(y)

    def test_rank_one_degenerate_min_norm(self):
        # Single sample: the minimum-norm solution is y * x / |x|^2.
        x = np.array([[2.0, 1.0, -1.0]])
        y = np.array([3.0])
        w, _ = min_norm_solution(x, y)
        np.testing.assert_allclose(w, 3.0 * x[0] / float(np.dot(x[0], x[0])), rtol=1e-14)
        np.testing.assert_allclose(x @ w, y, atol=1e-12)

    def test_min_norm_matches_independent_lstsq(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 10))
        y = rng.normal(size=6)
        ours, _ = min_norm_solution(x, y)
        reference = np.linalg.lstsq(x, y, rcond=None)[0]
        np.testing.assert_allclose(ours, reference, atol=1e-8)

    def test_w_star_in_row_space(self):
        inst = small_instance()
        x = inst.stacked_inputs
        _, _, vt = np.linalg.svd(x, full_matrices=True)
        null_basis = vt[x.shape[0]:]
        assert np.max(np.abs(null_basis @ inst.w_star)) < 1e-8

    def test_same_seed_identical_bytes(self):
        a = serialize_instance(generate(SyntheticSpec(clients=3, samples_per_client=2, dim=12, seed=5)))
        b = serialize_instance(generate(SyntheticSpec(clients=3, samples_per_client=2, dim=12, seed=5)))
        assert a == b

    def test_different_seed_differs(self):
        a = instance_hash(generate(SyntheticSpec(clients=3, samples_per_client=2, dim=12, seed=5)))
        b = instance_hash(generate(SyntheticSpec(clients=3, samples_per_client=2, dim=12, seed=6)))
        assert a != b

    def test_covariance_anisotropy(self, default_instance):
        # Per-coordinate sample variance must decay with the coordinate
        # index: Spearman rank correlation below -0.9.
        x = default_instance.stacked_inputs
        variances = x.var(axis=0)
        k = np.arange(1, x.shape[1] + 1)

        def ranks(a):
            out = np.empty(len(a))
            out[np.argsort(a)] = np.arange(len(a))
            return out

        rho = float(np.corrcoef(ranks(k.astype(float)), ranks(variances))[0, 1])
        assert rho < -0.9

    def test_overparameterization_required(self):
        with pytest.raises(DomainError):
            SyntheticSpec(clients=10, samples_per_client=10, dim=50)

    def test_decay_must_exceed_one(self):
        with pytest.raises(DomainError):
            SyntheticSpec(decay=1.0)


class TestLossAndGradients:
    def test_loss_at_optimum_negligible(self, default_instance):
        inst = default_instance
        norm_y_sq = float(np.dot(inst.stacked_targets, inst.stacked_targets))
        assert global_loss(inst, inst.w_star) <= 1e-10 * norm_y_sq

    def test_single_sample_hand_loss(self):
        data = ClientDataset(inputs=np.array([[1.0, 0.0]]), targets=np.array([2.0]), client_id=0)
        inst = FederationInstance(
            clients=(data,), w_star=np.array([2.0, 0.0]), metadata={"kind": "manual", "seed": 0}
        )
        assert global_loss(inst, np.zeros(2)) == pytest.approx(2.0, abs=0.0)  # 0.5 * 4

    def test_gradient_matches_central_difference(self):
        inst = small_instance()
        rng = np.random.default_rng(3)
        w = rng.normal(size=inst.dim)
        grad = global_gradient(inst, w)
        h = 1e-6
        for k in (0, 3, 7):
            e = np.zeros(inst.dim)
            e[k] = h
            fd = (global_loss(inst, w + e) - global_loss(inst, w - e)) / (2 * h)
            assert grad[k] == pytest.approx(fd, rel=1e-6, abs=1e-6)

    def test_global_gradient_is_mean_of_client_gradients(self):
        inst = small_instance()
        rng = np.random.default_rng(4)
        w = rng.normal(size=inst.dim)
        mean_grad = np.mean([client_gradient(c, w) for c in inst.clients], axis=0)
        np.testing.assert_allclose(global_gradient(inst, w), mean_grad, rtol=1e-12, atol=1e-12)

    def test_heterogeneity_zero_on_interpolating_instance(self, default_instance):
        # Labels are exactly interpolated, so every client gradient vanishes
        # at the optimum.
        assert heterogeneity_at_opt(default_instance) < 1e-12

    def test_heterogeneity_duplicated_clients_symmetric(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 8))
        y = rng.normal(size=3)
        a = ClientDataset(inputs=x, targets=y, client_id=0)
        b = ClientDataset(inputs=x.copy(), targets=y.copy(), client_id=1)
        # Duplicated rows make the stacked Gram singular; one copy has the
        # same solution set, so solve that instead.
        w_star, _ = min_norm_solution(x, y)
        inst = FederationInstance(clients=(a, b), w_star=w_star, metadata={"kind": "manual", "seed": 0})
        ga = client_gradient(a, inst.w_star)
        gb = client_gradient(b, inst.w_star)
        assert float(np.dot(ga, ga)) == pytest.approx(float(np.dot(gb, gb)), rel=1e-12, abs=1e-15)

    def test_single_client_heterogeneity_zero(self):
        inst = random_interpolation_instance(10, 1, 3, seed=2)
        assert heterogeneity_at_opt(inst) < 1e-16


class TestInterpolationInstance:
    def test_every_client_consistent(self):
        inst = random_interpolation_instance(20, 4, 3, seed=1)
        for c in inst.clients:
            resid = np.linalg.norm(c.inputs @ inst.w_star - c.targets)
            assert resid <= 1e-8 * max(1.0, np.linalg.norm(c.targets))

    def test_square_system_allowed(self):
        inst = random_interpolation_instance(10, 10, 1, seed=3)
        assert inst.num_clients == 10

    def test_oversized_rejected(self):
        with pytest.raises(DomainError):
            random_interpolation_instance(10, 10, 2, seed=0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        inst = small_instance(seed=9)
        path = tmp_path / "instance.bin"
        save_instance(inst, path)
        back = load_instance(path)
        assert back.num_clients == inst.num_clients
        np.testing.assert_array_equal(back.w_star, inst.w_star)
        for a, b in zip(inst.clients, back.clients):
            np.testing.assert_array_equal(a.inputs, b.inputs)
            np.testing.assert_array_equal(a.targets, b.targets)
            assert a.client_id == b.client_id
        assert serialize_instance(back) == serialize_instance(inst)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOT-AN-INSTANCE 1\n\x00\x00")
        with pytest.raises(DomainError):
            load_instance(path)

    def test_instance_validates_w_star(self):
        data = ClientDataset(inputs=np.array([[1.0, 0.0]]), targets=np.array([2.0]), client_id=0)
        with pytest.raises(DomainError):
            FederationInstance(clients=(data,), w_star=np.zeros(2), metadata={})
