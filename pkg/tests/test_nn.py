import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetlab import autograd as ag
from forgetlab.autograd import ContractError, Tensor
from forgetlab.nn import (
    ConfigError,
    FeatureExtractor,
    HeadSet,
    Linear,
    SGDConfig,
    cosine_lr,
    dumps,
    init_model,
    load_extractor,
    load_model,
    loads,
    save_extractor,
    save_model,
    sgd_step,
)


class TestModel:
    def test_feature_dim(self):
        m = init_model([16, 64, 32], seed=0)
        assert m.extractor.feature_dim == 32
        assert m.extractor.features(np.zeros((5, 16))).shape == (5, 32)

    def test_same_seed_same_parameters(self):
        a, b = init_model([16, 64, 32], 3), init_model([16, 64, 32], 3)
        assert a.extractor.to_bytes() == b.extractor.to_bytes()

    def test_parameter_count_fixed(self):
        m = init_model([4, 8, 3], 0)
        n = sum(p.size for p in m.extractor.parameters())
        m.heads.start_task(0, 2)
        m(Tensor(np.zeros((2, 4))), 0)
        assert sum(p.size for p in m.extractor.parameters()) == n == 4 * 8 + 8 + 8 * 3 + 3

    def test_multi_head_exists_iff_started(self):
        m = init_model([4, 6], 0)
        with pytest.raises(KeyError):
            m.heads.head(1)
        m.heads.start_task(1, 3)
        assert m(Tensor(np.zeros((7, 4))), 1).shape == (7, 3)

    def test_single_head_shared(self):
        m = init_model([4, 6], 0, head_mode="single", total_classes=10)
        m.heads.start_task(0, 2)
        m.heads.start_task(1, 2)
        assert m.heads.head(0) is m.heads.head(1)
        assert m(Tensor(np.zeros((2, 4))), 1).shape == (2, 10)

    def test_zero_width_rejected(self):
        with pytest.raises(ConfigError):
            FeatureExtractor([4, 0, 2], np.random.default_rng(0))
        with pytest.raises(ConfigError):
            Linear(0, 3)

    def test_single_head_needs_class_count(self):
        with pytest.raises(ConfigError):
            HeadSet(4, "single")

    def test_clone_is_independent(self):
        m = init_model([3, 4], 0)
        c = m.clone()
        c.extractor.layers[0].weight.data += 1.0
        assert not np.array_equal(c.extractor.layers[0].weight.data, m.extractor.layers[0].weight.data)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0.01, 0, 100) == 0.01
        assert cosine_lr(0.01, 100, 100) <= 1e-12

    def test_midpoint(self):
        assert cosine_lr(0.01, 50, 100) == pytest.approx(0.0070711, abs=1e-7)

    @pytest.mark.parametrize("t,n", [(-1, 10), (11, 10), (0, 0)])
    def test_invalid(self, t, n):
        with pytest.raises(ContractError):
            cosine_lr(0.1, t, n)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-6, 10.0), st.integers(1, 10_000), st.data())
    def test_within_zero_and_r(self, r, n, data):
        t = data.draw(st.integers(0, n))
        v = cosine_lr(r, t, n)
        assert 0.0 <= v <= r

    def test_sgd_config_steps(self):
        cfg = SGDConfig(epochs=3, batch_size=32)
        assert cfg.steps(100) == 3 * math.ceil(100 / 32)

    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"epochs": 0}, {"batch_size": 0}, {"schedule": "step"}])
    def test_sgd_config_validation(self, kw):
        with pytest.raises(ConfigError):
            SGDConfig(**kw)


class TestSGD:
    def test_hand_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([2.0])
        sgd_step([p], 0.1)
        assert p.data[0] == pytest.approx(0.8, abs=1e-15)
        assert p.grad is None

    def test_zero_lr_unchanged(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_missing_grad(self):
        with pytest.raises(ContractError):
            sgd_step([Tensor([1.0], requires_grad=True)], 0.1)

    def test_half_batches_accumulate_to_full_batch(self):
        # linear model with mean-squared loss: sum of half-batch gradients of the
        # summed loss equals the full-batch gradient
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((8, 3)), rng.standard_normal((8, 1))
        w0 = rng.standard_normal((3, 1))

        def sse(w, xs, ys):
            r = ag.sub(ag.matmul(Tensor(xs), w), Tensor(ys))
            return ag.sum(ag.mul(r, r))

        full = Tensor(w0.copy(), requires_grad=True)
        ag.backward(sse(full, x, y))
        sgd_step([full], 0.01)

        acc = Tensor(w0.copy(), requires_grad=True)
        ag.backward(sse(acc, x[:4], y[:4]))
        ag.backward(sse(acc, x[4:], y[4:]))
        sgd_step([acc], 0.01)
        np.testing.assert_allclose(acc.data, full.data, atol=1e-14)


class TestCheckpoint:
    def test_extractor_round_trip(self, tmp_path):
        phi = init_model([5, 7, 3], 1).extractor
        save_extractor(phi, tmp_path / "phi")
        back = load_extractor(tmp_path / "phi")
        assert back.to_bytes() == phi.to_bytes()
        x = np.random.default_rng(0).standard_normal((4, 5))
        np.testing.assert_array_equal(back.features(x), phi.features(x))

    def test_model_round_trip(self, tmp_path):
        m = init_model([5, 7, 3], 1)
        m.heads.start_task(0, 2)
        m.heads.start_task(1, 4)
        m.heads.head(1).weight.data[:] = 0.5
        save_model(m, tmp_path / "m")
        back = load_model(tmp_path / "m")
        assert [n for n, _ in back.named_parameters()] == [n for n, _ in m.named_parameters()]
        for (_, a), (_, b) in zip(back.named_parameters(), m.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_serialisation_is_byte_stable(self):
        phi = init_model([3, 2], 0).extractor
        assert dumps(phi.named_parameters()) == dumps(phi.clone().named_parameters())

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            loads(b"not a checkpoint")

    def test_no_temp_file_left(self, tmp_path):
        save_extractor(init_model([3, 2], 0).extractor, tmp_path / "phi")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["phi"]
