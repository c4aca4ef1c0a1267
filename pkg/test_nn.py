"""Tests for the hypernetwork-parameterized dense network."""

import json

import numpy as np
import pytest

from services.errors import CheckpointError, DimensionError
from services.hypernet import (
    AdamState,
    GradSample,
    HnFdnnModel,
    MlpSpec,
    adam_step,
    backward,
    emit_output_layer,
    forward,
    grad_check,
    hn_output_dim,
    init_model,
    load_checkpoint,
    random_grad_sample,
    save_checkpoint,
)
from services.numerics import rng_stream, stream_id

SU_MAIN = MlpSpec(layer_sizes=[16, 50, 6, 2], hidden_activation="tanh")
SU_HN = MlpSpec(layer_sizes=[2, 40, 24, 14], hidden_activation="relu")
MU_MAIN = MlpSpec(layer_sizes=[64, 130, 10, 8], hidden_activation="tanh")
MU_HN = MlpSpec(layer_sizes=[2, 160, 100, 88], hidden_activation="relu")


def draws(i=0):
    return rng_stream(99, stream_id("nn-test", i))


def scalar_model(w2, b2, hn_w, hn_b):
    """main 1-1-1 with tanh; hn 2-h-2 emitting [W3, b3]"""
    main = MlpSpec(layer_sizes=[1, 1, 1], hidden_activation="tanh")
    hn = MlpSpec(layer_sizes=[2, 2, 2], hidden_activation="linear")
    params = {
        "main.W2": np.array([[w2]]), "main.b2": np.array([b2]),
        "hn.W2": np.eye(2), "hn.b2": np.zeros(2),
        "hn.W3": np.asarray(hn_w, dtype=float), "hn.b3": np.asarray(hn_b, dtype=float),
    }
    return HnFdnnModel(main_spec=main, hn_spec=hn, params=params, memory=0, users=1)


class TestSpecs:
    def test_hn_output_dims(self):
        assert hn_output_dim(SU_MAIN) == 14
        assert hn_output_dim(MU_MAIN) == 88

    def test_table_identities(self):
        for main, users in ((SU_MAIN, 1), (MU_MAIN, 4)):
            assert main.layer_sizes[0] == 2 * (7 + 1) * users
            assert main.layer_sizes[-1] == 2 * users

    def test_too_shallow(self):
        with pytest.raises(ValueError):
            MlpSpec(layer_sizes=[4, 2])

    def test_wrong_hn_output(self):
        bad = MlpSpec(layer_sizes=[2, 40, 24, 13], hidden_activation="relu")
        with pytest.raises(DimensionError, match="14"):
            init_model(SU_MAIN, bad, draws())


class TestForward:
    def test_all_zero_gives_zero(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        for name in model.params:
            model.params[name][...] = 0.0
        z, _ = forward(model, np.ones(16), np.array([0.5, 0.5]))
        assert np.all(z == 0)

    def test_scalar_hand_calc(self):
        # hn is linear with identity hidden layer, so [W3, b3] = hn.W3 c + hn.b3
        model = scalar_model(0.8, 0.1, [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        c = np.array([0.5, -0.2])
        z, _ = forward(model, np.array([0.3]), c)
        assert z[0] == pytest.approx(0.5 * np.tanh(0.8 * 0.3 + 0.1) - 0.2)

    def test_single_and_batch_agree(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        rng = draws(1)
        Z = rng.normal((5, 16))
        C = rng.uniform(0, 1, (5, 2))
        batch, _ = forward(model, Z, C)
        for i in range(5):
            single, _ = forward(model, Z[i], C[i])
            assert np.allclose(single, batch[i], rtol=0, atol=1e-14)

    def test_cached_output_layer_is_exact(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        rng = draws(2)
        for name in model.params:
            model.params[name] += 0.1 * rng.normal(model.params[name].shape)
        Z = rng.normal((40, 16))
        c = np.array([0.6, 0.4])
        full, _ = forward(model, Z, np.tile(c, (40, 1)))
        cached, _ = forward(model, Z, None, output_layer=emit_output_layer(model, c))
        assert np.array_equal(full, cached)

    def test_input_dim_mismatch(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        with pytest.raises(DimensionError):
            forward(model, np.ones(15), np.array([0.5, 0.5]))

    def test_missing_state_vector(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        with pytest.raises(DimensionError):
            forward(model, np.ones(16))

    def test_initial_output_layer_is_small(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        W, b = emit_output_layer(model, np.array([1.0, 1.0]))
        assert W.shape == (2, 6) and b.shape == (2,)
        assert np.max(np.abs(W)) < 0.1
        assert np.max(np.abs(W)) > 0

    def test_emitted_layer_is_row_major_weights_then_biases(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        model.params["hn.W4"][...] = 0.0
        model.params["hn.b4"][...] = np.arange(14.0)
        W, b = emit_output_layer(model, np.array([0.3, 0.8]))
        assert np.array_equal(W, np.arange(12.0).reshape(2, 6))
        assert np.array_equal(b, [12.0, 13.0])


class TestBackward:
    def test_zero_upstream(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        _, cache = forward(model, draws(3).normal((4, 16)), draws(4).uniform(0, 1, (4, 2)))
        grads = backward(model, cache, np.zeros((4, 2)))
        assert set(grads) == set(model.params)
        assert all(np.all(g == 0) for g in grads.values())

    def test_scalar_chain_rule(self):
        w2, b2 = 0.8, 0.1
        model = scalar_model(w2, b2, [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        z1, c = 0.3, np.array([0.5, -0.2])
        _, cache = forward(model, np.array([z1]), c)
        grads = backward(model, cache, np.array([1.0]))
        h = np.tanh(w2 * z1 + b2)
        W3 = c[0]
        assert grads["main.W2"][0, 0] == pytest.approx(W3 * (1 - h**2) * z1)
        assert grads["main.b2"][0] == pytest.approx(W3 * (1 - h**2))
        # d z / d [W3, b3] = [h, 1]; the hn output layer sees its hidden activations c
        assert np.allclose(grads["hn.W3"], np.outer([h, 1.0], c))
        assert np.allclose(grads["hn.b3"], [h, 1.0])

    def test_stale_cache(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        _, cache = forward(model, np.ones(16), np.array([0.5, 0.5]))
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        adam_step(AdamState.for_model(model), model, grads)
        with pytest.raises(DimensionError, match="stale"):
            backward(model, cache, np.ones(2))

    def test_cached_forward_cannot_backprop(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        layer = emit_output_layer(model, np.array([0.5, 0.5]))
        _, cache = forward(model, np.ones((3, 16)), None, output_layer=layer)
        with pytest.raises(DimensionError):
            backward(model, cache, np.ones((3, 2)))

    def test_no_hn_model_has_trainable_output(self):
        model = init_model(SU_MAIN, None, draws())
        assert "main.W4" in model.params and not any(k.startswith("hn.") for k in model.params)
        _, cache = forward(model, draws(5).normal((3, 16)))
        grads = backward(model, cache, np.ones((3, 2)))
        assert grads["main.W4"].shape == (2, 6)


class TestGradCheck:
    @pytest.mark.parametrize("seed", range(10))
    def test_single_user_topology(self, seed):
        rng = draws(100 + seed)
        model = init_model(SU_MAIN, SU_HN, rng)
        assert grad_check(model, random_grad_sample(model, rng), h=1e-6) < 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_multi_user_topology(self, seed):
        rng = draws(200 + seed)
        model = init_model(MU_MAIN, MU_HN, rng)
        err = grad_check(model, random_grad_sample(model, rng, batch=3), h=1e-6, max_params=1500, rng=rng)
        assert err < 1e-5

    def test_fd_nn_baseline(self):
        rng = draws(300)
        model = init_model(SU_MAIN, None, rng)
        assert grad_check(model, random_grad_sample(model, rng)) < 1e-5

    def test_linear_net_is_near_exact(self):
        main = MlpSpec(layer_sizes=[4, 5, 3, 2], hidden_activation="linear")
        hn = MlpSpec(layer_sizes=[2, 6, 8], hidden_activation="linear")
        rng = draws(301)
        model = init_model(main, hn, rng, hn_output_init=1.0)
        assert grad_check(model, random_grad_sample(model, rng), h=1e-5) < 1e-6

    def test_detects_corrupted_gradient(self):
        rng = draws(302)
        model = init_model(SU_MAIN, SU_HN, rng)
        sample = random_grad_sample(model, rng)
        _, cache = forward(model, sample.z1, sample.c)
        grads = backward(model, cache, sample.upstream)
        grads["main.W2"] = grads["main.W2"] * 1.5 + 1e-3
        assert grad_check(model, sample, grads=grads) > 1e-2

    def test_step_range(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        sample = GradSample(np.ones((1, 16)), np.ones((1, 2)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            grad_check(model, sample, h=1e-2)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        before = {k: v.copy() for k, v in model.params.items()}
        adam_step(AdamState.for_model(model), model, {k: np.zeros_like(v) for k, v in model.params.items()})
        assert all(np.array_equal(before[k], model.params[k]) for k in before)

    def test_hand_formula(self):
        model = scalar_model(0.8, 0.1, np.eye(2), np.zeros(2))
        opt = AdamState.for_model(model, lr=0.01)
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        grads["main.W2"] = np.array([[0.5]])
        adam_step(opt, model, grads)
        m_hat = (0.1 * 0.5) / (1 - 0.9)
        v_hat = (0.001 * 0.25) / (1 - 0.999)
        assert model.params["main.W2"][0, 0] == pytest.approx(0.8 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8))
        assert opt.step == 1

    def test_deterministic(self):
        a = init_model(SU_MAIN, SU_HN, draws(7))
        b = init_model(SU_MAIN, SU_HN, draws(7))
        grads = {k: draws(8).normal(v.shape) for k, v in a.params.items()}
        adam_step(AdamState.for_model(a), a, grads)
        adam_step(AdamState.for_model(b), b, grads)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_shape_mismatch(self):
        model = init_model(SU_MAIN, SU_HN, draws())
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        grads["hn.b2"] = np.zeros(3)
        with pytest.raises(DimensionError):
            adam_step(AdamState.for_model(model), model, grads)


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        model = init_model(SU_MAIN, SU_HN, draws(), memory=7, users=1, input_scale=88.5)
        opt = AdamState.for_model(model, lr=2e-3)
        adam_step(opt, model, {k: draws(9).normal(v.shape) for k, v in model.params.items()})
        save_checkpoint(tmp_path / "m.json", model, opt)
        again, opt2 = load_checkpoint(tmp_path / "m.json", SU_MAIN, SU_HN)

        Z, C = draws(10).normal((8, 16)), draws(11).uniform(0, 1, (8, 2))
        assert np.array_equal(forward(model, Z, C)[0], forward(again, Z, C)[0])
        assert again.input_scale == 88.5 and again.memory == 7
        assert opt2.step == 1 and opt2.lr == 2e-3
        assert all(np.array_equal(opt.m[k], opt2.m[k]) for k in opt.m)

    def test_schema_records_reshape_convention(self, tmp_path):
        save_checkpoint(tmp_path / "m.json", init_model(SU_MAIN, SU_HN, draws()))
        doc = json.loads((tmp_path / "m.json").read_text())
        assert doc["reshape_convention"] == "row-major-wb"
        assert doc["hn_spec"]["layer_sizes"] == [2, 40, 24, 14]

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(path, init_model(SU_MAIN, SU_HN, draws()))
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_topology(self, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(path, init_model(SU_MAIN, SU_HN, draws()))
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(path, MU_MAIN, MU_HN)

    def test_tampered_shape(self, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(path, init_model(SU_MAIN, SU_HN, draws()))
        doc = json.loads(path.read_text())
        doc["params"]["main.W2"]["data"] = doc["params"]["main.W2"]["data"][:-1]
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
