import math

import numpy as np
import pytest

from msra import oracle
from msra.core import Alphabet, collapse, softmax_grid
from msra.decode import argmax_grid
from msra.lattice import grad_wrt_logits, set_loss
from msra.model import (
    CKPT_MAGIC,
    AdadeltaState,
    PatchClassifier,
    TrainConfig,
    adadelta_step,
    backward_model,
    dataset_loss,
    evaluate,
    extract_patches,
    forward_model,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from msra.synthgen import DatasetSpec, iter_samples

DIGITS = Alphabet()
TOY = DatasetSpec(min_length=3, max_length=5, length_mean=4, length_std=1, glyph_gap=28, margin=28,
                  n_train=40, n_test=10, seed=0)


@pytest.fixture(scope="module")
def toy_records():
    return list(iter_samples(TOY, "train")), list(iter_samples(TOY, "test"))


class TestForward:
    def test_grid_shape(self):
        model = init_model(11)
        assert forward_model(np.zeros((56, 392), np.uint8), model).shape == (2, 14, 11)
        assert forward_model(np.zeros((28, 392), np.uint8), model).shape == (1, 14, 11)

    def test_zero_model_is_uniform(self):
        model = init_model(11, zero=True)
        img = np.random.default_rng(0).integers(0, 256, size=(56, 392), dtype=np.uint8)
        assert np.allclose(softmax_grid(forward_model(img, model)), 1 / 11)

    def test_indivisible_image(self):
        with pytest.raises(ValueError):
            forward_model(np.zeros((30, 392)), init_model(11))

    def test_patch_order(self):
        model = PatchClassifier(2, 2, 2)
        img = np.arange(24).reshape(4, 6)
        P = extract_patches(img, model) * 255
        assert P.shape == (6, 4)
        assert P[1].tolist() == [2, 3, 8, 9]
        assert P[3].tolist() == [12, 13, 18, 19]


class TestBackward:
    def test_zero_gradient(self):
        model = init_model(3, patch=(2, 2), hidden=4, seed=1)
        grads = backward_model(np.ones((4, 4)), model, np.zeros((2, 2, 3)))
        assert all(not g.any() for g in grads.values())

    def test_single_patch_outer_product(self):
        model = init_model(3, patch=(2, 2), seed=1)
        img = np.array([[0, 51], [102, 255]])
        g = np.array([[[0.5, -1.0, 0.25]]])
        grads = backward_model(img, model, g)
        assert np.allclose(grads["W"], np.outer(g[0, 0], img.ravel() / 255))
        assert np.allclose(grads["b"], g[0, 0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            backward_model(np.ones((4, 4)), init_model(3, patch=(2, 2)), np.zeros((1, 2, 3)))

    @pytest.mark.parametrize("hidden", [0, 5])
    def test_finite_differences(self, hidden):
        rng = np.random.default_rng(hidden)
        model = init_model(3, patch=(2, 2), hidden=hidden, seed=hidden)
        img = rng.integers(0, 256, size=(4, 6))
        targets = [(1, 2), (2,)]

        def loss():
            return set_loss(softmax_grid(forward_model(img, model)), targets).loss

        grads = backward_model(img, model, grad_wrt_logits(forward_model(img, model), targets))
        for name, value in model.params.items():
            def f(p, name=name):
                model.params[name] = p
                return loss()
            num = oracle.finite_diff_grad(f, value.copy(), 1e-6)
            model.params[name] = value
            assert oracle.max_rel_error(grads[name], num) < 1e-4, name


class TestAdadelta:
    def test_zero_gradient_is_noop(self):
        params = {"w": np.array([1.0, -2.0])}
        adadelta_step(params, {"w": np.zeros(2)}, AdadeltaState())
        assert params["w"].tolist() == [1.0, -2.0]

    def test_first_step(self):
        params = {"w": np.zeros(1)}
        adadelta_step(params, {"w": np.ones(1)}, AdadeltaState(0.95, 1e-6))
        expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
        assert params["w"][0] == pytest.approx(expected, rel=1e-12)
        assert params["w"][0] == pytest.approx(-4.4721e-3, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adadelta_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdadeltaState())

    def test_fuzz_stays_finite(self):
        rng = np.random.default_rng(0)
        params = {"w": np.zeros(4)}
        state = AdadeltaState()
        scales = 10.0 ** rng.uniform(-8, 8, size=100_000)
        for g in rng.normal(size=(100_000, 4)) * scales[:, None]:
            adadelta_step(params, {"w": g}, state)
        assert np.all(np.isfinite(params["w"]))
        assert np.all(state.sq_grad["w"] >= 0) and np.all(state.sq_delta["w"] >= 0)


class TestTrain:
    def test_zero_epochs(self, toy_records, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        model, history = train(toy_records[0], TrainConfig(epochs=0, checkpoint=str(ckpt)))
        ref = init_model(11, seed=0)
        assert history == []
        assert all(np.array_equal(model.params[k], ref.params[k]) for k in ref.params)
        assert ckpt.exists()

    def test_initial_loss_closed_form(self, toy_records):
        # uniform grid: every path contributes C(paths) * lambda weight * 1D CTC on a uniform sequence
        records = toy_records[0][:6]
        model = init_model(11, zero=True)
        cfg = TrainConfig()
        expected = 0.0
        for rec in records:
            H, W = rec.image.shape[0] // 28, rec.image.shape[1] // 28
            uniform = np.full((H + W - 1, 11), 1 / 11)
            weight = math.comb(H + W - 2, H - 1) * 0.9 ** (W - 1) * 0.1 ** (H - 1)
            ps = [weight * oracle.ctc1d_forward(uniform, DIGITS.encode(t)) for t in rec.targets]
            expected += -math.log(sum(ps) / len(ps))
        assert dataset_loss(model, records, cfg) == pytest.approx(expected / len(records), rel=1e-10)

    def test_smoothed_loss_non_increasing(self, toy_records):
        _, history = train(toy_records[0], TrainConfig(epochs=8, batch_size=4))
        losses = np.array([h["loss"] for h in history])
        smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
        assert np.all(np.diff(smooth) <= 1e-9)

    def test_history_and_log(self, toy_records, tmp_path):
        log_path = tmp_path / "log.json"
        seen = []
        _, history = train(toy_records[0][:8], TrainConfig(epochs=2, log_path=str(log_path)),
                           test_records=toy_records[1][:4], on_epoch=seen.append)
        assert [h["epoch"] for h in history] == [1, 2] and seen == history
        assert {"loss", "seconds", "NED", "SA", "IA"} <= set(history[0])
        assert log_path.exists()

    def test_deterministic(self, toy_records):
        a, _ = train(toy_records[0][:8], TrainConfig(epochs=1, batch_size=4))
        b, _ = train(toy_records[0][:8], TrainConfig(epochs=1, batch_size=4))
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1.0})


def test_single_row_acts_as_1d_ctc():
    spec = DatasetSpec(max_sequences=1, min_length=2, max_length=4, length_mean=3, length_std=1,
                       glyph_gap=28, margin=28, n_train=24, n_test=6)
    records = list(iter_samples(spec, "train"))
    model, _ = train(records, TrainConfig(epochs=2, batch_size=4, lambda1=1.0, lambda2=0.0))
    for rec in iter_samples(spec, "test"):
        probs = softmax_grid(forward_model(rec.image, model))
        greedy = collapse(argmax_grid(probs)[0])
        assert predict(model, rec.image, "rows", DIGITS) == ([DIGITS.decode(greedy)] if greedy else [])


class TestEvaluate:
    def test_perfect_injector(self, toy_records):
        records = toy_records[1]
        cells = {r.image.tobytes(): r.cells for r in records}

        def injector(img):
            return np.eye(11)[cells[img.tobytes()]]

        m = evaluate(injector, records, "rows", DIGITS)
        assert (m["NED"], m["SA"], m["IA"]) == (0.0, 100.0, 100.0)

    def test_empty_decode(self, toy_records):
        m = evaluate(lambda img: np.full((img.shape[0] // 28, 14, 11), 1 / 11), toy_records[1], "rows", DIGITS)
        assert (m["NED"], m["SA"], m["IA"]) == (100.0, 0.0, 0.0)

    def test_reports(self, toy_records):
        m, reports = evaluate(init_model(11), toy_records[1], return_reports=True)
        assert len(reports) == m["images"] == len(toy_records[1])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = init_model(11, patch=(28, 28), hidden=3, seed=4)
        cfg = TrainConfig(epochs=3)
        save_checkpoint(tmp_path / "m.ckpt", model, cfg)
        back, header = load_checkpoint(tmp_path / "m.ckpt")
        assert back.hidden == 3 and back.n_classes == 11
        assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
        assert TrainConfig.from_dict(header["config"]) == cfg

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", init_model(2, patch=(1, 1), zero=True))
        data = (tmp_path / "m.ckpt").read_bytes()
        assert data.startswith(CKPT_MAGIC)
        n = int.from_bytes(data[8:12], "little")
        # W is 2x1, b is 2: four float64 values after the header
        assert len(data) == 12 + n + 4 * 8

    def test_rejects_damage(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_model(2, patch=(1, 1)))
        data = path.read_bytes()
        path.write_bytes(b"X" + data[1:])
        with pytest.raises(ValueError):
            load_checkpoint(path)
        path.write_bytes(data[:-3])
        with pytest.raises(ValueError):
            load_checkpoint(path)
        path.write_bytes(data + b"\0")
        with pytest.raises(ValueError):
            load_checkpoint(path)
