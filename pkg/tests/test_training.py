import numpy as np
import pytest

from deepfool import attacks
from deepfool.attacks import AttackResult
from deepfool.data import synth_blobs, split
from deepfool.errors import ConfigError, TrainingError
from deepfool.models import model_to_bytes
from deepfool.tensor import Dense
from deepfool.training import (
    TRACE_COLUMNS,
    FinetuneConfig,
    TrainConfig,
    build_adversarial_set,
    finetune_experiment,
    loss_and_parameter_gradients,
    parse_arch,
    sgd_step,
    train,
    trace_to_csv,
)


@pytest.fixture(scope="module")
def blobs():
    data = synth_blobs(12, 3, 60, 0.25, seed=11)
    tr, te = split(data, (0.75, 0.25), seed=0)
    f, _ = train("fc:16,3", tr, TrainConfig(epochs=15, learning_rate=0.05))
    return f, tr, te


def test_parameter_gradients_on_toy_net():
    # five weights: 2x1 then 1x3
    rng = np.random.default_rng(0)
    layers = [
        Dense(rng.normal(size=(2, 1)), np.array([0.3]), "relu"),
        Dense(rng.normal(size=(1, 3)), rng.normal(size=3)),
    ]
    X = rng.normal(size=(8, 2))
    y = rng.integers(0, 3, size=8)
    _, grads = loss_and_parameter_gradients(layers, X, y)
    h = 1e-6
    for li in range(2):
        for which in (0, 1):
            base = (layers[li].weight, layers[li].bias)[which]
            for idx in np.ndindex(base.shape):
                vals = []
                for sgn in (1, -1):
                    arr = base.copy()
                    arr[idx] += sgn * h
                    parts = [layers[li].weight, layers[li].bias]
                    parts[which] = arr
                    trial = list(layers)
                    trial[li] = Dense(parts[0], parts[1], layers[li].activation)
                    vals.append(loss_and_parameter_gradients(trial, X, y)[0])
                fd = (vals[0] - vals[1]) / (2 * h)
                g = grads[li][which][idx]
                assert abs(fd - g) <= 1e-5 * max(abs(g), 1e-4)


def test_separable_two_class_blobs():
    data = synth_blobs(4, 2, 100, 0.1, seed=3)
    f, trace = train("fc:8,2", data, TrainConfig(epochs=20, learning_rate=0.05))
    assert trace[-1]["train_acc"] >= 0.99
    assert len(trace) == 20 and list(trace[0]) == list(TRACE_COLUMNS)


def test_zero_learning_rate_keeps_weights():
    data = synth_blobs(4, 2, 20, 0.1, seed=3)
    cfg0 = TrainConfig(epochs=0)
    cfg = TrainConfig(epochs=3, learning_rate=0.0)
    a, _ = train("fc:5,2", data, cfg0)
    b, _ = train("fc:5,2", data, cfg)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)


def test_seed_determinism_bitwise():
    data = synth_blobs(6, 3, 30, 0.3, seed=1)
    a, _ = train("fc:7,3", data, TrainConfig(epochs=4, seed=5))
    b, _ = train("fc:7,3", data, TrainConfig(epochs=4, seed=5))
    c, _ = train("fc:7,3", data, TrainConfig(epochs=4, seed=6))
    assert model_to_bytes(a) == model_to_bytes(b)
    assert a.content_hash() != c.content_hash()


def test_momentum_zero_is_gradient_descent():
    rng = np.random.default_rng(2)
    layers = [Dense(rng.normal(size=(3, 2)), rng.normal(size=2))]
    grads = [(rng.normal(size=(3, 2)), rng.normal(size=2))]
    vel = [(rng.normal(size=(3, 2)), rng.normal(size=2))]
    new, _ = sgd_step(layers, vel, grads, 0.1, 0.0)
    assert np.array_equal(new[0].weight, layers[0].weight - 0.1 * grads[0][0])
    assert np.array_equal(new[0].bias, layers[0].bias - 0.1 * grads[0][1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_epoch():
    data = synth_blobs(4, 2, 20, 0.1, seed=0)
    with pytest.raises(TrainingError) as info:
        train("fc:5,2", data, TrainConfig(epochs=5, learning_rate=1e200, momentum=0.9))
    assert info.value.epoch >= 1


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        FinetuneConfig(alpha=0.5)
    with pytest.raises(ConfigError):
        FinetuneConfig(epochs=0)
    with pytest.raises(ConfigError):
        parse_arch("conv:3x3,10", 4)
    assert parse_arch("fc:5,2", 4) == ("fc", [4, 5, 2])


def test_adversarial_set_labels_and_scaling(blobs):
    f, tr, _ = blobs
    one, s1 = build_adversarial_set(f, tr, "deepfool", alpha=1.0)
    two, s2 = build_adversarial_set(f, tr, "deepfool", alpha=2.0)
    assert np.array_equal(one.y, tr.y) and np.array_equal(two.y, tr.y)
    assert s2["mean_norm2"] == pytest.approx(2 * s1["mean_norm2"], rel=1e-12)
    n1 = np.linalg.norm(one.x - tr.x, axis=1)
    n2 = np.linalg.norm(two.x - tr.x, axis=1)
    np.testing.assert_allclose(n2, 2 * n1, rtol=1e-9, atol=1e-12)


def test_adversarial_set_passthrough(blobs, monkeypatch):
    f, tr, _ = blobs

    def never_fools(model, x, cfg=None):
        return AttackResult(np.ones_like(x), 50, 0, 0, False, x, 0.02, 0.0)

    monkeypatch.setattr(attacks, "deepfool", never_fools)
    out, stats = build_adversarial_set(f, tr, "deepfool")
    assert np.array_equal(out.x, tr.x) and stats["n_passthrough"] == len(tr)


def test_deepfool_set_smaller_than_fgs_set(blobs):
    f, tr, _ = blobs
    _, sd = build_adversarial_set(f, tr, "deepfool")
    _, sf = build_adversarial_set(f, tr, "fgs")
    assert sd["mean_norm2"] < sf["mean_norm2"]


def test_finetune_trace_and_control(blobs):
    f, tr, te = blobs
    cfg = FinetuneConfig(include_clean_control=True, eval_size=40)
    out = finetune_experiment(f, tr, te, cfg, TrainConfig(learning_rate=0.05), seed=0)
    _, trace = out["runs"]["deepfool"]
    _, control = out["runs"]["none"]
    assert [r["epoch"] for r in trace] == [1, 2, 3, 4, 5]
    assert all(np.isfinite(r["rho_adv"]) for r in trace + control)
    # clean control stays near the starting robustness
    assert abs(control[-1]["rho_adv"] / out["baseline_rho"] - 1) < 0.25
    lines = trace_to_csv(trace).splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS) and len(lines) == 6
