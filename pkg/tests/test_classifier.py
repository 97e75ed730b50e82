import numpy as np
import pytest

from blobtrack import classifier
from blobtrack.classifier import (
    EvaluationBuffer,
    Mlp,
    TrainConfig,
    VERDICT_CONTINUE,
    VERDICT_PROMOTE,
    VERDICT_TERMINATE,
    bce_loss,
    forward,
    forward_batch,
    gradients,
    init,
    load,
    load_patch_dataset,
    save,
    train,
    verdict,
)
from blobtrack.patch import PATCH_SIZE, write_patch_csv


def loss_at(params, x, y):
    model = Mlp(*params)
    return bce_loss(forward_batch(model, x), y)


def test_gradients_match_finite_differences(rng):
    model = init(3)
    x = rng.random((4, 784))
    y = np.array([1.0, 0.0, 1.0, 0.0])
    grads = gradients(model, x, y)
    step = 1e-6
    worst = 0.0
    for k, p in enumerate(model.params()):
        flat_idx = rng.choice(p.size, size=min(25, p.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            params_p = [q.copy() for q in model.params()]
            params_m = [q.copy() for q in model.params()]
            params_p[k][idx] += step
            params_m[k][idx] -= step
            fd = (loss_at(params_p, x, y) - loss_at(params_m, x, y)) / (2 * step)
            denom = max(abs(fd), 1.0)
            worst = max(worst, abs(grads[k][idx] - fd) / denom)
    assert worst < 1e-5


def test_forward_matches_forward_batch(rng):
    model = init(1)
    x = rng.random((8, 784))
    batch = forward_batch(model, x)
    single = np.array([forward(model, xi) for xi in x])
    np.testing.assert_allclose(single, batch, rtol=1e-12)
    assert np.all((batch > 0.0) & (batch < 1.0))


def test_forward_rejects_non_finite():
    model = init(0)
    x = np.full(784, 0.5)
    x[3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        forward(model, x)


def separable_dataset(rng, n=80):
    x = np.empty((n, 784))
    y = np.empty(n)
    for i in range(n):
        y[i] = i % 2
        center = 0.7 if y[i] > 0.5 else 0.3
        x[i] = np.clip(center + 0.05 * rng.standard_normal(784), 0.0, 1.0)
    return x, y


def test_training_overfits_separable_data(rng):
    x, y = separable_dataset(rng)
    config = TrainConfig(epochs=60, seed=0, train_fraction=1.0)
    model, report = train(x, y, config)
    assert report.train_accuracy[-1] == 1.0
    assert report.train_loss[-1] < report.train_loss[0]
    assert len(report.train_loss) == config.epochs


def test_training_is_deterministic(rng):
    x, y = separable_dataset(rng, n=40)
    config = TrainConfig(epochs=2, seed=5)
    a, _ = train(x, y, config)
    b, _ = train(x, y, config)
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa, pb)


def test_training_requires_both_classes():
    x = np.zeros((10, 784))
    with pytest.raises(ValueError, match="both classes"):
        train(x, np.ones(10))


def test_model_save_load_round_trip(tmp_path):
    model = init(7)
    path = tmp_path / "model.bin"
    save(model, path)
    back = load(path)
    for pa, pb in zip(model.params(), back.params()):
        np.testing.assert_array_equal(pa, pb)


def test_model_load_rejects_corruption(tmp_path):
    model = init(7)
    path = tmp_path / "model.bin"
    save(model, path)
    data = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXXX" + bytes(data[5:]))
    with pytest.raises(ValueError, match="magic"):
        load(bad_magic)

    truncated = tmp_path / "short.bin"
    truncated.write_bytes(bytes(data[:-16]))
    with pytest.raises(ValueError, match="truncated"):
        load(truncated)

    bad_version = tmp_path / "version.bin"
    v = bytearray(data)
    v[5] = 99
    bad_version.write_bytes(bytes(v))
    with pytest.raises(ValueError, match="version"):
        load(bad_version)


def test_verdict_unanimity_rule():
    buf = EvaluationBuffer(maxlen=5)
    for _ in range(4):
        buf.push(True)
    assert verdict(buf) == VERDICT_CONTINUE  # not full yet
    buf.push(True)
    assert verdict(buf) == VERDICT_PROMOTE
    buf.push(False)  # one dissent in the window
    assert verdict(buf) == VERDICT_CONTINUE
    for _ in range(5):
        buf.push(False)
    assert verdict(buf) == VERDICT_TERMINATE


def test_default_buffer_length():
    assert EvaluationBuffer().maxlen == classifier.EVAL_BUFFER_LEN == 15


def test_load_patch_dataset(tmp_path, rng):
    for sub in ("pos", "neg"):
        (tmp_path / sub).mkdir()
    for i in range(3):
        write_patch_csv(
            tmp_path / "pos" / f"{i}.csv", rng.standard_normal((PATCH_SIZE, PATCH_SIZE))
        )
    for i in range(2):
        write_patch_csv(
            tmp_path / "neg" / f"{i}.csv", rng.standard_normal((PATCH_SIZE, PATCH_SIZE))
        )
    x, y = load_patch_dataset(tmp_path)
    assert x.shape == (5, 784)
    np.testing.assert_array_equal(y, [1.0, 1.0, 1.0, 0.0, 0.0])
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_load_patch_dataset_empty(tmp_path):
    (tmp_path / "pos").mkdir()
    (tmp_path / "neg").mkdir()
    with pytest.raises(ValueError, match="no patches"):
        load_patch_dataset(tmp_path)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(train_fraction=0.0)
