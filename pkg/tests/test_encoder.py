import numpy as np
import pytest

from lesionkit.encoder import MlpEncoder, patches_to_matrix
from lesionkit.errors import TrainingDivergenceError, ValidationError


def linearly_separable(n=120, dim=20, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(classes, size=n)
    centers = rng.normal(0, 4.0, size=(classes, dim))
    x = centers[y] + rng.normal(0, 0.3, size=(n, dim))
    return x, y


def test_encode_deterministic_and_shaped():
    enc = MlpEncoder(input_dim=20, hidden_dim=16, seed=1)
    x = np.random.default_rng(0).normal(size=(5, 20))
    a = enc.encode(x)
    b = enc.encode(x)
    assert a.shape == (5, 16)
    assert np.array_equal(a, b)
    assert enc.dimension == 16
    assert np.all(a >= 0.0)


def test_loss_strictly_decreases_over_first_epoch():
    x, y = linearly_separable()
    enc = MlpEncoder(input_dim=20, hidden_dim=32, seed=2)
    enc.ensure_head(3)
    before = enc.mean_loss(x, y)
    losses = enc.train(x, y, epochs=1, learning_rate=0.01, batch_size=32)
    after = enc.mean_loss(x, y)
    assert after < before
    assert losses[0] < before + 1e-9


def test_training_reaches_high_accuracy():
    x, y = linearly_separable()
    enc = MlpEncoder(input_dim=20, hidden_dim=32, seed=3)
    enc.ensure_head(3)
    enc.train(x, y, epochs=20, learning_rate=0.05, batch_size=16)
    assert np.mean(enc.predict(x) == y) > 0.95


def test_retraining_changes_features():
    x, y = linearly_separable()
    enc = MlpEncoder(input_dim=20, hidden_dim=32, seed=4)
    feats0 = enc.encode(x)
    enc.ensure_head(3)
    enc.train(x, y, epochs=3, learning_rate=0.05)
    assert not np.allclose(enc.encode(x), feats0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_divergence_raises():
    x, y = linearly_separable(n=40)
    enc = MlpEncoder(input_dim=20, hidden_dim=8, seed=5)
    enc.ensure_head(3)
    with pytest.raises(TrainingDivergenceError):
        enc.train(x * 1e90, y, epochs=8, learning_rate=1e30)


def test_label_out_of_range():
    enc = MlpEncoder(input_dim=4, hidden_dim=4, seed=0)
    enc.ensure_head(2)
    with pytest.raises(ValidationError):
        enc.train(np.zeros((3, 4)), np.array([0, 1, 5]), epochs=1)


def test_patches_to_matrix_empty():
    with pytest.raises(ValidationError):
        patches_to_matrix([])
