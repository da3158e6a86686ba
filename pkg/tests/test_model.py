import numpy as np
import pytest
import torch
import torch.nn.functional as F

from reidattack.exceptions import CheckpointError, ConfigError
from reidattack.model import (LossSpec, ReIDVictim, TrainConfig, checkpoint_roundtrip, classify,
                              embed, input_gradient)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig(learning_rate=0)


def test_victim_learns_train_identities(victim, bundle):
    assert (victim.predict(bundle.images("train")) == bundle.person_ids("train")).mean() > 0.95
    assert victim.loss_history_[-1] < victim.loss_history_[0]


def test_output_shapes_and_normalisation(tiny_victim, tiny_bundle):
    X = tiny_bundle.images("query")
    emb = tiny_victim.transform(X)
    assert emb.shape == (len(X), tiny_victim.embedding_dim)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-12)
    p = tiny_victim.predict_proba(X)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(embed(tiny_victim, X[0]), emb[0])
    np.testing.assert_allclose(classify(tiny_victim, X[0]), p[0])


def test_training_is_deterministic(tiny_bundle, tiny_victim):
    again = ReIDVictim(epochs=2, seed=3).fit(tiny_bundle.images("train"),
                                             tiny_bundle.person_ids("train"))
    assert again.parameter_checksum() == tiny_victim.parameter_checksum()
    other = ReIDVictim(epochs=2, seed=4).fit(tiny_bundle.images("train"),
                                             tiny_bundle.person_ids("train"))
    assert other.parameter_checksum() != tiny_victim.parameter_checksum()


def test_fit_rejects_label_mismatch(tiny_bundle):
    with pytest.raises(ConfigError, match="labels"):
        ReIDVictim(epochs=1).fit(tiny_bundle.images("train"), [1, 2])


def test_input_gradient_matches_manual_autograd(tiny_victim, tiny_bundle):
    X = tiny_bundle.images("query")[:3]
    target = np.array([0, 1, 2])
    g = tiny_victim.input_gradient(X, LossSpec.to_class(target))
    x = torch.tensor(X, requires_grad=True)
    _, logits = tiny_victim.net_(x)
    F.cross_entropy(logits, torch.as_tensor(target), reduction="sum").backward()
    np.testing.assert_allclose(g, x.grad.numpy(), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(input_gradient(tiny_victim, X[0], LossSpec.to_class(0)),
                               tiny_victim.input_gradient(X[:1], LossSpec.to_class(0))[0])


def test_distribution_loss_equals_class_loss_for_one_hot(tiny_victim, tiny_bundle):
    X = tiny_bundle.images("query")[:2]
    one_hot = np.eye(len(tiny_victim.classes_))[1]
    np.testing.assert_allclose(tiny_victim.input_gradient(X, LossSpec.to_class(1)),
                               tiny_victim.input_gradient(X, LossSpec.to_distribution(one_hot)),
                               atol=1e-14)


def test_loss_spec_validation(tiny_victim, tiny_bundle):
    X = tiny_bundle.images("query")[:1]
    with pytest.raises(ConfigError, match="outside"):
        tiny_victim.input_gradient(X, LossSpec.to_class(99))
    with pytest.raises(ConfigError, match="probability"):
        tiny_victim.input_gradient(X, LossSpec.to_distribution([0.5, 0.2, 0.1]))
    with pytest.raises(ConfigError, match="unknown loss"):
        LossSpec("hinge", 0)


def test_checkpoint_roundtrip(tiny_victim, tiny_bundle, tmp_path):
    restored = checkpoint_roundtrip(tiny_victim, tmp_path / "v.ckpt")
    X = tiny_bundle.images("gallery")
    np.testing.assert_array_equal(restored.transform(X), tiny_victim.transform(X))
    assert restored.parameter_checksum() == tiny_victim.parameter_checksum()


def test_checkpoint_corruption_detected(tiny_victim, tmp_path):
    path = tmp_path / "v.ckpt"
    tiny_victim.save(path)
    data = bytearray(path.read_bytes())
    data[-5] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        ReIDVictim.load(path)
    path.write_bytes(b"junk")
    with pytest.raises(CheckpointError, match="magic"):
        ReIDVictim.load(path)
    with pytest.raises(CheckpointError, match="not found"):
        ReIDVictim.load(tmp_path / "missing.ckpt")


def test_checkpoint_architecture_mismatch(tiny_victim, tmp_path):
    path = tmp_path / "v.ckpt"
    tiny_victim.save(path)
    arch = dict(tiny_victim.architecture_config(), embedding_dim=32)
    with pytest.raises(CheckpointError, match="embedding_dim"):
        ReIDVictim.load(path, architecture_config=arch)


def test_classify_is_softmax_of_logits(tiny_victim, tiny_bundle):
    X = tiny_bundle.images("query")
    logits = tiny_victim.decision_function(X)
    expected = np.exp(logits - logits.max(1, keepdims=True))
    expected /= expected.sum(1, keepdims=True)
    np.testing.assert_allclose(tiny_victim.predict_proba(X), expected, rtol=1e-6)
