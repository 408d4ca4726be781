import numpy as np
import pytest

from drim.autograd import Tensor
from drim.encoders import (
    Decoder,
    Discriminator,
    EncoderPair,
    NonFiniteInputError,
    SurvivalHead,
    discriminate,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from drim.model import DRIMModel, ModelConfig
from drim.nn import FeedForward, Linear, count_feedforward, frozen


def test_shared_rows_are_unit_norm_and_absent_rows_zero(rng):
    pair = EncoderPair(7, 5, rng).eval()
    x = rng.normal(size=(6, 7))
    present = np.array([1, 0, 1, 1, 0, 1], bool)
    s, u = encode(pair, x, present)
    np.testing.assert_allclose(np.linalg.norm(s.data[present], axis=1), 1.0, atol=1e-12)
    assert np.all(s.data[~present] == 0) and np.all(u.data[~present] == 0)


def test_all_absent_gives_zeros(rng):
    pair = EncoderPair(4, 3, rng).eval()
    s, u = encode(pair, rng.normal(size=(3, 4)), np.zeros(3, bool))
    assert not s.data.any() and not u.data.any()


def test_encoding_is_deterministic_in_eval_and_row_independent(rng):
    pair = EncoderPair(4, 3, rng).eval()
    x = rng.normal(size=(5, 4))
    pres = np.ones(5, bool)
    a = encode(pair, x, pres)[0].data
    np.testing.assert_array_equal(a, encode(pair, x, pres)[0].data)
    perm = rng.permutation(5)
    np.testing.assert_allclose(encode(pair, x[perm], pres)[0].data, a[perm], atol=1e-15)


def test_non_finite_input_names_patient_and_modality(rng):
    pair = EncoderPair(3, 2, rng, modality=2)
    x = np.zeros((4, 3))
    x[3, 1] = np.nan
    with pytest.raises(NonFiniteInputError, match="patient 3.*modality 2"):
        encode(pair, x, np.ones(4, bool))


def test_feedforward_parameter_count_formula(rng):
    dims = [7, 12, 12, 3]
    ff = FeedForward(dims, rng)
    assert ff.num_parameters() == count_feedforward(dims) == sum(a * b + b for a, b in zip(dims, dims[1:]))
    assert Linear(5, 2, rng).num_parameters() == 12


def test_discriminator_outputs_probabilities_and_is_deterministic(rng):
    D = Discriminator(4, rng)
    s, u = Tensor(rng.normal(size=(9, 4)) * 10), Tensor(rng.normal(size=(9, 4)) * 10)
    out = discriminate(D, s, u).data
    assert out.shape == (9,) and np.all((out > 0) & (out < 1))
    np.testing.assert_array_equal(out, discriminate(D, s, u).data)
    with pytest.raises(ValueError):
        discriminate(D, s, Tensor(np.ones((9, 3))))


def test_head_and_decoder_shapes(rng):
    h = SurvivalHead(4, 20, rng)(Tensor(rng.normal(size=(3, 4)))).data
    assert h.shape == (3, 20) and np.all((h > 0) & (h < 1))
    assert Decoder(4, 11, rng).eval()(Tensor(np.zeros((2, 4)))).shape == (2, 11)


def test_frozen_blocks_gradients_and_restores(rng):
    from drim.autograd import backward, sum_

    D = Discriminator(2, rng)
    s = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    with frozen(D):
        out = sum_(discriminate(D, s, Tensor(np.ones((3, 2)))))
    backward(out)
    assert all(p.grad is None for p in D.parameters())
    assert s.grad is not None
    assert all(p.requires_grad for p in D.parameters())


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    cfg = ModelConfig(feature_dims=[5, 6], d=4, n_intervals=6, heads=2, head_dim=3, decoders=True)
    model = DRIMModel(cfg, rng)
    meta = {"model_config": cfg.to_dict(), "note": "x"}
    save_checkpoint(tmp_path / "m.npz", model.state_dict(), meta)
    state, back = load_checkpoint(tmp_path / "m.npz")
    assert back["note"] == "x" and back["version"] == 1
    other = DRIMModel(ModelConfig.from_dict(back["model_config"]), np.random.default_rng(99))
    other.load_state_dict(state)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    x = [rng.normal(size=(3, 5)), rng.normal(size=(3, 6))]
    pres = np.ones((2, 3), bool)
    np.testing.assert_array_equal(model.predict(x, pres), other.predict(x, pres))
    assert not list(tmp_path.glob("*.tmp"))


def test_load_state_dict_rejects_mismatch(rng):
    model = DRIMModel(ModelConfig(feature_dims=[3, 3], d=2, n_intervals=4, heads=1, head_dim=2), rng)
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises((KeyError, ValueError)):
        model.load_state_dict(state)
