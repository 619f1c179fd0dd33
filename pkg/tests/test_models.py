import numpy as np
import pytest

from adin import autodiff as ad
from adin.autodiff import Tensor
from adin.errors import ConfigError, DimensionError, ParseError
from adin.models import (CenterBank, EncoderParams, HeadParams, Layer, build_bundle, build_dual_branch,
                         build_mlp, closed_form_param_count, encode_dual_branch, encode_mlp, head_logits,
                         load_checkpoint, make_head, reinit_head, save_checkpoint)

import gradcheck


def scripted_mlp(x, weights, biases, acts):
    """Plain-numpy forward pass used as the oracle."""
    h = x
    for w, b, act in zip(weights, biases, acts):
        h = h @ w + b
        if act == "relu":
            h = np.maximum(h, 0.0)
    return h


def test_zero_weights_give_zero_features():
    layer = Layer(Tensor(np.zeros((5, 3))), Tensor(np.zeros(3)), "relu")
    out = encode_mlp(EncoderParams([layer]), np.ones((4, 5)))
    assert out.shape == (4, 3) and not out.data.any()


def test_identity_layer_passes_input_through():
    layer = Layer(Tensor(np.eye(4)), Tensor(np.zeros(4)), "linear")
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(encode_mlp(EncoderParams([layer]), x).data, x)


def test_mlp_matches_scripted_forward():
    rng = np.random.default_rng(12)
    enc = build_mlp(rng, [6, 10, 4])
    x = rng.normal(size=(5, 6))
    expected = scripted_mlp(x, [l.weight.data for l in enc.layers], [l.bias.data for l in enc.layers],
                            ["relu", "relu"])
    np.testing.assert_allclose(encode_mlp(enc, x).data, expected, rtol=1e-14)


def test_mlp_rejects_wrong_input_width():
    enc = build_mlp(np.random.default_rng(0), [6, 4])
    with pytest.raises(DimensionError):
        encode_mlp(enc, np.ones((2, 5)))


def test_layer_widths_must_chain():
    rng = np.random.default_rng(0)
    from adin.models import make_layer
    with pytest.raises(DimensionError):
        EncoderParams([make_layer(rng, 4, 5), make_layer(rng, 6, 2)])


def test_dual_branch_width_and_zero_trunk():
    rng = np.random.default_rng(0)
    enc = build_dual_branch(rng, [10, 12], d_global=8, d_local=8)
    for batch in (1, 3, 17):
        assert encode_dual_branch(enc, np.ones((batch, 10))).shape == (batch, 16)
    assert enc.d_feat == 16
    for layer in enc.layers:
        layer.weight.data[:] = 0
    out = encode_dual_branch(enc, rng.normal(size=(3, 10)))
    assert not out.data.any()


def test_dual_branch_order_matches_scripted_oracle():
    rng = np.random.default_rng(5)
    enc = build_dual_branch(rng, [6, 8], d_global=4, d_local=6)
    x = rng.normal(size=(3, 6))
    t = scripted_mlp(x, [enc.layers[0].weight.data], [enc.layers[0].bias.data], ["relu"])
    g = scripted_mlp(t, [enc.global_layers[0].weight.data], [enc.global_layers[0].bias.data], ["relu"])
    parts = [scripted_mlp(t[:, i * 4:(i + 1) * 4], [p.weight.data], [p.bias.data], ["relu"])
             for i, p in enumerate(enc.local_layers)]
    np.testing.assert_allclose(encode_dual_branch(enc, x).data, np.hstack([g, *parts]), rtol=1e-14)


def test_dual_branch_odd_trunk_is_config_error():
    with pytest.raises(ConfigError):
        build_dual_branch(np.random.default_rng(0), [6, 7], d_global=4)


def test_dual_branch_gradients():
    rng = np.random.default_rng(2)
    enc = build_dual_branch(rng, [5, 6], d_global=4)
    x = rng.normal(size=(4, 5))
    w = Tensor(rng.normal(size=(4, 8)))
    for p in enc.parameters():  # move pre-activations off the relu kink
        p.data += rng.uniform(0.05, 0.1, size=p.shape)
    gradcheck.check(lambda: (encode_dual_branch(enc, x) * w).sum(), enc.parameters())


def test_head_logits_examples():
    head = HeadParams(Tensor(np.zeros((3, 2))), Tensor([0.5, -1.0]))
    np.testing.assert_array_equal(head_logits(head, np.ones((4, 3))).data, np.tile([0.5, -1.0], (4, 1)))
    head = HeadParams(Tensor(np.eye(2)), Tensor(np.zeros(2)))
    feat = np.array([[1.5, -2.0], [0.0, 3.0]])
    np.testing.assert_array_equal(head_logits(head, feat).data, feat)
    rng = np.random.default_rng(3)
    head = make_head(rng, 5, 4)
    head.bias.data[:] = rng.normal(size=4)
    feat = rng.normal(size=(6, 5))
    np.testing.assert_allclose(head_logits(head, feat).data, feat @ head.weight.data + head.bias.data)
    with pytest.raises(DimensionError):
        head_logits(head, np.ones((2, 4)))


def test_head_needs_two_classes():
    with pytest.raises(ConfigError):
        HeadParams(Tensor(np.zeros((3, 1))), Tensor(np.zeros(1)))


def test_reinit_head_determinism():
    head = make_head(np.random.default_rng(0), 8, 5)
    a, b = reinit_head(head, 42), reinit_head(head, 42)
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    c = reinit_head(head, 43)
    assert (a.weight.data != c.weight.data).any()
    assert a.weight.shape == head.weight.shape and not a.bias.data.any()


def test_reinit_head_init_distribution_mean():
    # Weights ~ N(0, 2/fan_in): the mean of 10^4 draws sits within 3 sigma of zero.
    head = make_head(np.random.default_rng(0), 4, 2)
    draws = np.array([reinit_head(head, s).weight.data for s in range(1250)]).ravel()
    assert draws.size == 10_000
    sigma = np.sqrt(2 / 4) / np.sqrt(draws.size)
    assert abs(draws.mean()) < 3 * sigma
    assert draws.std() == pytest.approx(np.sqrt(2 / 4), rel=0.05)


def test_reinit_head_leaves_encoder_bit_identical():
    arch = {"d_in": 6, "hidden": [8], "d_feat": 4, "n_identities": 3, "nuisance_classes": [2]}
    bundle = build_bundle(arch, 0)
    before = bundle.checksum("encoder")
    bundle.id_head = reinit_head(bundle.id_head, 1)
    bundle.nuisance_heads = [reinit_head(h, 2) for h in bundle.nuisance_heads]
    assert bundle.checksum("encoder") == before


@pytest.mark.parametrize("arch", [
    {"d_in": 7, "hidden": [9, 5], "d_feat": 4, "n_identities": 6, "nuisance_classes": [3, 2]},
    {"d_in": 7, "hidden": [10], "d_feat": 4, "n_identities": 6, "nuisance_classes": [3], "dual_branch": True},
    {"d_in": 7, "hidden": [10], "d_feat": 4, "n_identities": 6, "nuisance_classes": [3], "dual_branch": True,
     "d_local": 6},
])
def test_parameter_count_closed_form(arch):
    assert build_bundle(arch, 0).n_parameters() == closed_form_param_count(arch)


@pytest.mark.parametrize("fmt", ["binary", "json"])
def test_checkpoint_round_trip_bit_exact(tmp_path, fmt):
    arch = {"d_in": 5, "hidden": [6], "d_feat": 4, "n_identities": 3, "nuisance_classes": [2, 3],
            "dual_branch": True}
    bundle = build_bundle(arch, 9)
    bundle.centers.centers[:] = np.random.default_rng(1).normal(size=bundle.centers.centers.shape)
    path = save_checkpoint(bundle, tmp_path / f"m.{fmt}", fmt=fmt)
    loaded = load_checkpoint(path)
    assert loaded.arch == bundle.arch
    for (n1, a1), (n2, a2) in zip(bundle.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        assert a1.tobytes() == a2.tobytes()
    if fmt == "binary":
        save_checkpoint(loaded, tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_truncated_checkpoint_is_parse_error(tmp_path):
    arch = {"d_in": 5, "hidden": [6], "d_feat": 4, "n_identities": 3, "nuisance_classes": [2]}
    path = save_checkpoint(build_bundle(arch, 0), tmp_path / "m.bin")
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_centerbank_copy_is_independent():
    bank = CenterBank.zeros(2, 3)
    other = bank.copy()
    other.centers[0, 0] = 1
    assert bank.centers[0, 0] == 0
