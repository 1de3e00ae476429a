import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import class_activation_loop
from tarnet.errors import ConfigError, ShapeError
from tarnet.model import (
    ArchConfig,
    Label,
    LatentTensor,
    ablation_variant,
    build_model,
    classify,
    classify_activations,
    count_conv_layers,
    decode,
    encode,
    facilitate,
    forward_train,
    per_class_activation,
    summary,
)
from tarnet.tensor import Tensor, no_grad


def latent(arr):
    return LatentTensor(Tensor(np.asarray(arr, dtype=np.float64), dtype=np.float64))


def test_desk_preset_shapes():
    cfg = ArchConfig.desk()
    assert (cfg.input_size, cfg.latent_size, cfg.latent_depth, cfg.repeats) == (48, 3, 64, 3)
    mp = build_model(cfg, 0)
    x = Tensor(np.zeros((2, 3, 48, 48)))
    with no_grad():
        H = encode(mp, x)
        assert H.shape == (2, 64, 3, 3)
        assert decode(mp, H).shape == (2, 3, 48, 48)


def test_reference_preset_latent_is_15x15x128():
    cfg = ArchConfig.reference()
    assert (cfg.input_size, cfg.latent_size, cfg.latent_depth) == (240, 15, 128)


@settings(max_examples=20, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(1, 2),
    st.integers(1, 2),
)
def test_latent_shape_sweep(stages, n, repeats, mult):
    S = 2 ** (stages + 1) * mult
    cfg = ArchConfig(input_size=S, encoder_channels=tuple([2] * stages), latent_channels=n, repeats=repeats)
    mp = build_model(cfg, 0)
    with no_grad():
        H = encode(mp, Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 3, S, S))))
    assert H.shape == (2, 2 * n, S // 2 ** (stages + 1), S // 2 ** (stages + 1))


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError):
        ArchConfig(input_size=40)
    with pytest.raises(ConfigError):
        ArchConfig(repeats=0)
    with pytest.raises(ConfigError):
        ArchConfig(slope=-1.0)


def test_encode_rejects_wrong_size_and_names_expected():
    mp = build_model(ArchConfig.micro(), 0)
    with pytest.raises(ShapeError, match="16"):
        encode(mp, Tensor(np.zeros((1, 3, 32, 32))))


def test_conv_counts():
    assert count_conv_layers(ArchConfig.reference()) == 51
    one = ArchConfig(input_size=16, encoder_channels=(4,), latent_channels=1, repeats=1)
    # encoder: one block, stride 2 with channel change -> 2 convs + projection + head
    assert count_conv_layers(one, "encoder") == 4
    doubled = dataclasses.replace(ArchConfig.reference(), repeats=6)
    res = lambda c: count_conv_layers(c) - 2 - 7  # noqa: E731  heads and projections are fixed
    assert res(doubled) == 2 * res(ArchConfig.reference())
    assert "reference figure 45" in summary(ArchConfig.reference())


def test_facilitate_exact_idempotent_and_complete():
    rng = np.random.default_rng(0)
    H = latent(rng.standard_normal((4, 6, 2, 2)))
    labels = [1, 2, 2, 1]
    real = facilitate(H, Label.REAL).H.data
    fake = facilitate(H, Label.FAKE).H.data
    assert (real[:, 3:] == 0).all() and (fake[:, :3] == 0).all()
    assert real[:, :3].tobytes() == H.H.data[:, :3].tobytes()
    assert fake[:, 3:].tobytes() == H.H.data[:, 3:].tobytes()
    np.testing.assert_array_equal(real + fake, H.H.data)
    once = facilitate(H, labels)
    assert facilitate(once, labels).H.data.tobytes() == once.H.data.tobytes()
    assert H.H.data.any()  # input untouched


def test_facilitate_label_count_mismatch():
    with pytest.raises(ShapeError):
        facilitate(latent(np.ones((3, 2, 1, 1))), [1, 2])


def test_per_class_activation_matches_norm_oracle():
    rng = np.random.default_rng(1)
    H = rng.standard_normal((5, 8, 3, 3))
    a1, a2 = per_class_activation(latent(H))
    ref = class_activation_loop(H, 4)
    np.testing.assert_allclose(np.stack([a1.data, a2.data], 1), np.array(ref), atol=1e-12)


def test_per_class_activation_hand_values():
    H = np.zeros((1, 4, 2, 2))
    a1, a2 = per_class_activation(latent(H))
    assert (float(a1.data[0]), float(a2.data[0])) == (0.0, 0.0)
    H[:, :2] = 1.0
    a1, a2 = per_class_activation(latent(H))
    assert (float(a1.data[0]), float(a2.data[0])) == (1.0, 0.0)


def test_classify_rule_and_tie():
    assert classify_activations(0.7, 0.3) == Label.REAL
    assert classify_activations(0.3, 0.7) == Label.FAKE
    assert classify_activations(0.5, 0.5) == Label.REAL
    H = np.ones((1, 2, 1, 1))
    assert classify(H)[0] == Label.REAL


def test_classify_invariant_under_positive_scaling():
    rng = np.random.default_rng(2)
    for _ in range(200):
        H = rng.standard_normal((3, 4, 2, 2))
        s = 10 ** rng.uniform(-6, 6)
        np.testing.assert_array_equal(classify(H), classify(H * s))


def test_forward_train_masks_and_reaches_every_parameter():
    mp = build_model(ArchConfig.micro(), 0)
    x = Tensor(np.random.default_rng(3).uniform(-1, 1, (4, 3, 16, 16)))
    y = np.array([1, 2, 1, 2])
    fw = forward_train(mp, x, y)
    assert (fw.a2.data[y == 1] == 0).all() and (fw.a1.data[y == 2] == 0).all()
    assert fw.recon.shape == x.shape
    assert (np.abs(fw.recon.data) < 1).all()
    loss = (fw.a1 + fw.a2).sum() + (fw.a1_raw + fw.a2_raw).sum() + fw.recon.sum()
    loss.backward()
    for name, p in mp.params.items():
        assert p.grad is not None and np.isfinite(p.grad).all(), name


def test_build_model_is_deterministic():
    a = build_model(ArchConfig.desk(), 5)
    b = build_model(ArchConfig.desk(), 5)
    assert a.equal(b)
    assert not a.equal(build_model(ArchConfig.desk(), 6))


def test_decoder_output_strictly_inside_unit_interval():
    mp = build_model(ArchConfig.micro(), 0)
    with no_grad():
        out = decode(mp, LatentTensor(Tensor(np.full((2, 4, 1, 1), 50.0))))
    assert (np.abs(out.data) < 1).all()


def test_ablation_variants_differ_in_structure():
    cfg = ArchConfig.desk()
    full = ablation_variant(cfg, "full", 0)
    plain = ablation_variant(cfg, "relu-no-residual", 0)
    assert any(".proj." in n for n in full.params.names())
    assert not any(".proj." in n for n in plain.params.names())
    assert plain.config.final_activation == "relu"
    with pytest.raises(ConfigError):
        ablation_variant(cfg, "nope")
