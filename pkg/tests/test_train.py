import numpy as np
import pytest

from oracles import activation_loss_loop, l1_loop
from tarnet.data import SplitSpec, synthesize
from tarnet.errors import ConfigError, ContractError, MissingGradientError
from tarnet.model import ArchConfig, build_model
from tarnet.optim import Optimizer, OptimizerConfig
from tarnet.tensor import ParamStore, Tensor
from tarnet.train import (
    LossWeights,
    TrainConfig,
    TransferPlan,
    activation_loss,
    reconstruction_loss,
    sequence_transfer,
    total_loss,
    train_base,
    transfer_few_shot,
)


def t(values):
    return Tensor(np.asarray(values, dtype=np.float64), dtype=np.float64)


@pytest.mark.parametrize(
    "a1,a2,label,expected",
    [(1.0, 0.0, 1, 0.0), (0.0, 0.0, 1, 1.0), (0.5, 0.5, 2, 1.0), (0.0, 1.0, 2, 0.0)],
)
def test_activation_loss_hand_values(a1, a2, label, expected):
    assert float(activation_loss(t([a1]), t([a2]), [label]).data) == expected


def test_activation_loss_matches_loop():
    rng = np.random.default_rng(0)
    a1, a2 = rng.uniform(0, 2, 9), rng.uniform(0, 2, 9)
    labels = rng.integers(1, 3, 9)
    got = float(activation_loss(t(a1), t(a2), labels).data)
    assert got == pytest.approx(activation_loss_loop(a1, a2, labels), abs=1e-12)


def test_activation_loss_rejects_bad_labels_and_shapes():
    with pytest.raises(ContractError):
        activation_loss(t([1.0]), t([0.0]), [0])
    with pytest.raises(ContractError):
        activation_loss(t([1.0, 2.0]), t([0.0, 1.0]), [1])


def test_reconstruction_loss_is_mean_abs_error():
    rng = np.random.default_rng(1)
    x, r = rng.uniform(-1, 1, (2, 3, 4, 4)), rng.uniform(-1, 1, (2, 3, 4, 4))
    assert float(reconstruction_loss(t(x), t(r)).data) == pytest.approx(l1_loop(x - r) / x.size, abs=1e-14)
    with pytest.raises(ContractError):
        reconstruction_loss(t(x), t(r[:1]))


@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0])
def test_total_loss_linear_in_reconstruction(lam):
    l_act = t(0.75)
    for rec in (0.0, 0.5, 2.0):
        assert float(total_loss(t(rec), l_act, lam).data) == lam * rec + 0.75
    assert float(total_loss(t(2.0), l_act, LossWeights(lam)).data) == lam * 2.0 + 0.75


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        LossWeights(-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"batch_size": 1},
        {"epochs": -1},
        {"precision": "half"},
        {"activation_source": "latent"},
        {"lr_schedule": "step"},
        {"optimizer": "rmsprop"},
        {"lr": 0.0},
    ],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_dict_round_trip():
    cfg = TrainConfig(lr=3e-4, flip=True, lr_schedule="cosine")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_sgd_update_rule():
    store = ParamStore({"w": Tensor(np.array(5.0), requires_grad=True, dtype=np.float64)})
    store["w"].grad = np.array(1.0)
    Optimizer(OptimizerConfig("sgd", lr=0.1)).step(store)
    assert float(store["w"].data) == pytest.approx(4.9, abs=1e-15)


@pytest.mark.parametrize("g", [1e-6, 0.3, -250.0])
def test_adam_first_step_moves_by_lr(g):
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    store = ParamStore({"w": Tensor(np.array(2.0), requires_grad=True, dtype=np.float64)})
    store["w"].grad = np.array(g)
    Optimizer(OptimizerConfig("adam", lr, b1, b2, eps)).step(store)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = 2.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert float(store["w"].data) == pytest.approx(expected, rel=1e-12)
    assert abs(float(store["w"].data) - 2.0) == pytest.approx(lr, rel=1e-2)


def test_optimizer_missing_gradient():
    store = ParamStore({"w": Tensor(np.ones(2), requires_grad=True)})
    with pytest.raises(MissingGradientError, match="'w'"):
        Optimizer().step(store)


@pytest.fixture(scope="module")
def tiny():
    ds = synthesize(SplitSpec(base=8, fewshot=3, test=4, domains=("blendswap", "localwarp")), 16, 0)
    return ds, build_model(ArchConfig.micro(), 0)


def test_train_base_deterministic_and_input_untouched(tiny):
    ds, mp = tiny
    before = mp.copy()
    cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3, lr_schedule="cosine", flip=True)
    a, hist_a = train_base(mp, ds.get("blendswap", "base"), cfg)
    b, hist_b = train_base(mp, ds.get("blendswap", "base"), cfg)
    assert a.equal(b) and hist_a == hist_b
    assert mp.equal(before) and not a.equal(mp)
    assert [r.epoch for r in hist_a] == [1, 2]


def test_train_base_needs_both_labels(tiny):
    ds, mp = tiny
    reals = [s for s in ds.get("blendswap", "base") if s.label.value == 1]
    with pytest.raises(ConfigError, match="both labels"):
        train_base(mp, reals, TrainConfig(epochs=1, batch_size=4))


def test_transfer_zero_epochs_is_bitwise_copy(tiny):
    ds, mp = tiny
    out = transfer_few_shot(mp, ds.get("localwarp", "fewshot"), TrainConfig(epochs=0, batch_size=2), shots=3)
    assert out.equal(mp) and out is not mp


def test_transfer_checks_shot_count(tiny):
    ds, mp = tiny
    with pytest.raises(ConfigError, match="expected 5:5"):
        transfer_few_shot(mp, ds.get("localwarp", "fewshot"), TrainConfig(epochs=1, batch_size=2), shots=5)


def test_transfer_plan_validation():
    with pytest.raises(ConfigError):
        TransferPlan("blendswap", [])
    with pytest.raises(ConfigError):
        TransferPlan("blendswap", ["localwarp", "blendswap"])
    with pytest.raises(ConfigError):
        TransferPlan("blendswap", ["localwarp"], shots=0)
    plan = TransferPlan("blendswap", ["localwarp", "sharpswap"])
    assert plan.stage_name(1) == "blendswap→localwarp→sharpswap"


def test_sequence_transfer_scores_each_stage(tiny):
    ds, mp = tiny
    plan = TransferPlan("blendswap", ["localwarp"], shots=3, config=TrainConfig(epochs=1, batch_size=2))
    tests = {d: ds.get(d, "test") for d in ("blendswap", "localwarp")}
    _, snaps = sequence_transfer(mp, plan, {"localwarp": ds.get("localwarp", "fewshot")}, tests, keep_models=True)
    assert len(snaps) == 1 and set(snaps[0].accuracies) == set(tests)
    assert all(0 <= a <= 1 for a in snaps[0].accuracies.values())
    with pytest.raises(ConfigError, match="localwarp"):
        sequence_transfer(mp, plan, {}, tests)


def test_transfer_plan_stage_decay():
    base = TrainConfig(lr=1e-3, lr_mult=2.0)
    plan = TransferPlan("blendswap", ["localwarp", "sharpswap"], config=base, lr_decay=0.1)
    assert plan.stage_config(0) == base
    assert plan.stage_config(1).lr_mult == pytest.approx(0.2)
    assert plan.stage_config(1).lr == base.lr
    with pytest.raises(ConfigError):
        TransferPlan("blendswap", ["localwarp"], lr_decay=0.0)
