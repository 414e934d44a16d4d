import numpy as np
import pytest

from metatraffic import autodiff as ad
from metatraffic.checkpoint import CheckpointError
from metatraffic.config import desk_config
from metatraffic.data import few_shot_split, synth_city
from metatraffic.model import META_PE, PARAM_NAMES, PRIVATE, SHARED
from metatraffic.trainer import (
    MetaTask,
    finetune,
    inner_adapt,
    meta_step,
    pretrain,
    train_from_scratch,
    transfer_params,
)


def tiny_cfg(**over):
    base = {
        "model.T": 6,
        "model.T_out": 2,
        "model.hidden": 4,
        "model.memory_items": 4,
        "model.embed_dim": 5,
        "train.batch_size": 12,
        "train.max_epochs": 2,
        "train.finetune_epochs": 2,
        "train.finetune_batch_size": 12,
        "data.stride": 6,
        "data.finetune_stride": 6,
        "data.eval_stride": 6,
        "data.finetune_days": 1,
    }
    base.update(over)
    return desk_config(**base)


def city(n, days=2, seed=0, profile="source"):
    return synth_city(n, days * 24 * 6, 6, seed, profile)


# ------------------------------------------------------------------ toy MAML


def linear_loss(x, y):
    """mean |theta * x - y| for the scalar model f(x) = theta * x."""

    def fn(t):
        return ad.mean(ad.absolute(t["theta"] * np.asarray(x) - np.asarray(y)))

    return fn


def square_loss(c):
    def fn(t):
        return ad.sum(ad.square(t["theta"] - c))

    return fn


def test_inner_adapt_scalar_hand_gradient():
    # theta*x - y < 0 at theta=1, x=2, y=5 -> d|.|/dtheta = -x = -2
    out = inner_adapt({"theta": np.array(1.0)}, linear_loss([2.0], [5.0]), lr=0.1, frozen=())
    assert out["theta"] == pytest.approx(1.0 + 0.1 * 2.0, abs=1e-15)


def test_inner_adapt_fixed_point_and_copy():
    p = {"theta": np.array([3.0])}
    out = inner_adapt(p, square_loss(3.0), lr=0.5, steps=3, frozen=())
    np.testing.assert_array_equal(out["theta"], [3.0])
    assert out["theta"] is not p["theta"]


def test_inner_adapt_leaves_meta_pe_and_input_untouched():
    rng = np.random.default_rng(0)
    p = {"theta": rng.normal(size=2), "pe_scale": rng.normal(size=(1, 2)), "pe_basis": rng.normal(size=(3, 2))}
    keep = {k: v.copy() for k, v in p.items()}

    def loss(t):
        return ad.sum(ad.square(t["theta"])) + ad.sum(t["pe_scale"] * t["pe_basis"])

    out = inner_adapt(p, loss, lr=0.1, steps=2)
    for k in META_PE:
        assert np.array_equal(out[k], p[k])
    assert not np.array_equal(out["theta"], p["theta"])
    for k in p:
        assert np.array_equal(p[k], keep[k])


def test_inner_adapt_rejects_empty_support():
    with pytest.raises(ValueError):
        inner_adapt({"theta": np.array(0.0)}, None, 0.1)


def test_meta_step_zero_query_gradient_is_fixed_point():
    p = {"theta": np.array([2.0])}
    res = meta_step(p, [MetaTask(square_loss(1.0), square_loss(2.0))], 0.1, 0.5, inner_steps=0)
    np.testing.assert_array_equal(res.params["theta"], [2.0])


def test_meta_step_without_inner_steps_is_plain_sgd():
    p = {"theta": np.array([0.5])}
    res = meta_step(p, [MetaTask(square_loss(9.0), square_loss(2.0))], 0.1, 0.25, inner_steps=0)
    # d/dtheta (theta - 2)^2 = 2 (0.5 - 2) = -3
    np.testing.assert_allclose(res.params["theta"], [0.5 + 0.25 * 3.0], rtol=0, atol=1e-15)
    assert res.query_losses == [pytest.approx(2.25)]


def test_meta_step_first_order_gradient_taken_at_adapted_copy():
    p = {"theta": np.array([0.0])}
    res = meta_step(p, [MetaTask(square_loss(1.0), square_loss(3.0))], inner_lr=0.25, outer_lr=0.1)
    # inner: 0 - 0.25 * 2 (0 - 1) = 0.5; query grad at 0.5: 2 (0.5 - 3) = -5
    np.testing.assert_allclose(res.params["theta"], [0.5], atol=1e-15)


def test_meta_step_requires_query():
    with pytest.raises(ValueError):
        meta_step({"theta": np.array(0.0)}, [MetaTask(square_loss(0.0), None)], 0.1, 0.1)


def test_meta_step_quadratic_toy_improves_in_most_seeds():
    def post_adapt_loss(theta, targets, inner_lr):
        total = 0.0
        for s, q in targets:
            adapted = inner_adapt({"theta": theta}, square_loss(s), inner_lr, frozen=())
            total += float(np.sum((adapted["theta"] - q) ** 2))
        return total / len(targets)

    improved = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        theta = rng.normal(size=3) * 3
        centers = rng.normal(size=3)
        targets = [(centers + rng.normal(0, 0.3, 3), centers + rng.normal(0, 0.3, 3)) for _ in range(3)]
        tasks = [MetaTask(square_loss(s), square_loss(q)) for s, q in targets]
        before = post_adapt_loss(theta, targets, 0.1)
        after_theta = meta_step({"theta": theta}, tasks, 0.1, 0.05).params["theta"]
        improved += post_adapt_loss(after_theta, targets, 0.1) < before
    assert improved >= 18


def test_meta_step_respects_trainable_subset():
    p = {"a": np.array([1.0]), "b": np.array([1.0])}

    def loss(t):
        return ad.sum(ad.square(t["a"])) + ad.sum(ad.square(t["b"]))

    res = meta_step(p, [MetaTask(loss, loss)], 0.1, 0.1, trainable=["a"], inner_frozen=())
    assert res.params["b"] is p["b"]
    assert res.params["a"][0] < 1.0


# ----------------------------------------------------------- pretrain/transfer


def test_pretrain_zero_epochs_equals_initialization():
    cfg = tiny_cfg(**{"train.max_epochs": 0})
    a = pretrain(city(6), cfg, seed=3)
    b = pretrain(city(6), cfg, seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in PARAM_NAMES)
    np.testing.assert_array_equal(a.params["pe_scale"], 1.0)


def test_pretrain_logs_and_is_deterministic():
    cfg = tiny_cfg()
    log1, log2 = [], []
    a = pretrain(city(6), cfg, seed=1, log=log1.append)
    b = pretrain(city(6), cfg, seed=1, log=log2.append)
    assert a.to_bytes() == b.to_bytes()
    assert [r["epoch"] for r in log1] == [1, 2]
    assert set(log1[0]) == {"epoch", "mean_query_mae", "wall_ms"}
    assert [r["mean_query_mae"] for r in log1] == [r["mean_query_mae"] for r in log2]


def test_meta_pe_frozen_when_disabled():
    cfg = tiny_cfg(**{"tasks.enable_mpe": False})
    init = pretrain(city(6), tiny_cfg(**{"tasks.enable_mpe": False, "train.max_epochs": 0}), seed=2)
    done = pretrain(city(6), cfg, seed=2)
    for k in META_PE:
        assert np.array_equal(init.params[k], done.params[k])
    assert not np.array_equal(init.params["memory"], done.params["memory"])


def test_transfer_contract_across_node_counts():
    cfg = tiny_cfg()
    ckpt = pretrain(city(8), cfg, seed=0)
    params = transfer_params(ckpt, 5, cfg, np.random.default_rng(1))
    for k in SHARED:
        assert np.array_equal(params[k], ckpt.params[k])
    assert params["node_embedding"].shape == (5, 5)
    assert params["pe_basis"].shape == (5, 6)
    model = finetune(ckpt, city(5, seed=9, profile="target"), cfg.replace(**{"train.finetune_epochs": 0}), seed=0)
    for k in SHARED:
        assert np.array_equal(model.params[k], ckpt.params[k])
    for k in PRIVATE:
        assert model.params[k].shape[0] == 5


def test_transfer_rejects_dimension_mismatch():
    ckpt = pretrain(city(6), tiny_cfg(**{"train.max_epochs": 0}), seed=0)
    with pytest.raises(CheckpointError, match="embed_dim"):
        transfer_params(ckpt, 4, tiny_cfg(**{"model.embed_dim": 7}), np.random.default_rng(0))
    with pytest.raises(CheckpointError, match="T="):
        transfer_params(ckpt, 4, tiny_cfg(**{"model.T": 8}), np.random.default_rng(0))


def test_finetune_logs_total_loss_rows():
    cfg = tiny_cfg(**{"train.finetune_epochs": 3})
    ckpt = pretrain(city(6), cfg, seed=0)
    rows = []
    model = finetune(ckpt, city(4, seed=5, profile="target"), cfg, seed=0, log=rows.append)
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"epoch", "total", "mae", "sep", "comp"}
    assert model.history == rows


def test_finetune_total_loss_decreases_over_five_epochs():
    cfg = desk_config(**{"train.max_epochs": 2, "data.stride": 24})
    target, _ = few_shot_split(synth_city(12, 14 * 144, 6, 10007, "target"), 7)
    ckpt = pretrain(synth_city(20, 10 * 144, 6, 0, "source"), cfg, seed=0)
    rows = []
    finetune(ckpt, target, cfg, seed=0, log=rows.append)
    assert len(rows) == 5
    assert rows[-1]["total"] < rows[0]["total"]


def test_loss_regimes_instrumented():
    cfg = tiny_cfg()
    pre, fine = [], []
    ckpt = pretrain(city(6), cfg, seed=0, hook=lambda rec, tr, y, mem: pre.append(rec))
    finetune(ckpt, city(4, seed=3, profile="target"), cfg, seed=0, hook=lambda rec, tr, y, mem: fine.append(rec))
    assert pre and all(r.regime == "pretrain" and r.total == r.mae and r.sep_term == r.comp_term == 0.0 for r in pre)
    w = cfg.loss
    for r in fine:
        assert r.regime == "finetune"
        assert abs(r.total - (w.c1 * r.mae + w.c2 * r.sep + w.c3 * r.comp)) < 1e-12
    assert any(r.sep > 0 or r.comp > 0 for r in fine)


def test_scratch_baseline_runs_with_same_budget():
    cfg = tiny_cfg()
    rows = []
    model = train_from_scratch(city(4, seed=3, profile="target"), cfg, seed=0, log=rows.append)
    assert len(rows) == cfg.train.finetune_epochs
    assert model.params["node_embedding"].shape[0] == 4
