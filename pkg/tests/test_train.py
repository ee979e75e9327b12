import json
import math

import numpy as np
import pytest
from scipy import stats

from asca import model as M
from asca import train as TR
from asca import tensor as T
from asca.augment import AugmentConfig
from asca.data import ArrayDataset, synthetic_spectrograms
from asca.tensor import ConfigError, Tensor
from asca.train import OptimizerState, TrainConfig


def tiny(n=16, classes=4, seed=0):
    return synthetic_spectrograms(n=n, num_classes=classes, canvas=(32, 32), seed=seed)


def micro(classes=4, arch="C-C-C-T"):
    return M.parse_arch_spec(arch, preset="micro", num_classes=classes)


QUICK = dict(batch_size=4, epochs=2, val_fraction=0.0)


# -- loss -------------------------------------------------------------------


def test_bce_examples():
    assert float(T.bce_with_logits(Tensor(np.zeros((1, 1))), np.ones((1, 1))).data) == pytest.approx(math.log(2), abs=1e-7)
    big = T.bce_with_logits(Tensor(np.array([[40.0]])), np.ones((1, 1)))
    assert np.isfinite(big.data) and float(big.data) < 1e-17


def test_bce_rejects_targets_outside_unit_interval():
    with pytest.raises(ValueError):
        T.bce_with_logits(Tensor(np.zeros((1, 2))), np.array([[0.5, 1.5]]))


# -- optimizer --------------------------------------------------------------


def params_from(arrays):
    return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}


def test_adamw_first_step_is_signed_lr():
    g = np.array([[0.3, -2.0], [1e-3, -1e-3]])
    p = params_from({"w": np.ones((2, 2))})
    TR.adamw_step(p, {"w": g}, OptimizerState(), 1e-2, TrainConfig(weight_decay=0.0))
    assert np.allclose(p["w"].data - 1, -1e-2 * np.sign(g), rtol=1e-4)


def test_adamw_zero_grad_keeps_params():
    p = params_from({"w": np.full((3, 3), 2.0)})
    TR.adamw_step(p, {"w": np.zeros((3, 3))}, OptimizerState(), 1e-2, TrainConfig(weight_decay=0.0))
    assert np.array_equal(p["w"].data, np.full((3, 3), 2.0))


def test_adamw_decay_is_pure_shrink_and_skips_norms():
    p = params_from({"w": np.full((3, 3), 2.0), "s1.b0.bn.gamma": np.full(3, 2.0)})
    zeros = {k: np.zeros_like(v.data) for k, v in p.items()}
    TR.adamw_step(p, zeros, OptimizerState(), 1e-2, TrainConfig(weight_decay=0.1))
    assert np.array_equal(p["w"].data, np.full((3, 3), 2.0 * (1 - 1e-3)))
    assert np.array_equal(p["s1.b0.bn.gamma"].data, np.full(3, 2.0))


def test_adamw_without_decay_equals_adam_bitwise():
    rng = np.random.default_rng(0)
    init = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=5)}
    stream = [{k: rng.normal(size=v.shape) for k, v in init.items()} for _ in range(25)]
    p = params_from(init)
    st = OptimizerState()
    cfg = TrainConfig(weight_decay=0.0)
    for g in stream:
        TR.adamw_step(p, g, st, 3e-3, cfg)
    ref = {k: v.copy() for k, v in init.items()}
    m = {k: np.zeros_like(v) for k, v in init.items()}
    v2 = {k: np.zeros_like(v) for k, v in init.items()}
    for t, g in enumerate(stream, 1):
        for k in ref:
            m[k] = 0.9 * m[k] + (1 - 0.9) * g[k]
            v2[k] = 0.999 * v2[k] + (1 - 0.999) * (g[k] * g[k])
            ref[k] -= 3e-3 * (m[k] / (1 - 0.9 ** t)) / (np.sqrt(v2[k] / (1 - 0.999 ** t)) + 1e-8)
    assert all(p[k].data.tobytes() == ref[k].tobytes() for k in ref)


# -- schedule ---------------------------------------------------------------


def test_cosine_examples():
    assert TR.cosine_lr(0, 100, 5e-5) == 5e-5
    assert TR.cosine_lr(100, 100, 5e-5, 1e-6) == 1e-6
    assert TR.cosine_lr(50, 100, 5e-5, 1e-6) == pytest.approx((5e-5 + 1e-6) / 2, rel=1e-12)
    lrs = [TR.cosine_lr(s, 100, 5e-5) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("step", [-1, 101])
def test_cosine_out_of_range(step):
    with pytest.raises(ValueError):
        TR.cosine_lr(step, 100, 5e-5)


def test_recipe_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.lr0, c.epochs, c.schedule) == (12, 5e-5, 30, "cosine")
    assert (c.weight_decay, c.betas, c.eps, c.lr_min) == (0.01, (0.9, 0.999), 1e-8, 0.0)


@pytest.mark.parametrize("kw", [{"batch_size": 1}, {"epochs": 0}, {"drop_path": 1.0}, {"schedule": "step"}])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- sampler ----------------------------------------------------------------


def skewed_targets():
    return np.eye(2)[[0] * 99 + [1]]


def test_sampler_balances_skewed_classes():
    idx = TR.balanced_sampler(skewed_targets(), np.random.default_rng(0), length=10_000)
    ones = int((idx == 99).sum())
    sigma = math.sqrt(10_000 * 0.25)
    assert abs(ones - 5000) <= 3 * sigma


def test_sampler_marginal_is_uniform_chi_square():
    targets = np.eye(4)[[0] * 50 + [1] * 5 + [2] * 20 + [3] * 2]
    idx = TR.balanced_sampler(targets, np.random.default_rng(1), length=10_000)
    counts = np.bincount(targets[idx].argmax(1), minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_sampler_single_class_is_uniform_over_examples():
    idx = TR.balanced_sampler(np.ones((7, 1)), np.random.default_rng(2), length=7000)
    assert stats.chisquare(np.bincount(idx, minlength=7)).pvalue > 0.01
    assert len(TR.balanced_sampler(np.ones((7, 1)), np.random.default_rng(2))) == 7


def test_sampler_determinism_and_empty_class():
    t = skewed_targets()
    a = TR.balanced_sampler(t, np.random.default_rng(5))
    assert np.array_equal(a, TR.balanced_sampler(t, np.random.default_rng(5)))
    with pytest.raises(ConfigError):
        TR.balanced_sampler(np.eye(3)[[0, 1]], np.random.default_rng(0))


# -- loop -------------------------------------------------------------------


def test_loss_traces_are_identical_across_runs():
    ds, spec = tiny(), micro()
    a = TR.train(ds, spec, TrainConfig(**QUICK, lr0=1e-3), AugmentConfig(noise=False, freq_mask_max=4, time_mask_max=4))
    b = TR.train(ds, spec, TrainConfig(**QUICK, lr0=1e-3), AugmentConfig(noise=False, freq_mask_max=4, time_mask_max=4))
    assert a.losses() == b.losses() and len(a.losses()) == 8
    assert all(np.isfinite(a.losses()))


def test_lr_trace_endpoints():
    res = TR.train(tiny(), micro(), TrainConfig(**QUICK), AugmentConfig.identity())
    lrs = res.lrs()
    assert lrs[0] == 5e-5 and lrs[-1] == 0.0
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))


def test_metrics_log_and_best_checkpoint(tmp_path):
    res = TR.train(tiny(), micro(), TrainConfig(**QUICK), AugmentConfig.identity(), out_dir=tmp_path)
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    steps = [r for r in recs if r["kind"] == "step"]
    epochs = [r for r in recs if r["kind"] == "epoch"]
    assert [r["step"] for r in steps] == list(range(8))
    assert all({"lr", "loss", "epoch"} <= r.keys() for r in steps)
    assert len(epochs) == 2 and all({"mAP", "acc", "lr", "loss"} <= r.keys() for r in epochs)
    assert res.checkpoint.exists() and res.best_map == max(r["mAP"] for r in epochs)


def test_weight_noise_is_removed_before_update(monkeypatch):
    spec = micro()
    w0 = M.init_weights(spec, 0)
    init = {k: p.data.copy() for k, p in w0.params.items()}
    seen = {}
    real_forward, real_step = TR.model_forward, TR.adamw_step

    def forward(x, spec, w, **kw):
        seen["forward"] = {k: p.data.copy() for k, p in w.params.items()}
        return real_forward(x, spec, w, **kw)

    def step(params, grads, *a):
        seen["update"] = {k: p.data.copy() for k, p in params.items()}
        return real_step(params, grads, *a)

    monkeypatch.setattr(TR, "model_forward", forward)
    monkeypatch.setattr(TR, "adamw_step", step)
    TR.train(tiny(), spec, TrainConfig(**QUICK, weight_noise_std=10.0), AugmentConfig.identity(),
             weights=w0, max_steps=1)
    assert any(not np.array_equal(seen["forward"][k], init[k]) for k in init)
    assert all(np.array_equal(seen["update"][k], init[k]) for k in init)


def test_non_finite_loss_aborts_with_dump(tmp_path):
    ds = tiny()
    bad = ds.inputs.copy()
    bad[:] = np.nan
    with pytest.raises(TR.TrainingDiverged, match="batch example ids"):
        TR.train(ArrayDataset(bad, ds.targets, ds.classes), micro(), TrainConfig(**QUICK),
                 AugmentConfig.identity(), out_dir=tmp_path)
    dumps = list(tmp_path.glob("diverged_step*.npz"))
    assert len(dumps) == 1 and len(np.load(dumps[0])["batch"]) == 4


def test_class_count_mismatch():
    with pytest.raises(ConfigError):
        TR.train(tiny(classes=4), micro(classes=3), TrainConfig(**QUICK))
