import math

import numpy as np
import pytest

import drim.training as training
from drim.autograd import Tensor
from drim.losses import reconstruction_loss
from drim.model import DRIMModel
from drim.nn import Parameter
from drim.synth import PatientBatch
from drim.training import (
    AdamState,
    AdamW,
    NumericalAbort,
    TrainConfig,
    adamw_update,
    cosine_lr,
    cross_validate,
    evaluate_model,
    train,
    train_baseline,
    train_drim_surv,
    train_drim_u,
)

QUICK = dict(epochs=2, finetune_epochs=1, d=4, heads=2, head_dim=4, n_intervals=6)


def test_adamw_zero_gradient_no_decay_is_identity():
    w = np.array([1.0, -2.0])
    out = adamw_update(w, np.zeros(2), AdamState(np.zeros(2), np.zeros(2)), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(out, w)


def test_adamw_first_step_has_unit_scale():
    # f(w) = w^2 at w = 1: bias-corrected first step moves by lr (up to eps)
    out = adamw_update(np.array([1.0]), np.array([2.0]), AdamState(np.zeros(1), np.zeros(1)), 0.1, 0.0)
    assert out[0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_weight_decay_is_decoupled():
    out = adamw_update(np.array([2.0]), np.zeros(1), AdamState(np.zeros(1), np.zeros(1)), 0.1, 0.5)
    assert out[0] == pytest.approx(2.0 * (1 - 0.05))


def test_optimizer_skips_non_finite_steps():
    p = Parameter(np.array([1.0, 2.0]))
    opt = AdamW([p], weight_decay=0.0)
    p.grad = np.array([np.nan, 1.0])
    assert opt.step(0.1) is False and opt.skipped == 1
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-20)
    lrs = [cosine_lr(1e-3, t, 50) for t in range(51)]
    assert all(0 <= a <= 1e-3 for a in lrs)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(2.0, 25, 100) == pytest.approx((1 + math.cos(math.pi / 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(regime="other").validate()
    with pytest.raises(ValueError):
        TrainConfig(regime="unsup", fusion="mean").validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()


def test_training_is_deterministic(small_cohort):
    _, tr, _ = small_cohort
    a = train_drim_surv(tr, TrainConfig(**QUICK, seed=4))
    b = train_drim_surv(tr, TrainConfig(**QUICK, seed=4))
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)
    c = train_drim_surv(tr, TrainConfig(**QUICK, seed=5))
    assert any(not np.array_equal(p.data, q.data)
               for (_, p), (_, q) in zip(a.model.named_parameters(), c.model.named_parameters()))


def test_each_step_only_moves_its_own_parameter_group(small_cohort, monkeypatch):
    _, tr, _ = small_cohort
    models = []
    orig_init, orig_step = DRIMModel.__init__, AdamW.step

    def capture(self, *a, **k):
        orig_init(self, *a, **k)
        models.append(self)

    def checked_step(self, lr):
        everything = dict(models[-1].named_parameters())
        before = {n: p.data.copy() for n, p in everything.items()}
        out = orig_step(self, lr)
        mine = {id(p) for p in self.params}
        for n, p in everything.items():
            if id(p) not in mine:
                assert np.array_equal(p.data, before[n]), f"{n} moved during another group's step"
        checked_step.calls += 1
        return out

    checked_step.calls = 0
    monkeypatch.setattr(DRIMModel, "__init__", capture)
    monkeypatch.setattr(AdamW, "step", checked_step)
    train_drim_surv(tr, TrainConfig(**QUICK))
    assert checked_step.calls > 4


def test_training_loss_decreases(small_cohort):
    _, tr, _ = small_cohort
    res = train_drim_surv(tr, TrainConfig(**{**QUICK, "epochs": 8}))
    assert res.log[-1]["loss_total"] < res.log[0]["loss_total"]
    assert set(training.LOG_COLUMNS) <= set(res.log[0])


def test_single_modality_reduces_to_plain_survival_training(small_cohort):
    _, tr, te = small_cohort
    one = lambda d: d.select_modalities([0]).subset(np.flatnonzero(d.present[0]))
    res = train_drim_surv(one(tr), TrainConfig(**QUICK, gamma=0.0, tau=1e6))
    assert res.skipped_batches == 0
    assert all(row["loss_shared"] == 0.0 for row in res.log)
    assert 0.0 <= evaluate_model(res.model, one(te), res.grid)["cindex"] <= 1.0


def test_degenerate_batches_are_skipped():
    rng = np.random.default_rng(0)
    N = 12
    present = np.zeros((2, N), bool)
    present[0, :6] = True
    present[1, 6:] = True  # nobody has two modalities, so no positives anywhere
    data = PatientBatch([rng.normal(size=(N, 3)), rng.normal(size=(N, 3))], present,
                        rng.uniform(1, 5, N), rng.random(N) < 0.5)
    res = train_drim_surv(data, TrainConfig(**{**QUICK, "batch_size": 6}))
    assert res.skipped_batches == 4


def test_drim_u_freezes_encoders_and_reconstruction_improves(small_cohort):
    _, tr, te = small_cohort
    cfg = TrainConfig(**{**QUICK, "epochs": 6, "regime": "unsup"})
    res = train_drim_u(tr, cfg)
    assert res.frozen_grad_norms and all(g == 0.0 for g in res.frozen_grad_norms)
    assert all(not p.trainable for p in res.model.encoder_parameters())

    def held_out_recon(model):
        model.eval()
        _, unique = model.encode(te.features, te.present)
        return reconstruction_loss([R(u) for R, u in zip(model.decoders, unique)], te.features, te.present).item()

    fresh = DRIMModel(cfg.model_config(tr.feature_dims, decoders=True), training._rng_streams(cfg.seed)[0])
    assert held_out_recon(res.model) < held_out_recon(fresh)
    assert res.pretrain_log and res.log[-1]["split"] == "finetune"


def test_drim_u_finetune_leaves_encoders_bit_identical(small_cohort):
    _, tr, _ = small_cohort
    cfg = TrainConfig(**{**QUICK, "regime": "unsup"})
    res = train_drim_u(tr, cfg, pretrain=False)
    fresh = DRIMModel(cfg.model_config(tr.feature_dims, decoders=True), training._rng_streams(cfg.seed)[0])
    for p, q in zip(res.model.encoder_parameters(), fresh.encoder_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


@pytest.mark.parametrize("kind", ["mean", "sum", "max", "concat", "tensor"])
def test_baselines_train(kind, small_cohort):
    _, tr, te = small_cohort
    res = train(tr, TrainConfig(**QUICK, fusion=kind))
    metrics = evaluate_model(res.model, te, res.grid)
    assert np.isfinite(metrics["cindex"]) and np.isfinite(metrics["ibs"])


def test_non_finite_loss_aborts(small_cohort, monkeypatch):
    _, tr, _ = small_cohort
    monkeypatch.setattr(training, "survival_loss", lambda *a, **k: Tensor(float("nan")))
    with pytest.raises(NumericalAbort):
        train_baseline(tr, TrainConfig(**QUICK, fusion="mean"))


def test_cross_validation_runs(small_cohort):
    _, tr, te = small_cohort
    scores = cross_validate(tr, te, TrainConfig(**{**QUICK, "epochs": 1}, fusion="mean"), folds=3)
    assert len(scores) == 3 and all("cs" in s for s in scores)
