from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone

from gfscreen import ValidationError
from gfscreen.focus import OracleFocus
from gfscreen.glance import GlanceParams
from gfscreen.grl import GRLConfig
from gfscreen.metrics import FlopModel, eval_dsc
from gfscreen.pipeline import (
    ABLATION_VARIANTS,
    GFScreen,
    TrainConfig,
    Trainer,
    evaluate,
    infer_scan,
    train,
    variant_config,
)
from gfscreen.synthvol import VolumeSpec, generate_scan

DIMS = (32, 32, 16)


@pytest.fixture(scope="module")
def scans():
    out = []
    for i in range(4):
        spec = VolumeSpec(dims=DIMS, target_fg_fraction=0.004, seed=100 + i, lesion_polarity="bright",
                          organ_scale=0.5, texture_scale=0.5)
        out.append(generate_scan(spec, scan_id=f"train-{i:03d}"))
    out.append(generate_scan(VolumeSpec(dims=DIMS, target_fg_fraction=0.0, seed=200), scan_id="healthy-val-000"))
    return out


def _cfg(**kw):
    base = dict(epochs=2, steps_per_epoch=3, batch_volumes=2, crops_per_volume=4,
                grl=GRLConfig(group_size=8), standardize_crops=32)
    return TrainConfig(**{**base, **kw})


def test_zero_epochs_returns_init(scans):
    cfg = _cfg(epochs=0)
    glance, focus, stats = train(cfg, scans[:4])
    init = Trainer(cfg, scans[:4]).init_state()
    assert stats == []
    assert np.array_equal(glance.to_vector(), init.glance.to_vector())


def test_zero_lr_leaves_glance_unchanged(scans):
    cfg = _cfg(lr_glance=0.0, weight_decay=0.0)
    glance, _, stats = train(cfg, scans[:4])
    init = Trainer(cfg, scans[:4]).init_state()
    assert len(stats) == 2
    assert np.array_equal(glance.to_vector(), init.glance.to_vector())


def test_training_is_deterministic(scans):
    a = train(_cfg(), scans[:4])
    b = train(_cfg(), scans[:4])
    assert np.array_equal(a[0].to_vector(), b[0].to_vector())
    assert [s.to_dict() for s in a[2]] == [s.to_dict() for s in b[2]]


def test_reference_snapshot_constant_within_epoch(scans, monkeypatch):
    trainer = Trainer(_cfg(), scans[:4])
    state = trainer.init_state()
    seen = []
    orig = Trainer.step

    def spy(self, st, ref, rng):
        seen.append((st.epoch, ref.to_vector().copy(), st.glance.to_vector().copy()))
        return orig(self, st, ref, rng)

    monkeypatch.setattr(Trainer, "step", spy)
    trainer.fit(state)
    for epoch in (0, 1):
        rows = [r for r in seen if r[0] == epoch]
        assert len(rows) == 3
        # ref equals the live policy at the first step and never moves afterwards
        assert np.array_equal(rows[0][1], rows[0][2])
        assert all(np.array_equal(r[1], rows[0][1]) for r in rows)
        assert not np.array_equal(rows[-1][1], rows[-1][2])
    assert not np.array_equal(seen[0][1], seen[3][1])


def test_select_nothing_gives_empty_mask(scans):
    g = GlanceParams.zeros()
    g.b2 = np.array([10.0, -10.0])
    mask, stats = infer_scan(g, OracleFocus().fit(), scans[0], (16, 16, 8), (16, 16, 8), tau=0.5)
    assert not mask.any()
    assert stats["n_selected"] == 0 and stats["n_windows"] == 8


def test_select_all_whole_volume_perfect_oracle(scans):
    focus = OracleFocus(dsc_full=1.0, center_penalty=0.0).fit()
    for scan in scans[:4]:
        mask, stats = infer_scan(None, focus, scan, DIMS, DIMS)
        assert stats["n_windows"] == 1 and stats["n_selected"] == 1
        assert eval_dsc(mask, scan.mask) >= 1.0 - 0.1


def test_select_all_matches_no_glance(scans):
    g = GlanceParams.init(np.random.default_rng(0))
    focus = OracleFocus(false_alarm=0.1).fit()
    for scan in scans:
        a, _ = infer_scan(g, focus, scan, (16, 16, 8), (16, 16, 8), select_all=True)
        b, _ = infer_scan(None, focus, scan, (16, 16, 8), (16, 16, 8))
        assert np.array_equal(a, b)


def test_no_glance_speedup_is_one(scans):
    focus = OracleFocus().fit()
    results = [(s, *infer_scan(None, focus, s, (16, 16, 8), (16, 16, 8)), "val") for s in scans]
    rep = evaluate(results, FlopModel.for_window((16, 16, 8)))
    assert rep.speedup == 1.0 and rep.preserved_ratio == 1.0 and rep.glance_sensitivity == 1.0


def test_focal_gamma_zero_matches_ce(scans):
    a = train(_cfg(objective="ce"), scans[:4])
    b = train(_cfg(objective="focal", focal_gamma=0.0), scans[:4])
    assert np.array_equal(a[0].to_vector(), b[0].to_vector())


def test_trainable_focus_runs(scans):
    _, focus, stats = train(_cfg(focus_mode="trainable", epochs=1), scans[:4])
    assert np.isfinite(stats[0].focus_loss) and stats[0].focus_loss > 0
    assert np.any(focus.weights != 0)


@pytest.mark.parametrize("mode", ["select_prob", "sampled_action"])
@pytest.mark.parametrize("reward", ["binary_detection", "dsc"])
def test_grl_modes_train(scans, mode, reward):
    cfg = _cfg(epochs=1, grl=GRLConfig(group_size=8, ratio_mode=mode, reward_kind=reward))
    _, _, stats = train(cfg, scans[:4])
    assert np.isfinite(stats[0].neg_J)


def test_variant_configs():
    base = _cfg()
    assert variant_config("grl_no_ce", base).grl.ce_alpha == 0.0
    assert variant_config("grl_dsc_reward", base).grl.reward_kind == "dsc"
    assert {variant_config(v, base).objective for v in ABLATION_VARIANTS} == {"grl", "ce", "balanced_ce", "focal"}
    with pytest.raises(ValidationError):
        variant_config("dropout", base)


@pytest.mark.parametrize("kwargs", [
    dict(epochs=-1), dict(steps_per_epoch=0), dict(batch_volumes=3), dict(focus_mode="unet"),
    dict(objective="hinge"), dict(pos_bias=1.5), dict(crop_size=(16, 16)),
])
def test_train_config_validation(kwargs):
    with pytest.raises(ValidationError):
        _cfg(**kwargs)


def test_train_config_dict_round_trip():
    cfg = _cfg(crop_size=(8, 8, 8))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_trainer_needs_scans():
    with pytest.raises(ValidationError):
        Trainer(_cfg(), [])


def test_estimator_api(scans):
    est = GFScreen(config=_cfg(), tau=0.3)
    assert clone(est).get_params()["tau"] == 0.3
    est.fit(scans[:4])
    preds = est.predict(scans)
    assert len(preds) == len(scans) and all(p.shape == DIMS for p in preds)
    assert 0.0 <= est.score(scans) <= 1.0
    rep = est.evaluate(scans)
    assert rep.n_windows == 8 * len(scans)
    twin = clone(est).fit(scans[:4])
    assert np.array_equal(twin.glance_params_.to_vector(), est.glance_params_.to_vector())


def test_estimator_use_glance_false(scans):
    est = GFScreen(config=replace(_cfg(), epochs=0), use_glance=False).fit(scans[:4])
    assert est.evaluate(scans).preserved_ratio == 1.0


def test_predict_before_fit(scans):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        GFScreen().predict(scans[:1])
