import os

import numpy as np
import pytest

import normshape as ns


def box(shape=(16, 12, 8), lo=(4, 3, 2), hi=(10, 8, 6)):
    a = np.zeros(shape, dtype=np.uint8)
    a[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return a


def test_loaded_from_expected_tree():
    tree = os.environ.get("NORMSHAPE_PY_TREE")
    if tree:
        assert ns._core.__file__.startswith(tree)


def test_mask_round_trip_keeps_xyz_layout():
    a = box()
    a[0, 1, 2] = 1
    m = ns.MaskVolume(a, (1.0, 1.0, 2.0))
    assert m.shape == [16, 12, 8]
    assert m.spacing == (1.0, 1.0, 2.0)
    assert np.array_equal(m.to_numpy(), a)
    assert m.foreground_count() == int(a.sum())
    assert ns.volume_mm3(m) == pytest.approx(2.0 * a.sum())


def test_dice_and_sdf():
    m = ns.MaskVolume(box())
    assert ns.dice(m, m) == 1.0
    sdf = ns.signed_distance(m)
    assert sdf.shape == (16, 12, 8)
    assert sdf[6, 5, 4] < 0 < sdf[0, 0, 0]


def test_errors_carry_kind():
    with pytest.raises(ns.NormshapeError) as exc:
        ns.auc([0.1, 0.2], [1, 1])
    assert exc.value.kind == "SingleClass"


def test_metrics():
    assert ns.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ns.balanced_accuracy([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    mean, sd = ns.bootstrap_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], reps=200, seed=1)
    assert 0.0 <= mean <= 1.0 and sd > 0
    plan = ns.stratified_kfold([0, 1] * 5, 10)
    assert plan.leave_one_out


def test_pipeline_on_tiny_cohort():
    healthy, seeds = ns.gen_cohort(12, grid=(24, 16, 8), base_seed=3)
    assert len(healthy) == 12 and len(set(seeds)) == 12
    ab = ns.AbnormalityParams()
    ab.shrink_factor = 0.4
    abnormal, _ = ns.gen_cohort(6, grid=(24, 16, 8), abnormality=ab, base_seed=100)

    cfg = ns.VaeConfig()
    cfg.input_dims = (24, 16, 8)
    cfg.latent_dim = 8
    seen = []
    model, history, best = ns.train(healthy, cfg, epochs=3, batch_size=4, accumulation_steps=1,
                                    seed=2, on_epoch=lambda r: seen.append(r.epoch))
    assert seen == [0, 1, 2] and len(history) == 3 and 0 <= best < 3

    mu, logvar = model.encode(healthy[0])
    assert len(mu) == 8 and len(logvar) == 8
    probs = model.decode(mu)
    assert probs.shape == (24, 16, 8) and ((probs > 0) & (probs < 1)).all()

    zh = [model.encode(m)[0] for m in healthy]
    za = [model.encode(m)[0] for m in abnormal]
    stats = ns.fit_normative(zh, [ns.volume_mm3(m) for m in healthy])
    assert ns.zero_shot_score(stats.z_bar, stats) == 0.0
    assert ns.volume_baseline_score(healthy[0], stats) >= 0.0

    labels = [0] * len(zh) + [1] * len(za)
    clf = ns.fit_linear_svm(zh + za, labels)
    assert len(clf.w) == 8
    rep = ns.crossval_fewshot(zh + za, labels, ns.stratified_kfold(labels, len(labels)), reps=50)
    assert len(rep.scores) == len(labels)

    assert len(ns.pca_2d(zh)) == len(zh)
    masks = ns.interpolate_groups(model, zh, za, [0.0, 1.0])
    assert len(masks) == 2

    shape_model = ns.asm_fit(healthy, 3)
    assert len(shape_model.project(abnormal[0])) == 3


def test_checkpoint_round_trip(tmp_path):
    cfg = ns.VaeConfig()
    cfg.input_dims = (16, 8, 8)
    cfg.stages = 2
    cfg.channels = [2, 4]
    cfg.latent_dim = 3
    model = ns.Vae(cfg, seed=4)
    path = tmp_path / "m.nsckpt"
    model.save(path)
    back = ns.Vae.load(cfg, path)
    m = ns.MaskVolume(box((16, 8, 8), (3, 2, 2), (12, 6, 6)), (1.0, 1.0, 2.0))
    assert model.encode(m) == back.encode(m)
