import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopseg.architecture import build_model
from coopseg.config import ArchConfig, DataConfig, TrainConfig
from coopseg.core import Tensor
from coopseg.data import MARGIN, Sample, generate_splits
from coopseg.training import (
    AugmentParams,
    ConsistencyError,
    ExperimentReport,
    OptimizerState,
    apply_geometric,
    augment,
    cooperative_round,
    draw_augment,
    make_agents,
    make_batch,
    nesterov_step,
    poly_lr,
    randomize_labels,
    standardize,
    train,
)

SMALL_ARCH = ArchConfig(input_hw=16, stem_channels=4, levels=[(4, 1), (8, 1)], bottleneck_channels=8)


@pytest.fixture(scope="module")
def small_data():
    return generate_splits(DataConfig(n_train=24, n_val=10, size=16, seed=5))


# ------------------------------------------------------------------ schedule


def test_poly_lr_values():
    assert poly_lr(0, 100, 0.1) == 0.1
    assert poly_lr(100, 100, 0.1) == 0.0
    assert abs(poly_lr(50, 100, 0.1, 0.9) - 0.1 * 0.5 ** 0.9) < 1e-15
    assert round(poly_lr(50, 100, 0.1, 0.9), 5) == 0.05359


def test_poly_lr_errors():
    with pytest.raises(ValueError):
        poly_lr(0, 0, 0.1)
    with pytest.raises(ValueError):
        poly_lr(5, 4, 0.1)


@given(total=st.integers(1, 5000), power=st.floats(0.1, 3.0))
def test_poly_lr_monotone(total, power):
    lrs = [poly_lr(t, total, 1.0, power) for t in range(0, total + 1, max(1, total // 50))]
    assert all(a > b for a, b in zip(lrs, lrs[1:])) and all(v >= 0 for v in lrs)


def test_lr_ratio_constant():
    cfg = TrainConfig()
    for t in (0, 10, 1500, 2999):
        clf, seg = poly_lr(t, cfg.rounds, cfg.clf_lr), poly_lr(t, cfg.rounds, cfg.seg_lr)
        assert math.isclose(clf / seg, 30.0, rel_tol=1e-12)


# ------------------------------------------------------------------ Nesterov


def _scalar_state(theta, mu):
    p = Tensor(np.array([theta], dtype=np.float64), requires_grad=True)
    return p, OptimizerState("q", {"p": p}, 0.1, mu)


def test_nesterov_two_steps_on_quadratic(f64):
    a, lr, mu, theta0 = 3.0, 0.05, 0.9, 2.0
    p, state = _scalar_state(theta0, mu)
    for _ in range(2):
        p.grad = a * p.data.copy()
        nesterov_step(state, lr)
    # hand-rolled scalar simulation
    th, v = theta0, 0.0
    for _ in range(2):
        g = a * th
        v = mu * v - lr * g
        th = th + mu * v - lr * g
    assert abs(p.data[0] - th) < 1e-12
    assert state.step == 2


def test_nesterov_zero_momentum_is_sgd(f64):
    p, state = _scalar_state(1.5, 0.0)
    p.grad = np.array([0.4])
    nesterov_step(state, 0.25)
    assert p.data[0] == 1.5 - 0.25 * 0.4


def test_nesterov_fixed_point(f64):
    p, state = _scalar_state(1.5, 0.9)
    p.grad = np.zeros(1)
    nesterov_step(state, 0.25)
    assert p.data[0] == 1.5


def test_nesterov_missing_grad():
    p, state = _scalar_state(1.0, 0.9)
    with pytest.raises(ConsistencyError):
        nesterov_step(state, 0.1)


def test_agents_partition_and_independent_buffers():
    m = build_model(SMALL_ARCH, 0)
    agents = make_agents(m, TrainConfig())
    clf_keys, seg_keys = set(agents["clf"].velocity), set(agents["seg"].velocity)
    assert clf_keys == {k for k in clf_keys if k.startswith(("theta1/", "theta2/"))}
    assert seg_keys == {k for k in seg_keys if k.startswith(("theta1/", "theta3/"))}
    assert len(clf_keys) == len(m.tensors("theta1", "theta2"))
    assert set(agents["clf"].params) == clf_keys
    shared = clf_keys & seg_keys
    assert shared and all(k.startswith("theta1/") for k in shared)
    for k in shared:
        assert agents["clf"].velocity[k] is not agents["seg"].velocity[k]


# ------------------------------------------------------------------ cooperative round


def _snapshot(m):
    return {name: {k: t.data.copy() for k, t in reg} for name, reg in m.partitions().items()}


def _changed(a, b, part):
    return any(not np.array_equal(a[part][k], b[part][k]) for k in a[part])


def _batches(data, seed=0):
    rng = np.random.default_rng(seed)
    tr, _ = data
    clf = make_batch(tr, np.arange(8), rng, "clf", 16)
    seg = make_batch(tr, np.arange(2), rng, "seg", 16)
    return clf, seg


def test_round_partition_bookkeeping(small_data):
    clf_b, seg_b = _batches(small_data)
    results = {}
    for mode in ("joint", "clf_only", "seg_only"):
        m = build_model(SMALL_ARCH, 0)
        agents = make_agents(m, TrainConfig())
        before = _snapshot(m)
        cooperative_round(m, clf_b, seg_b, agents, (0.03, 0.001), mode)
        results[mode] = (_snapshot(m), {k: a.step for k, a in agents.items()})
        after = results[mode][0]
        assert _changed(before, after, "theta1")
        assert _changed(before, after, "theta2") == (mode != "seg_only")
        assert _changed(before, after, "theta3") == (mode != "clf_only")
    assert results["joint"][1] == {"clf": 1, "seg": 1}
    assert results["clf_only"][1] == {"clf": 1, "seg": 0}
    assert results["seg_only"][1] == {"clf": 0, "seg": 1}
    # theta2 is moved by the classifier step alone, which runs first
    joint, clf_only = results["joint"][0], results["clf_only"][0]
    for k in joint["theta2"]:
        assert np.array_equal(joint["theta2"][k], clf_only["theta2"][k])
    # theta1 receives both updates
    assert _changed(joint, clf_only, "theta1") and _changed(joint, results["seg_only"][0], "theta1")


def test_seg_only_keeps_theta2_bitwise(small_data):
    m = build_model(SMALL_ARCH, 0)
    agents = make_agents(m, TrainConfig())
    before = _snapshot(m)["theta2"]
    for r in range(3):
        clf_b, seg_b = _batches(small_data, r)
        cooperative_round(m, clf_b, seg_b, agents, (0.03, 0.01), "seg_only")
    after = _snapshot(m)["theta2"]
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_zero_lr_round_is_noop(small_data):
    m = build_model(SMALL_ARCH, 0)
    agents = make_agents(m, TrainConfig())
    before = _snapshot(m)
    clf_b, seg_b = _batches(small_data)
    losses = cooperative_round(m, clf_b, seg_b, agents, (0.0, 0.0), "joint")
    after = _snapshot(m)
    assert all(math.isfinite(v) for v in losses)
    for part in before:
        assert all(before[part][k].tobytes() == after[part][k].tobytes() for k in before[part])


def test_round_rejects_bad_labels(small_data):
    m = build_model(SMALL_ARCH, 0)
    agents = make_agents(m, TrainConfig())
    (x, grades), seg_b = _batches(small_data)
    with pytest.raises(ValueError):
        cooperative_round(m, (x, grades + 10), seg_b, agents, (0.01, 0.01))


# ------------------------------------------------------------------ random labels


def test_randomize_labels_boundaries(small_data):
    tr, _ = small_data
    same = randomize_labels(tr, 0.0, 1)
    assert np.array_equal(same.grades, tr.grades) and not same.corrupted.any()
    sub = tr.subset(np.arange(20))
    assert randomize_labels(sub, 1.0, 1).corrupted.sum() == 20


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 300), p=st.floats(0, 1), seed=st.integers(0, 100))
def test_randomize_labels_count_and_masks(n, p, seed):
    from coopseg.data import Dataset

    ds = Dataset(images=np.zeros((n, 1, 1, 1), np.float32), masks=np.arange(n, dtype=np.uint8).reshape(n, 1, 1) % 6,
                 grades=np.arange(n) % 5, corrupted=np.zeros(n, bool), indices=np.arange(n))
    out = randomize_labels(ds, p, seed)
    assert out.corrupted.sum() == math.floor(p * n + 0.5)
    assert np.array_equal(out.masks, ds.masks)
    assert np.array_equal(out.grades[~out.corrupted], ds.grades[~out.corrupted])
    assert out.grades.min() >= 0 and out.grades.max() <= 4
    assert not ds.corrupted.any()


def test_randomize_labels_deterministic():
    from coopseg.data import Dataset

    n = 1000
    ds = Dataset(images=np.zeros((n, 1, 1, 1), np.float32), masks=np.zeros((n, 1, 1), np.uint8),
                 grades=np.zeros(n, np.int64), corrupted=np.zeros(n, bool), indices=np.arange(n))
    a, b = randomize_labels(ds, 0.8, 7), randomize_labels(ds, 0.8, 7)
    assert np.array_equal(np.flatnonzero(a.corrupted), np.flatnonzero(b.corrupted))
    assert a.corrupted.sum() == 800
    # uniform over all grades, true label included
    assert set(np.unique(a.grades[a.corrupted])) == {0, 1, 2, 3, 4}


# ------------------------------------------------------------------ augmentation


def _sample(rng, size=24):
    image = rng.uniform(size=(3, size, size)).astype(np.float32)
    mask = rng.integers(0, 6, size=(size, size)).astype(np.uint8)
    return Sample(image, mask, 2)


def test_identity_augment_is_center_crop(rng):
    s = _sample(rng)
    out = augment(s, rng, "clf", 16, params=AugmentParams.identity())
    np.testing.assert_array_equal(out.image, s.image[:, 4:20, 4:20])
    np.testing.assert_array_equal(out.mask, s.mask[4:20, 4:20])


def test_flip_is_involution(rng):
    s = _sample(rng)
    p = AugmentParams((0, 0), flip_h=True)
    twice = apply_geometric(apply_geometric(s.image, p, 24), p, 24)
    np.testing.assert_array_equal(twice, s.image)


def test_flip_histogram_invariance():
    rng = np.random.default_rng(0)
    s = _sample(rng)
    ref = np.bincount(s.mask.ravel(), minlength=6)
    for _ in range(1000):
        fh, fv = (bool(v) for v in rng.random(2) < 0.5)
        out = apply_geometric(s.mask, AugmentParams((0, 0), fh, fv), 24)
        assert np.array_equal(np.bincount(out.ravel(), minlength=6), ref)


def _inverse_map(mask, params, size):
    out = np.zeros((size, size), mask.dtype)
    dy, dx = params.shift
    oy, ox = params.offset
    for y in range(size):
        for x in range(size):
            sy, sx = y - dy, x - dx
            if not (0 <= sy < size and 0 <= sx < size):
                continue
            if params.flip_v:
                sy = size - 1 - sy
            if params.flip_h:
                sx = size - 1 - sx
            out[y, x] = mask[oy + sy, ox + sx]
    return out


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), task=st.sampled_from(["clf", "seg"]))
def test_mask_follows_inverse_map(seed, task):
    rng = np.random.default_rng(seed)
    s = _sample(rng)
    params = draw_augment(rng, task, margin=MARGIN)
    out = augment(s, rng, task, 16, params=params)
    np.testing.assert_array_equal(out.mask, _inverse_map(s.mask, params, 16))
    if task == "seg":
        # image follows the same map channel by channel
        for c in range(3):
            ref = _inverse_map(s.image[c], params, 16)
            np.testing.assert_array_equal(out.image[c], ref)


def test_draw_augment_ranges():
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = draw_augment(rng, "clf")
        assert 0 <= p.offset[0] <= MARGIN and 0 <= p.offset[1] <= MARGIN
        assert max(abs(p.shift[0]), abs(p.shift[1])) <= 4
        assert -0.1 <= p.hue <= 0.1 and 0.8 <= p.contrast <= 1.25 and 0.8 <= p.saturation <= 1.25
        q = draw_augment(rng, "seg")
        assert (q.hue, q.contrast, q.saturation) == (0.0, 1.0, 1.0)


def test_crop_larger_than_image(rng):
    with pytest.raises(ValueError):
        augment(_sample(rng, 10), rng, "seg", 16)


def test_standardize():
    assert np.all(standardize(np.full((3, 4, 4), 0.3)) == 0)
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    y = standardize(x)
    assert abs(y.mean()) < 1e-6 and abs(y.std() - 1) < 1e-4
    assert np.max(np.abs(standardize(y) - y)) < 1e-6


# ------------------------------------------------------------------ training loop


def test_train_zero_rounds(small_data, tmp_path):
    tr, va = small_data
    _, rep = train(TrainConfig(rounds=0, clf_batch=8, batch_ratio=4), tr, va, SMALL_ARCH, out_dir=tmp_path)
    assert [r["round"] for r in rep.rows] == [0]
    assert rep.rows[0]["miou"] is not None
    assert ExperimentReport.read_rows(tmp_path / "report.csv")[0]["round"] == 0


def test_train_deterministic_and_reports(small_data, tmp_path):
    tr, va = small_data
    cfg = TrainConfig(rounds=10, clf_batch=8, batch_ratio=4, eval_interval=5, seed=3)
    _, a = train(cfg, tr, va, SMALL_ARCH, out_dir=tmp_path / "a")
    _, b = train(cfg, tr, va, SMALL_ARCH, out_dir=tmp_path / "b")
    assert a.to_csv() == b.to_csv()
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    rows = a.rows
    assert [r["round"] for r in rows] == list(range(11))
    assert [r["round"] for r in a.evaluations()] == [0, 5, 10]
    for r in rows[1:]:
        assert math.isclose(r["clf_lr"] / r["seg_lr"], cfg.lr_ratio, rel_tol=1e-12)
        assert r["clf_loss"] is not None and r["seg_loss"] is not None
    assert rows[1]["seg_lr"] == cfg.seg_lr
    assert all(e["top2"] >= e["top1"] for e in a.evaluations())
    assert (tmp_path / "a" / "checkpoint.cseg").is_file()
    assert len(list((tmp_path / "a" / "masks" / "round_000010").glob("*.pgm"))) == 8


def test_mode_controls_loss_columns(small_data):
    tr, _ = small_data
    base = dict(rounds=2, clf_batch=8, batch_ratio=4, seed=1)
    reports = {mode: train(TrainConfig(mode=mode, **base), tr, None, SMALL_ARCH)[1]
               for mode in ("joint", "seg_only", "clf_only")}
    has = {mode: (rep.rows[1]["clf_loss"] is not None, rep.rows[1]["seg_loss"] is not None)
           for mode, rep in reports.items()}
    assert has == {"joint": (True, True), "seg_only": (False, True), "clf_only": (True, False)}
    # without a validation set nothing is evaluated
    assert all(rep.evaluations() == [] for rep in reports.values())


def test_seg_only_first_seg_loss_matches_joint_without_clf_effect(small_data):
    """Seg batches come from their own stream, so a zero classifier lr leaves seg losses unchanged."""
    tr, _ = small_data
    base = dict(rounds=3, clf_batch=8, batch_ratio=4, seed=2)
    _, joint = train(TrainConfig(mode="joint", lr_ratio=0.0, **base), tr, None, SMALL_ARCH)
    _, seg = train(TrainConfig(mode="seg_only", lr_ratio=0.0, **base), tr, None, SMALL_ARCH)
    assert [r["seg_loss"] for r in joint.rows[1:]] != [None] * 3
    # batch-norm running stats differ (the clf forward pass updates them) but train-mode
    # losses only use batch statistics, so the traces agree exactly
    assert [r["seg_loss"] for r in joint.rows[1:]] == [r["seg_loss"] for r in seg.rows[1:]]
