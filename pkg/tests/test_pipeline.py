import numpy as np
import pytest

from semmatch import geometry as geo
from semmatch import pipeline as pl
from semmatch import synthetic as syn
from semmatch.losses import LossWeights
from semmatch.regressor import init_weights, weights_to_bytes
from semmatch.tensorcore import Tensor


@pytest.fixture(scope="module")
def small_set():
    return pl.synthetic_training_set(6, "affine", 0.15, seed=3, triplets=True)


class TestGenerator:
    def test_zero_magnitude_is_identity(self):
        sp = syn.generate_pair(1, "cascade", 0.0)
        np.testing.assert_array_equal(sp.warped, sp.base)
        lat = geo.grid_coordinates(5, 5)
        np.testing.assert_allclose(geo.apply_np(sp.gt_transform, lat), lat, atol=1e-12)

    def test_translation_family_box(self):
        for seed in range(20):
            T = syn.generate_pair(seed, "translation", 0.25, size=64).gt_transform
            a11, a12, tx, a21, a22, ty = T.values
            assert (a11, a12, a21, a22) == (1, 0, 0, 1)
            assert abs(tx) <= 0.25 and abs(ty) <= 0.25

    def test_seed_42_bit_identical(self):
        a, b = syn.generate_pair(42, "affine", 0.2), syn.generate_pair(42, "affine", 0.2)
        assert a.base.tobytes() == b.base.tobytes() and a.warped.tobytes() == b.warped.tobytes()
        assert geo.to_text(a.gt_transform) == geo.to_text(b.gt_transform)
        assert a.keypoints_dst.tobytes() == b.keypoints_dst.tobytes()

    @pytest.mark.parametrize("family,mag", [("affine", 0.3), ("translation", -0.1), ("shear", 0.1)])
    def test_out_of_range(self, family, mag):
        with pytest.raises(ValueError):
            syn.generate_pair(0, family, mag)

    @pytest.mark.parametrize("family", syn.FAMILIES)
    def test_keypoints_follow_gt(self, family):
        sp = syn.generate_pair(7, family, 0.2, size=96)
        H, W = sp.size
        want = syn.norm_to_pixel(geo.apply_np(sp.gt_transform, syn.pixel_to_norm(sp.keypoints_src, H, W)), H, W)
        np.testing.assert_allclose(sp.keypoints_dst, want, atol=1e-5)
        assert len(sp.keypoints_src) == 10
        assert sp.base_mask[sp.keypoints_src[:, 1].astype(int), sp.keypoints_src[:, 0].astype(int)].all()

    @pytest.mark.parametrize("family", syn.FAMILIES)
    def test_enough_of_frame_stays_visible(self, family):
        for seed in range(5):
            T = syn.generate_pair(seed, family, syn.MAX_MAGNITUDE[family], size=32).gt_transform
            assert syn.visible_fraction(T) >= syn.MIN_VISIBLE

    def test_warped_pixel_comes_from_base(self):
        sp = syn.generate_pair(9, "translation", 0.2, size=81)
        H, W = sp.size
        q = np.array([[40.0, 40.0]])
        p = syn.norm_to_pixel(geo.invert_points(sp.gt_transform, syn.pixel_to_norm(q, H, W)), H, W)
        expected = geo.sample_image(sp.base, p)[0]
        np.testing.assert_allclose(sp.warped[40, 40], np.rint(expected), atol=1)

    def test_triplet_shares_base(self):
        a, b = syn.generate_triplet(4, "affine", 0.2, size=48)
        np.testing.assert_array_equal(a.base, b.base)
        assert geo.to_text(a.gt_transform) != geo.to_text(b.gt_transform)

    def test_augmentation_keeps_gt_exact(self):
        sp = syn.generate_pair(11, "affine", 0.2, size=96, hflip=True, crop=True)
        H, W = sp.size
        want = syn.norm_to_pixel(geo.apply_np(sp.gt_transform, syn.pixel_to_norm(sp.keypoints_src, H, W)), H, W)
        np.testing.assert_allclose(sp.keypoints_dst, want, atol=1e-5)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), dtype=np.float64)}
        before = p["w"].data.copy()
        pl.adam_step(p, {"w": np.zeros(2)}, pl.AdamState(lr=0.1))
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_hand_calculation(self):
        g, lr, eps = 0.3, 0.01, 1e-8
        p = {"w": Tensor(np.array([2.0]), dtype=np.float64)}
        state = pl.AdamState(lr=lr)
        pl.adam_step(p, {"w": np.array([g])}, state)
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        assert p["w"].data[0] == pytest.approx(2.0 - lr * m_hat / (v_hat ** 0.5 + eps), abs=1e-15)
        assert state.step == 1
        pl.adam_step(p, {"w": np.array([g])}, state)
        assert state.step == 2 and state.m["w"].shape == (1,)

    def test_shape_mismatch(self):
        with pytest.raises(Exception, match="shape"):
            pl.adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, pl.AdamState())

    def test_backbone_rate_is_selectable(self):
        assert pl.AdamState(lr=pl.PRETRAINED_BACKBONE_LR).lr == 5e-8
        assert pl.AdamState().lr == 1e-3


class TestTrain:
    def test_zero_epochs_returns_initial_weights(self, small_set):
        ds, _ = small_set
        w0 = init_weights(5, (15, 15), (15, 15))
        w, log = pl.train(ds, pl.TrainConfig(epochs=0), w0)
        assert weights_to_bytes(w) == weights_to_bytes(w0) and log == []

    def test_matching_loss_non_increasing_on_one_pair(self, small_set):
        ds, _ = small_set
        one = pl.TrainingSet(ds.features, ds.pairs[:1])
        w0 = init_weights(1, (15, 15), (15, 15))
        w0.params["affine.fc2.weight"].data[:] = np.random.default_rng(0).normal(size=(64, 6)) * 0.01
        cfg = pl.TrainConfig(epochs=5, batch_size=1, lr=1e-4, weights=LossWeights(0, 0), swap_pairs=False)
        _, log = pl.train(one, cfg, w0)
        m = [r.match for r in log]
        assert len(m) == 5
        assert all(b <= a + 1e-9 for a, b in zip(m, m[1:]))

    def test_warm_up_error_strictly_decreases(self, small_set):
        ds, _ = small_set
        one = pl.TrainingSet(ds.features, ds.pairs[:1])
        _, log = pl.train(one, pl.TrainConfig(epochs=0, warm_up_steps=10, lr=3e-5))
        err = [r.total for r in log]
        assert len(err) == 10 and all(r.phase == "warmup" for r in log)
        assert all(b < a for a, b in zip(err, err[1:]))

    def test_deterministic_checkpoints_and_logs(self, small_set):
        ds, _ = small_set
        cfg = pl.TrainConfig(epochs=2, batch_size=3, warm_up_steps=3, seed=11, lr=1e-4)
        w1, l1 = pl.train(ds, cfg)
        w2, l2 = pl.train(ds, cfg)
        assert weights_to_bytes(w1) == weights_to_bytes(w2)
        assert [vars(r) for r in l1] == [vars(r) for r in l2]

    def test_log_components_add_up(self, small_set, tmp_path):
        ds, _ = small_set
        lw = LossWeights(0.7, 0.4)
        _, log = pl.train(ds, pl.TrainConfig(epochs=2, batch_size=4, weights=lw, lr=1e-4, seed=2))
        weak = [r for r in log if r.phase == "weak"]
        assert any(r.trans > 0 for r in weak)
        for r in weak:
            assert r.total == pytest.approx(r.match + 0.7 * r.cycle + 0.4 * r.trans, abs=1e-6)
        pl.write_log(log, tmp_path / "log.tsv")
        rows = [line.split("\t") for line in (tmp_path / "log.tsv").read_text().splitlines()]
        assert len(rows) == len(weak) and all(len(r) == 5 for r in rows)
        assert float(rows[0][1]) == weak[0].total

    def test_triplet_picked_from_one_category(self, small_set):
        ds, _ = small_set
        trip = pl._pick_triplet(np.random.default_rng(0), ds, [0, 1])
        assert trip is not None and len(set(trip)) == 3
        assert {ds.pairs[0].a, ds.pairs[0].b, ds.pairs[1].b} == set(trip)
        assert pl._pick_triplet(np.random.default_rng(0), ds, [0]) is None

    def test_non_finite_loss_names_term_and_step(self, small_set, monkeypatch):
        ds, _ = small_set
        monkeypatch.setattr(pl, "cycle_loss", lambda *a, **k: Tensor(np.array(np.nan)))
        with pytest.raises(pl.TrainingError, match=r"cycle.*step 0"):
            pl.train(ds, pl.TrainConfig(epochs=1))

    def test_needs_a_pair(self):
        with pytest.raises(ValueError):
            pl.train(pl.TrainingSet([], []), pl.TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            pl.TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            pl.TrainConfig(foreground="none")


def test_translation_training_halves_endpoint_error(translation_model):
    w, test = translation_model["weights"], translation_model["test"]
    lat = geo.grid_coordinates(10, 10)
    trained, init = [], []
    from semmatch.regressor import predict
    for p in test.pairs:
        T = geo.detached64(predict(test.correlation(p.a, p.b), test.features[p.a], test.features[p.b], w))
        gt = geo.apply_np(p.gt, lat)
        trained.append(np.linalg.norm(geo.apply_np(T, lat) - gt, axis=1).mean())
        init.append(np.linalg.norm(lat - gt, axis=1).mean())
    assert np.mean(trained) <= 0.5 * np.mean(init)
