"""Tests for Procrustes alignment, MPJPE, ordinal accuracy and the noise sweep."""

import numpy as np
import pytest
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from rgbdmesh.losses import DepthRankRelation, depth_relations
from rgbdmesh.metrics import (
    AlignmentResult,
    SweepGrid,
    mpjpe,
    noise_sweep,
    ordinal_accuracy,
    procrustes_align,
    reconstruction_error,
)


def oracle_align_residual_mm(a, b, with_scale=True, seed=0):
    """Brute-force similarity fit: Levenberg-Marquardt over (log s, rotvec, t).

    Independent of the closed form under test; multi-start over random rotation
    inits guards against rotation-space local minima.
    """
    rng = np.random.default_rng(seed)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if with_scale:
        def residuals(p):
            s = np.exp(p[0])
            r = Rotation.from_rotvec(p[1:4]).as_matrix()
            return (s * a @ r.T + p[4:7] - b).ravel()
        dim, rot_sl = 7, slice(1, 4)
    else:
        def residuals(p):
            r = Rotation.from_rotvec(p[0:3]).as_matrix()
            return (a @ r.T + p[3:6] - b).ravel()
        dim, rot_sl = 6, slice(0, 3)
    best = None
    for i in range(4):
        p0 = np.zeros(dim)
        if i:
            p0[rot_sl] = rng.uniform(-np.pi, np.pi, 3)
        res = least_squares(residuals, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or res.cost < best.cost:
            best = res
    final = residuals(best.x).reshape(-1, 3)
    return float(np.mean(np.linalg.norm(final, axis=1)) * 1000.0)


def random_rotation(seed):
    return Rotation.random(random_state=seed).as_matrix()


class TestMpjpe:
    def test_identical_sets_zero(self):
        a = np.random.default_rng(0).normal(size=(14, 3))
        assert mpjpe(a, a) == 0.0

    def test_offset_hand_value(self):
        # every joint offset by (3, 4, 0) mm -> per-joint distance 5 mm
        a = np.random.default_rng(1).normal(size=(14, 3))
        b = a + np.array([0.003, 0.004, 0.0])
        assert abs(mpjpe(a, b) - 5.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(14, 3))
        b = rng.normal(size=(14, 3))
        assert mpjpe(a, b) == mpjpe(b, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mpjpe(np.zeros((14, 3)), np.zeros((13, 3)))
        with pytest.raises(ValueError):
            mpjpe(np.zeros((14, 2)), np.zeros((14, 2)))


class TestProcrustes:
    def test_identity_alignment(self):
        a = np.random.default_rng(3).normal(size=(14, 3))
        res = procrustes_align(a, a)
        assert abs(res.scale - 1.0) < 1e-12
        assert np.allclose(res.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(res.translation, 0.0, atol=1e-12)
        assert res.residual_mm < 1e-9

    def test_similarity_transform_recovered(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(14, 3))
        r0 = random_rotation(4)
        t0 = np.array([0.3, -1.2, 0.9])
        b = 2.0 * a @ r0.T + t0
        res = procrustes_align(a, b)
        assert res.residual_mm < 1e-9
        assert abs(res.scale - 2.0) < 1e-9
        assert np.allclose(res.rotation, r0, atol=1e-9)
        assert np.allclose(res.translation, t0, atol=1e-9)

    def test_rotation_stays_special_orthogonal(self):
        # includes pairs built with a reflection, which the sign correction must reject
        rng = np.random.default_rng(5)
        for trial in range(50):
            a = rng.normal(size=(14, 3))
            b = rng.normal(size=(14, 3))
            if trial % 2:
                flip = np.diag([1.0, 1.0, -1.0])
                b = a @ flip.T + rng.normal(scale=0.1, size=(14, 3))
            res = procrustes_align(a, b)
            assert np.allclose(res.rotation @ res.rotation.T, np.eye(3), atol=1e-10)
            assert abs(np.linalg.det(res.rotation) - 1.0) < 1e-10
            assert res.scale > 0.0

    @pytest.mark.parametrize("with_scale", [True, False])
    def test_matches_numerical_minimization_oracle(self, with_scale):
        rng = np.random.default_rng(6)
        for trial in range(20):
            a = rng.normal(0, 0.4, size=(14, 3))
            s_true = float(np.exp(rng.normal(0, 0.5))) if with_scale else 1.0
            r_true = random_rotation(100 + trial)
            t_true = rng.normal(0, 1.0, size=3)
            b = s_true * a @ r_true.T + t_true + rng.normal(0, 0.05, size=(14, 3))
            expected = oracle_align_residual_mm(a, b, with_scale=with_scale, seed=trial)
            got = procrustes_align(a, b, with_scale=with_scale).residual_mm
            assert abs(got - expected) < 1e-6

    def test_residual_invariant_to_source_similarity(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(14, 3))
        b = rng.normal(size=(14, 3))
        base = procrustes_align(a, b).residual_mm
        for trial in range(10):
            s0 = float(np.exp(rng.normal(0, 0.5)))
            r0 = random_rotation(200 + trial)
            t0 = rng.normal(0, 2.0, size=3)
            moved = procrustes_align(s0 * a @ r0.T + t0, b).residual_mm
            assert abs(moved - base) < 1e-9

    def test_degenerate_sources_rejected(self):
        with pytest.raises(ValueError):
            procrustes_align(np.ones((14, 3)), np.random.default_rng(8).normal(size=(14, 3)))
        line = np.outer(np.linspace(0, 1, 14), np.array([1.0, 2.0, 3.0]))
        with pytest.raises(ValueError):
            procrustes_align(line, np.random.default_rng(9).normal(size=(14, 3)))
        with pytest.raises(ValueError):
            procrustes_align(np.eye(3)[:2], np.eye(3)[:2])

    def test_apply_matches_residual(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(14, 3))
        b = rng.normal(size=(14, 3))
        res = procrustes_align(a, b)
        assert abs(mpjpe(res.apply(a), b) - res.residual_mm) < 1e-12


class TestReconstructionError:
    def test_similarity_copy_is_zero(self):
        rng = np.random.default_rng(11)
        gt = rng.normal(size=(14, 3))
        pred = 0.7 * gt @ random_rotation(11).T + np.array([1.0, 0.0, -2.0])
        assert reconstruction_error(pred, gt) < 1e-9

    @pytest.mark.parametrize("with_scale", [True, False])
    def test_never_exceeds_mpjpe(self, with_scale):
        rng = np.random.default_rng(12)
        for _ in range(20):
            pred = rng.normal(size=(14, 3))
            gt = rng.normal(size=(14, 3))
            err = reconstruction_error(pred, gt, with_scale=with_scale)
            assert err <= mpjpe(pred, gt) + 1e-9

    def test_invariant_to_gt_frame_round_trip(self):
        # mapping gt out to a native frame and back must not change the metric
        rng = np.random.default_rng(13)
        pred = rng.normal(size=(14, 3))
        gt = rng.normal(size=(14, 3))
        r0 = random_rotation(13)
        t0 = np.array([0.0, 1.5, 0.0])
        native = 1000.0 * (gt @ r0.T + t0)
        back = (native / 1000.0 - t0) @ r0
        assert abs(reconstruction_error(pred, back) - reconstruction_error(pred, gt)) < 1e-9


class TestOrdinalAccuracy:
    def test_exact_depths_give_one(self):
        rng = np.random.default_rng(14)
        z = rng.normal(2.5, 0.4, size=14)
        rels = depth_relations(z, np.ones(14, dtype=bool), tie_tolerance=1e-6)
        assert ordinal_accuracy(z, rels) == 1.0

    def test_negated_depths_give_zero(self):
        rng = np.random.default_rng(15)
        z = rng.normal(2.5, 0.4, size=14)
        rels = depth_relations(z, np.ones(14, dtype=bool), tie_tolerance=1e-6)
        assert ordinal_accuracy(-z, rels) == 0.0

    def test_empty_relations_undefined(self):
        assert ordinal_accuracy(np.zeros(14), []) is None

    def test_all_tied_relations_undefined(self):
        rels = [DepthRankRelation(pair=(0, 1), r=0), DepthRankRelation(pair=(2, 3), r=0)]
        assert ordinal_accuracy(np.arange(14.0), rels) is None

    def test_tied_prediction_counts_as_wrong(self):
        rels = [DepthRankRelation(pair=(0, 1), r=1)]
        assert ordinal_accuracy(np.zeros(14), rels) == 0.0

    def test_random_predictions_near_half(self):
        # Monte-Carlo: iid prediction matches each ordered pair with prob 1/2
        rng = np.random.default_rng(16)
        accs = []
        for _ in range(500):
            z_src = rng.normal(2.5, 0.4, size=14)
            rels = depth_relations(z_src, np.ones(14, dtype=bool), tie_tolerance=1e-6)
            accs.append(ordinal_accuracy(rng.normal(size=14), rels))
        assert abs(np.mean(accs) - 0.5) < 0.02


class TestSweepGrid:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        grid = SweepGrid(
            p_rgb_levels=np.linspace(0.0, 1.0, 11),
            p_d_levels=np.linspace(0.0, 1.0, 11),
            cells=rng.normal(80.0, 15.0, size=(11, 11)),
        )
        path = tmp_path / "grid.tsv"
        grid.save(path)
        loaded = SweepGrid.load(path)
        assert np.array_equal(loaded.p_rgb_levels, grid.p_rgb_levels)
        assert np.array_equal(loaded.p_d_levels, grid.p_d_levels)
        assert np.array_equal(loaded.cells, grid.cells)

    def test_header_lists_levels(self, tmp_path):
        grid = SweepGrid(np.array([0.0, 0.5]), np.array([0.0, 0.25, 1.0]), np.zeros((2, 3)))
        path = tmp_path / "grid.tsv"
        grid.save(path)
        lines = path.read_text().splitlines()
        assert lines[0].split("\t")[0] == "p_rgb" and len(lines[0].split("\t")) == 3
        assert lines[1].split("\t")[0] == "p_d" and len(lines[1].split("\t")) == 4
        assert len(lines) == 2 + 2

    def test_validation_rejects_mismatch(self):
        with pytest.raises(ValueError):
            SweepGrid(np.array([0.0, 1.0]), np.array([0.0]), np.zeros((2, 2))).validate()
        with pytest.raises(ValueError):
            SweepGrid(np.array([0.0, 1.5]), np.array([0.0]), np.zeros((2, 1))).validate()

    def test_load_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.tsv"
        path.write_text("a\tb\nc\td\ne\tf\n")
        with pytest.raises(ValueError):
            SweepGrid.load(path)


class _FakeSample:
    def __init__(self, gt, bump_rgb, bump_depth):
        self.gt = gt
        self.bump_rgb = bump_rgb
        self.bump_depth = bump_depth


class _FakeModel:
    """Prediction drifts from gt by fixed per-sample bumps when streams are voided."""

    def __init__(self):
        self.calls = []

    def predict_joints(self, sample, void_rgb, void_depth):
        self.calls.append((void_rgb, void_depth))
        pred = sample.gt.copy()
        if void_rgb:
            pred = pred + sample.bump_rgb
        if void_depth:
            pred = pred + sample.bump_depth
        return pred

    def gt_joints(self, sample):
        return sample.gt


def _fake_test_set(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        out.append(_FakeSample(
            gt=rng.normal(size=(14, 3)),
            bump_rgb=rng.normal(scale=0.05, size=(14, 3)),
            bump_depth=rng.normal(scale=0.08, size=(14, 3)),
        ))
    return out


class TestNoiseSweep:
    def test_zero_zero_cell_is_plain_eval(self):
        test_set = _fake_test_set(20, seed=18)
        grid = noise_sweep(_FakeModel(), test_set, [0.0, 1.0], [0.0, 1.0], np.random.default_rng(0))
        assert grid.cells[0, 0] < 1e-9
        assert grid.cells.shape == (2, 2)

    def test_monotone_along_axes(self):
        test_set = _fake_test_set(200, seed=19)
        levels = [0.0, 0.5, 1.0]
        grid = noise_sweep(_FakeModel(), test_set, levels, levels, np.random.default_rng(1))
        for row in grid.cells:
            assert row[0] <= row[1] <= row[2]
        for col in grid.cells.T:
            assert col[0] <= col[1] <= col[2]

    def test_deterministic_given_rng_seed(self):
        test_set = _fake_test_set(30, seed=20)
        levels = [0.0, 0.4, 0.8]
        g1 = noise_sweep(_FakeModel(), test_set, levels, levels, np.random.default_rng(2))
        g2 = noise_sweep(_FakeModel(), test_set, levels, levels, np.random.default_rng(2))
        assert np.array_equal(g1.cells, g2.cells)

    def test_both_voided_corner_still_defined(self):
        test_set = _fake_test_set(10, seed=21)
        model = _FakeModel()
        grid = noise_sweep(model, test_set, [1.0], [1.0], np.random.default_rng(3))
        assert np.all(np.isfinite(grid.cells))
        assert all(call == (True, True) for call in model.calls)
