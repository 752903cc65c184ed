"""Acceptance gates for the full pipeline.

Ten checks: exact property suites for gradients, kinematics, alignment,
depth-rank arithmetic, and the stream-dropout policy, then trend
reproductions on synthetic data (dropout robustness, depth-ranking ablation,
constraint-generator benefit, RGB-only augmentation) and byte-level training
determinism. Trend checks train small fusion models from scratch, so this
module dominates the suite's runtime; each timed check asserts its own
wall-clock budget.
"""
import shutil
import time

import numpy as np
import pytest
import yaml

from test_metrics import oracle_align_residual_mm

from rgbdmesh import autodiff as ad
from rgbdmesh import body, cli, data, fusion, metrics, uscg
from rgbdmesh.config import load_config, run_dir
from rgbdmesh.losses import (
    DepthRankRelation,
    LossWeights,
    depth_relations,
    discriminator_forward,
    init_discriminator,
    loss_2d,
    loss_adv,
    loss_drc,
    loss_smpl,
    loss_total,
)


@pytest.fixture(scope="module")
def model():
    return body.synth_model(0)


# -- shared synthetic-training harness --------------------------------------


def build_subs(model, sizes, seed=100):
    """In-memory sub-datasets with the same draws the on-disk generator makes."""
    frames = data.builtin_frames()
    rng = np.random.default_rng(seed)
    prior = data.default_pose_prior()
    subs = []
    for name, frame_name, size, has_3d, has_depth in sizes:
        frame = frames[frame_name]
        noise = data.NoiseConfig()
        children = rng.spawn(size)
        samples = []
        for i in range(size):
            child = children[i]
            beta, theta = data.sample_pose_shape(child, prior)
            cam = data.sample_camera(child)
            samples.append(
                data.make_sample(
                    model, beta, theta, cam, frame, noise, child,
                    sample_id=f"{name}/{i:06d}", with_3d=has_3d, with_depth=has_depth,
                )
            )
        n_test = int(round(size * 0.2))
        subs.append(
            data.LoadedSubDataset(
                name=name, frame=frame, has_3d=has_3d, has_depth=has_depth,
                train=samples[: size - n_test], test=samples[size - n_test:],
            )
        )
    return subs


def train_fusion(subs, settings, seed, model, n_steps, batch_size, weights, d, constraints=None):
    frames = {s.frame.name: s.frame for s in subs}
    frames.update(data.builtin_frames())
    prior = data.default_pose_prior()
    net = fusion.FusionNetwork.init(
        seed=seed, config=fusion.FusionConfig(feature_dim=d, regressor_hidden=(d, d))
    )
    trainer = fusion.FusionTrainer(
        net, model, frames, settings, weights, seed=seed,
        sample_real=lambda rng, n: data.sample_pose_shape_batch(rng, prior, n),
        constraints=constraints or {},
    )
    samples = [s for sub in subs for s in sub.train]
    batch_rng = np.random.default_rng(seed).spawn(1)[0]
    for _ in range(n_steps):
        idx = batch_rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        trainer.train_step([samples[i] for i in idx])
    return fusion.FusionModel(net, model, frames)


# -- 1. gradient suite ------------------------------------------------------


def test_losses_and_network_forwards_match_numeric_gradients(model):
    start = time.perf_counter()
    worst: dict[str, float] = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    disc = init_discriminator(seed=0, hidden=16)
    fusion_cfg = fusion.FusionConfig(feature_dim=8, regressor_hidden=(8, 8), n_iterations=2)
    fusion_net = fusion.FusionNetwork.init(seed=3, config=fusion_cfg)
    uscg_net = uscg.UscgNetwork.init(seed=2, config=uscg.UscgConfig(hidden_width=8, n_layers=3))
    frames = data.builtin_frames()
    prior = data.default_pose_prior()
    batch = build_subs(model, [("g", "meters-a", 2, True, True)], seed=5)[0].train
    obs_rgb = np.stack([s.rgb_obs.data for s in batch])
    obs_d = np.stack([s.depth_obs.data for s in batch])

    for seed in range(10):
        rng = np.random.default_rng(seed)

        gt_kp = rng.normal(size=(14, 2))
        vis = rng.random(14) > 0.25

        def fn_2d(leaves):
            value, _ = loss_2d(leaves["kp"], gt_kp, vis)
            return value

        record("loss_2d", ad.grad_check(fn_2d, {"kp": rng.normal(size=(14, 2))}, seed=seed))

        target = (rng.normal(size=10), rng.normal(size=72))

        def fn_smpl(leaves):
            return loss_smpl(target, (leaves["beta"], leaves["theta"]))

        point = {"beta": rng.normal(size=10), "theta": rng.normal(size=72)}
        record("loss_smpl", ad.grad_check(fn_smpl, point, seed=seed))

        z_gt = rng.permutation(14).astype(np.float64)
        rels = depth_relations(z_gt, tie_tolerance=0.0)

        def fn_drc(leaves):
            return loss_drc(leaves["z"], rels)

        record("loss_drc", ad.grad_check(fn_drc, {"z": rng.normal(size=14)}, seed=seed))

        def fn_adv_gen(leaves):
            score = discriminator_forward(disc, leaves["beta"], leaves["rots"])
            return loss_adv(True, score)

        point = {"beta": rng.normal(size=10), "rots": rng.normal(size=216)}
        record("loss_adv_gen", ad.grad_check(fn_adv_gen, point, seed=seed))

        fake_in = (rng.normal(size=10), rng.normal(size=216))
        real_in = (rng.normal(size=10), rng.normal(size=216))

        def fn_adv_disc(leaves):
            fake = discriminator_forward(leaves, *fake_in)
            real = discriminator_forward(leaves, *real_in)
            return loss_adv(False, fake, real)

        record("loss_adv_disc", ad.grad_check(fn_adv_disc, dict(disc), sample_coords=20, seed=seed))

        # combined objective: one flat vector feeds all four components
        weights = LossWeights(lambda_2d=2.0, lambda_smpl=0.5, lambda_drc=0.1, lambda_adv=1.0)

        def fn_total(leaves):
            x = leaves["x"]
            kp = x.narrow(0, 0, 28).reshape((14, 2))
            l2d, _ = loss_2d(kp, gt_kp, vis)
            beta = x.narrow(0, 28, 38)
            theta = x.narrow(0, 38, 110)
            lsmpl = loss_smpl(target, (beta, theta))
            z = x.narrow(0, 110, 124)
            ldrc = loss_drc(z, rels)
            db = x.narrow(0, 124, 134)
            dr = x.narrow(0, 134, 350)
            ladv = loss_adv(True, discriminator_forward(disc, db, dr))
            components = {"2d": l2d, "smpl": lsmpl, "drc": ldrc, "adv": ladv}
            available = {k: True for k in components}
            return loss_total(components, weights, available)

        # Probe near a realistic operating point. Far from it the objective's
        # magnitude swamps near-zero gradient coordinates with central-diff
        # cancellation noise; epsilon 1e-4 keeps that noise below tolerance.
        x0 = np.empty(350)
        x0[0:28] = gt_kp.ravel() + 0.3 * rng.normal(size=28)
        x0[28:38] = target[0] + 0.2 * rng.normal(size=10)
        x0[38:110] = target[1] + 0.2 * rng.normal(size=72)
        x0[110:124] = 0.25 * z_gt + 0.1 * rng.normal(size=14)
        x0[124:350] = 0.5 * rng.normal(size=226)
        record("loss_total", ad.grad_check(fn_total, {"x": x0}, epsilon=1e-4, sample_coords=40, seed=seed))

        proj = rng.normal(size=(2, 88))

        def fn_fusion(leaves):
            params = {
                k: leaves[k] if k in leaves else ad.constant(v)
                for k, v in fusion_net.params.items()
            }
            theta = fusion._forward_batch(params, fusion_cfg, obs_rgb, obs_d)
            return (theta * ad.constant(proj)).sum()

        point = {
            "enc_rgb.w0": fusion_net.params["enc_rgb.w0"],
            "enc_d.w1": fusion_net.params["enc_d.w1"],
            "fuse.w1": fusion_net.params["fuse.w1"],
            "reg.w2": fusion_net.params["reg.w2"],
        }
        record("fusion_forward", ad.grad_check(fn_fusion, point, sample_coords=20, seed=seed))

        beta_s, theta_s = data.sample_pose_shape(rng, prior)
        _, joints = body.smpl_forward(model, beta_s, theta_s)
        j_rel = uscg.root_relativize(joints)
        proj_b = rng.normal(size=10)
        proj_t = rng.normal(size=72)

        def fn_uscg(leaves):
            params = {
                k: leaves[k] if k in leaves else ad.constant(v)
                for k, v in uscg_net.params.items()
            }
            beta, theta = uscg.uscg_forward(uscg_net, leaves["j"], params=params)
            return (beta * ad.constant(proj_b)).sum() + (theta * ad.constant(proj_t)).sum()

        point = {
            "j": j_rel,
            "uscg.w0": uscg_net.params["uscg.w0"],
            "uscg.b2": uscg_net.params["uscg.b2"],
        }
        record("uscg_forward", ad.grad_check(fn_uscg, point, sample_coords=30, seed=seed))

    elapsed = time.perf_counter() - start
    for name, err in worst.items():
        assert err < 1e-4, f"{name}: max relative gradient error {err:.3e}"
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# -- 2. kinematics suite ----------------------------------------------------


def test_rotation_rest_pose_and_equivariance_properties(model):
    start = time.perf_counter()
    rng = np.random.default_rng(0)

    omega = rng.normal(size=(1000, 3)) * rng.uniform(0.0, 3.0, size=(1000, 1))
    omega[0] = 0.0
    omega[1] = [1e-13, 0.0, 0.0]
    omega[2] = [np.pi, 0.0, 0.0]
    R = body.rotation_matrices(omega)
    eye = np.eye(3)
    ortho = np.abs(np.einsum("nij,nkj->nik", R, R) - eye).max()
    assert ortho < 1e-10, f"R R^T deviates from I by {ortho:.3e}"
    dets = np.linalg.det(R)
    assert np.abs(dets - 1.0).max() < 1e-10

    for _ in range(1000):
        beta = rng.normal(size=10)
        v_rest, _ = body.shaped_rest(model, beta)
        v, j = body.smpl_forward(model, beta, np.zeros(72))
        np.testing.assert_allclose(v, v_rest, atol=1e-10)
        np.testing.assert_allclose(j, model.keypoint_regressor @ v_rest, atol=1e-10)

    for _ in range(1000):
        beta = rng.normal(size=10)
        theta = rng.normal(size=72) * 0.4
        theta[:3] = 0.0
        w = rng.normal(size=3)
        theta_rot = theta.copy()
        theta_rot[:3] = w
        Rw = body.rodrigues(w)
        _, j_rest = body.shaped_rest(model, beta)
        root = j_rest[0]
        v0, j0 = body.smpl_forward(model, beta, theta)
        v1, j1 = body.smpl_forward(model, beta, theta_rot)
        np.testing.assert_allclose(v1, (v0 - root) @ Rw.T + root, atol=1e-9)
        np.testing.assert_allclose(j1, (j0 - root) @ Rw.T + root, atol=1e-9)

    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"kinematics suite took {elapsed:.1f}s"


# -- 3. alignment oracle ----------------------------------------------------


def test_alignment_zero_residual_and_numeric_oracle_agreement():
    start = time.perf_counter()
    rng = np.random.default_rng(0)

    for _ in range(100):
        a = rng.normal(size=(14, 3)) * 0.4
        R = body.rodrigues(rng.normal(size=3))
        s = float(np.exp(rng.uniform(-0.7, 0.7)))
        t = rng.uniform(-1.0, 1.0, size=3)
        b = s * a @ R.T + t
        assert metrics.reconstruction_error(a, b) < 1e-9
        assert metrics.reconstruction_error(b, a) < 1e-9

    for i in range(100):
        a = rng.normal(size=(14, 3)) * 0.4
        R = body.rodrigues(rng.normal(size=3))
        s = float(np.exp(rng.uniform(-0.5, 0.5)))
        t = rng.uniform(-0.5, 0.5, size=3)
        sigma = (0.005, 0.05, 0.2)[i % 3]
        b = s * a @ R.T + t + rng.normal(size=(14, 3)) * sigma
        closed = metrics.reconstruction_error(a, b)
        brute = oracle_align_residual_mm(a, b, with_scale=True, seed=i)
        assert abs(closed - brute) < 1e-6, f"pair {i}: {closed!r} vs {brute!r}"

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"alignment oracle suite took {elapsed:.1f}s"


# -- 4. depth-rank arithmetic -----------------------------------------------


def test_depth_rank_scalars_shift_invariance_and_pair_counts():
    # closer-pair examples at margin 5, computed fresh from the closed form
    small = float(np.log1p(np.exp(-5.0)))
    large = float(np.log1p(np.exp(5.0)))
    rels = [DepthRankRelation((0, 1), 1)]
    assert abs(loss_drc(np.array([0.0, 5.0]), rels).item() - small) < 1e-9
    assert abs(loss_drc(np.array([5.0, 0.0]), rels).item() - large) < 1e-9
    assert loss_drc(np.array([0.0, 5.0]), []).item() == 0.0

    z = np.array([1.0, 2.0, 4.0, 8.0, -3.0, 0.5, 16.0, 1.5, 2.5, 3.5, -1.0, 6.0, 10.0, 0.25])
    all_rels = depth_relations(z, tie_tolerance=0.0)
    assert loss_drc(z, all_rels).item() == loss_drc(z + 2.0, all_rels).item()
    assert loss_drc(z, all_rels).item() == loss_drc(z - 8.0, all_rels).item()

    rng = np.random.default_rng(3)
    for k in (0, 1, 2, 5, 9, 14):
        zk = rng.permutation(k).astype(np.float64)
        assert len(depth_relations(zk, tie_tolerance=0.0)) == k * (k - 1) // 2


# -- 5. stream-dropout policy -----------------------------------------------


def test_stream_dropout_frequencies_and_never_both_dropped():
    rng = np.random.default_rng(0)
    n = 1_000_000
    counts = {fusion.DropChoice.RGB: 0, fusion.DropChoice.DEPTH: 0, fusion.DropChoice.NONE: 0}
    for _ in range(n):
        mask = fusion.select_streams(rng, 0.3)
        counts[mask.drop] += 1
    both_dropped = n - sum(counts.values())
    assert both_dropped == 0
    assert abs(counts[fusion.DropChoice.RGB] / n - 0.3) <= 0.005
    assert abs(counts[fusion.DropChoice.DEPTH] / n - 0.3) <= 0.005
    assert abs(counts[fusion.DropChoice.NONE] / n - 0.4) <= 0.005


# -- 6. dropout robustness trend --------------------------------------------


def test_dropout_training_wins_on_high_void_cells(model):
    start = time.perf_counter()
    sub = build_subs(model, [("rgbd", "meters-a", 5000, True, True)])[0]
    frames = {sub.frame.name: sub.frame}
    frames.update(data.builtin_frames())
    levels = [i / 10 for i in range(11)]
    high = [(i, j) for i in range(11) for j in range(11) if max(levels[i], levels[j]) >= 0.5]
    sweep_samples = sub.test[:200]

    total_lower = 0
    for seed in (0, 1, 2):
        st_drop = fusion.TrainSettings(
            use_smpl_constraints=False, use_drc=False, use_adv=False,
            use_3d_joint_loss=True, dropout_training=True, p_miss=0.3,
        )
        st_none = fusion.TrainSettings(
            use_smpl_constraints=False, use_drc=False, use_adv=False,
            use_3d_joint_loss=True, dropout_training=True, p_miss=0.0,
        )
        m_drop = train_fusion([sub], st_drop, seed, model, 800, 16, LossWeights(), 48)
        m_none = train_fusion([sub], st_none, seed, model, 800, 16, LossWeights(), 48)
        # paired voiding draws: both models face identical void patterns
        g_drop = metrics.noise_sweep(m_drop, sweep_samples, levels, levels, np.random.default_rng(1000 + seed))
        g_none = metrics.noise_sweep(m_none, sweep_samples, levels, levels, np.random.default_rng(1000 + seed))
        diff = g_drop.cells - g_none.cells
        total_lower += sum(1 for i, j in high if diff[i, j] < 0)

    fraction = total_lower / (3 * len(high))
    assert fraction >= 0.8, f"dropout model lower in only {fraction:.1%} of high-void cells"
    elapsed = time.perf_counter() - start
    assert elapsed < 1800.0, f"dropout robustness trend took {elapsed:.0f}s"


# -- 7. depth-ranking ablation trend ----------------------------------------


def test_depth_ranking_loss_improves_heldout_metrics(model):
    start = time.perf_counter()
    subs = build_subs(model, [("rgbd-m", "meters-a", 1500, True, True)])
    test = subs[0].test
    weights = LossWeights(lambda_drc=0.05)
    base_st = fusion.TrainSettings(
        use_smpl_constraints=False, use_drc=False, use_adv=True, dropout_training=False
    )
    rank_st = fusion.TrainSettings(
        use_smpl_constraints=False, use_drc=True, use_adv=True, dropout_training=False
    )

    recon_base, recon_rank, ord_base, ord_rank = [], [], [], []
    for seed in (0, 1, 2):
        m_base = train_fusion(subs, base_st, seed, model, 2500, 24, weights, 48)
        m_rank = train_fusion(subs, rank_st, seed, model, 2500, 24, weights, 48)
        r_base = fusion.evaluate_model(m_base, test, "rgbd")
        r_rank = fusion.evaluate_model(m_rank, test, "rgbd")
        recon_base.append(r_base["reconstruction_error_mm"])
        recon_rank.append(r_rank["reconstruction_error_mm"])
        ord_base.append(r_base["ordinal_accuracy"])
        ord_rank.append(r_rank["ordinal_accuracy"])

    mean_recon_base = float(np.mean(recon_base))
    mean_recon_rank = float(np.mean(recon_rank))
    mean_ord_base = float(np.mean(ord_base))
    mean_ord_rank = float(np.mean(ord_rank))
    assert mean_recon_rank < mean_recon_base, (
        f"ranking loss failed to reduce error: {mean_recon_base:.1f} -> {mean_recon_rank:.1f} mm"
    )
    assert mean_ord_rank >= mean_ord_base + 0.05, (
        f"ordinal accuracy gain below 5pp: {mean_ord_base:.3f} -> {mean_ord_rank:.3f}"
    )
    elapsed = time.perf_counter() - start
    assert elapsed < 1800.0, f"depth-ranking ablation took {elapsed:.0f}s"


# -- 8. constraint-generator pipeline ---------------------------------------


def test_constraint_generator_acceptance_and_training_benefit(model):
    subs = build_subs(
        model,
        [("rgbd-mm", "millimeters-b", 400, True, True),
         ("rgbd-m", "meters-a", 400, True, True)],
    )
    prior = data.default_pose_prior()
    raw = data.make_paired_set(model, prior, 2000, np.random.default_rng(11))
    paired = list(zip(raw["joints14"], raw["beta"], raw["theta"]))
    net = uscg.UscgNetwork.init(seed=1)
    uscg.uscg_train(net, paired, uscg.UscgTrainConfig(n_steps=1500, batch_size=64, seed=0), model)

    constraints: dict = {}
    for sub in subs:
        records = uscg.generate_constraints_for_samples(net, sub.train, sub.frame, 100.0, model)
        accepted = sum(r["accepted"] for r in records)
        rate = accepted / len(records)
        assert rate >= 0.7, f"{sub.name}: constraint acceptance {rate:.1%} below 70%"
        constraints.update(uscg.accepted_constraint_map(records))

    weights = LossWeights()
    base_st = fusion.TrainSettings(
        use_smpl_constraints=False, use_drc=False, use_adv=True, dropout_training=False
    )
    con_st = fusion.TrainSettings(
        use_smpl_constraints=True, use_drc=False, use_adv=True, dropout_training=False
    )
    errors: dict[str, dict[str, list]] = {s.name: {"base": [], "con": []} for s in subs}
    for seed in (0, 1, 2):
        m_base = train_fusion(subs, base_st, seed, model, 1500, 16, weights, 48)
        m_con = train_fusion(subs, con_st, seed, model, 1500, 16, weights, 48, constraints=constraints)
        for sub in subs:
            errors[sub.name]["base"].append(
                fusion.evaluate_model(m_base, sub.test, "rgbd")["reconstruction_error_mm"]
            )
            errors[sub.name]["con"].append(
                fusion.evaluate_model(m_con, sub.test, "rgbd")["reconstruction_error_mm"]
            )

    for sub in subs:
        mean_base = float(np.mean(errors[sub.name]["base"]))
        mean_con = float(np.mean(errors[sub.name]["con"]))
        assert mean_con < mean_base, (
            f"{sub.name}: constraints failed to reduce error "
            f"({mean_base:.1f} -> {mean_con:.1f} mm)"
        )


# -- 9. RGB-only augmentation trend -----------------------------------------


def test_rgb_only_augmentation_helps_rgb_mode_without_regression(model):
    # Data-starved RGB-D base plus a large monocular pool, judged on a
    # separate never-trained RGB-D subset so the held-out estimate is stable.
    subs = build_subs(
        model,
        [("rgbd-m", "meters-a", 150, True, True),
         ("rgb-only", "meters-a", 700, False, False),
         ("rgbd-eval", "meters-a", 400, True, True)],
    )
    train_sub, aug_sub, eval_sub = subs
    eval_samples = eval_sub.train + eval_sub.test
    settings = fusion.TrainSettings(
        use_smpl_constraints=False, use_drc=False, use_adv=False,
        use_3d_joint_loss=True, dropout_training=True,
    )
    weights = LossWeights()
    modes = ("rgbd", "rgb", "depth")
    errs: dict[str, dict[str, list]] = {k: {m: [] for m in modes} for k in ("base", "aug")}
    for seed in (0, 1, 2):
        m_base = train_fusion([train_sub], settings, seed, model, 2500, 24, weights, 24)
        m_aug = train_fusion([train_sub, aug_sub], settings, seed, model, 2500, 24, weights, 24)
        for mode in modes:
            errs["base"][mode].append(
                fusion.evaluate_model(m_base, eval_samples, mode)["reconstruction_error_mm"]
            )
            errs["aug"][mode].append(
                fusion.evaluate_model(m_aug, eval_samples, mode)["reconstruction_error_mm"]
            )

    for mode in modes:
        mean_base = float(np.mean(errs["base"][mode]))
        mean_aug = float(np.mean(errs["aug"][mode]))
        assert mean_aug <= 1.02 * mean_base, (
            f"{mode} mode degraded beyond 2%: {mean_base:.1f} -> {mean_aug:.1f} mm"
        )
    mean_base_rgb = float(np.mean(errs["base"]["rgb"]))
    mean_aug_rgb = float(np.mean(errs["aug"]["rgb"]))
    assert mean_aug_rgb < mean_base_rgb, (
        f"RGB mode not improved: {mean_base_rgb:.1f} -> {mean_aug_rgb:.1f} mm"
    )


# -- 10. training determinism -----------------------------------------------


def test_training_metrics_log_reproduces_byte_identically(tmp_path):
    config = {
        "seed": 5,
        "run_root": str(tmp_path / "runs"),
        "data_dir": str(tmp_path / "data"),
        "sub_datasets": [
            {"name": "rgbd-mm", "frame": "millimeters-b", "size": 24},
            {"name": "rgbd-m", "frame": "meters-a", "size": 16},
        ],
        "model": {"feature_dim": 16, "regressor_hidden": (16, 16)},
        "train": {
            "n_steps": 20, "batch_size": 8, "log_every": 5, "checkpoint_every": 10,
            "use_smpl_constraints": False,
        },
    }
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(config))

    assert cli.main(["gen-data", "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--config", str(cfg_path)]) == 0

    cfg = load_config(cfg_path)
    metrics_path = run_dir(cfg) / "metrics.tsv"
    first = metrics_path.read_bytes()
    copy_path = tmp_path / "first-metrics.tsv"
    shutil.copyfile(metrics_path, copy_path)

    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    second = metrics_path.read_bytes()
    assert second == copy_path.read_bytes() == first
