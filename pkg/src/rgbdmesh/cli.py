"""Experiment driver: gen-data, train-uscg, train, eval, sweep.

One YAML config describes the whole experiment; command-line flags override
only the seed and paths. Every artifact of a run lands in a directory named
by the config hash plus seed, so identical configurations reproduce
byte-identical outputs and different seeds sit side by side.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import uscg as uscg_mod
from .body import synth_model
from .config import ConfigError, ExperimentConfig, config_hash, default_config, load_config, run_dir
from .data import DatasetConfig, builtin_frames, default_pose_prior, load_dataset, make_paired_set
from .fusion import FusionModel, FusionNetwork, FusionTrainer, evaluate_model
from .metrics import SweepGrid, noise_sweep

SWEEP_LEVELS = tuple(i / 10 for i in range(11))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def _manifest_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data_dir) / data_mod.MANIFEST_NAME


def _load_dataset_or_fail(cfg: ExperimentConfig):
    manifest = _manifest_path(cfg)
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found at {manifest}; run gen-data first")
    return load_dataset(manifest)


def _constraint_path(cfg: ExperimentConfig, sub_name: str) -> Path:
    return Path(cfg.data_dir) / f"{sub_name}.constraints.jsonl"


def _frame_registry(subs) -> dict:
    frames = dict(builtin_frames())
    for sub in subs:
        frames[sub.frame.name] = sub.frame
    return frames


def _prepare_run_dir(cfg: ExperimentConfig) -> Path:
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg: ExperimentConfig, force: bool) -> int:
    manifest = _manifest_path(cfg)
    if manifest.exists() and not force:
        raise FileExistsError(f"dataset already exists at {manifest}; pass --force to regenerate")
    dataset_cfg = DatasetConfig(
        out_dir=Path(cfg.data_dir), sub_datasets=cfg.sub_datasets, body_seed=cfg.body_seed
    )
    path = data_mod.make_dataset(dataset_cfg, np.random.default_rng(cfg.seed))
    for spec in cfg.sub_datasets:
        print(f"gen-data: {spec.name}: {spec.size} samples ({spec.frame})")
    print(f"gen-data: manifest at {path}")
    return 0


def cmd_train_uscg(cfg: ExperimentConfig) -> int:
    subs = _load_dataset_or_fail(cfg)
    out = _prepare_run_dir(cfg)
    model = synth_model(seed=cfg.body_seed)
    prior = default_pose_prior()

    paired = make_paired_set(model, prior, cfg.uscg.n_pairs, np.random.default_rng(cfg.seed))
    pairs = list(zip(paired["joints14"], paired["beta"], paired["theta"]))
    net = uscg_mod.UscgNetwork.init(seed=cfg.seed, config=cfg.uscg.net_config())
    net, curve = uscg_mod.uscg_train(net, pairs, cfg.uscg.train_config(cfg.seed), model)
    net.save(out / "uscg.npz")
    _write_rows(
        out / "uscg-curve.tsv",
        ["step", "train_loss", "val_loss"],
        [[c["step"], c["train_loss"], c["val_loss"]] for c in curve],
    )
    print(f"train-uscg: final train loss {curve[-1]['train_loss']:.4f}")

    acceptance_rows = []
    for sub in subs:
        if not sub.has_3d:
            continue
        records = uscg_mod.generate_constraints_for_samples(
            net, list(sub.train) + list(sub.test), sub.frame, cfg.uscg.threshold_mm, model
        )
        uscg_mod.write_constraints(_constraint_path(cfg, sub.name), records)
        n_acc = sum(1 for r in records if r["accepted"])
        rate = n_acc / len(records) if records else 0.0
        acceptance_rows.append([sub.name, len(records), n_acc, rate])
        print(f"train-uscg: {sub.name}: accepted {n_acc}/{len(records)} ({100.0 * rate:.1f}%)")
    _write_rows(out / "uscg-acceptance.tsv", ["sub_dataset", "n", "accepted", "rate"], acceptance_rows)
    print(f"train-uscg: checkpoint at {out / 'uscg.npz'}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    subs = _load_dataset_or_fail(cfg)
    out = _prepare_run_dir(cfg)
    model = synth_model(seed=cfg.body_seed)
    prior = default_pose_prior()

    constraints = {}
    if cfg.train.use_smpl_constraints:
        missing = []
        for sub in subs:
            if not sub.has_3d:
                continue
            path = _constraint_path(cfg, sub.name)
            if not path.exists():
                missing.append(str(path))
                continue
            constraints.update(uscg_mod.accepted_constraint_map(uscg_mod.read_constraints(path)))
        if missing:
            raise FileNotFoundError(
                "use_smpl_constraints needs constraint files; run train-uscg first (missing: "
                + ", ".join(missing) + ")"
            )

    samples = [s for sub in subs for s in sub.train]
    if not samples:
        raise ValueError("dataset has no training samples")
    settings = cfg.train.settings()
    network = FusionNetwork.init(seed=cfg.seed, config=cfg.model)
    trainer = FusionTrainer(
        network,
        model,
        _frame_registry(subs),
        settings,
        cfg.loss_weights,
        seed=cfg.seed,
        sample_real=lambda rng, n: data_mod.sample_pose_shape_batch(rng, prior, n),
        constraints=constraints,
    )

    header = ["step"] + settings.enabled_components() + ["total"]
    if settings.use_adv:
        header.append("disc")
    batch_rng = np.random.default_rng(cfg.seed).spawn(1)[0]
    rows = []
    for step in range(1, cfg.train.n_steps + 1):
        idx = batch_rng.choice(len(samples), size=min(cfg.train.batch_size, len(samples)), replace=False)
        losses = trainer.train_step([samples[i] for i in idx])
        if step % cfg.train.log_every == 0 or step == cfg.train.n_steps:
            rows.append([step] + [losses[name] for name in header[1:]])
        if step % cfg.train.checkpoint_every == 0 or step == cfg.train.n_steps:
            trainer.save(out / "model.npz")
    _write_rows(out / "metrics.tsv", header, rows)
    print(f"train: {cfg.train.n_steps} steps, final total {rows[-1][header.index('total')]:.4f}")
    print(f"train: checkpoint at {out / 'model.npz'}")
    print(f"train: metrics log at {out / 'metrics.tsv'}")
    return 0


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, input_mode: str) -> int:
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    subs = _load_dataset_or_fail(cfg)
    out = _prepare_run_dir(cfg)
    network = FusionNetwork.load(ckpt)
    fm = FusionModel(network, synth_model(seed=cfg.body_seed), _frame_registry(subs))
    rows = []
    for sub in subs:
        report = evaluate_model(fm, sub.test, input_mode=input_mode, tie_tolerance=cfg.train.tie_tolerance)
        rows.append(
            [sub.name, report["n_samples"], report["reconstruction_error_mm"], report["ordinal_accuracy"]]
        )
        err = report["reconstruction_error_mm"]
        acc = report["ordinal_accuracy"]
        print(
            f"eval[{input_mode}] {sub.name}: n={report['n_samples']}"
            + (f" recon={err:.1f}mm" if err is not None else " recon=n/a")
            + (f" ordinal={acc:.3f}" if acc is not None else " ordinal=n/a")
        )
    path = out / f"eval-{input_mode}.tsv"
    _write_rows(path, ["sub_dataset", "n_samples", "reconstruction_error_mm", "ordinal_accuracy"], rows)
    print(f"eval: report at {path}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, checkpoints: list[str]) -> int:
    if not 1 <= len(checkpoints) <= 2:
        raise ValueError("sweep takes one or two checkpoints")
    for c in checkpoints:
        if not Path(c).exists():
            raise FileNotFoundError(f"checkpoint not found: {c}")
    subs = _load_dataset_or_fail(cfg)
    out = _prepare_run_dir(cfg)
    frames = _frame_registry(subs)
    body = synth_model(seed=cfg.body_seed)
    test_set = [
        s for sub in subs if sub.has_3d and sub.has_depth for s in sub.test if s.kp3d is not None
    ]
    if not test_set:
        raise ValueError("sweep needs 3D-annotated RGB-D test samples")

    grids = []
    for c in checkpoints:
        fm = FusionModel(FusionNetwork.load(c), body, frames)
        # same seed per grid: both checkpoints face identical voiding patterns
        grids.append(noise_sweep(fm, test_set, SWEEP_LEVELS, SWEEP_LEVELS, np.random.default_rng(cfg.seed)))

    names = ["sweep-a.tsv", "sweep-b.tsv"][: len(grids)]
    for name, grid in zip(names, grids):
        grid.save(out / name)
        print(f"sweep: grid at {out / name}")
    if len(grids) == 2:
        diff = SweepGrid(
            p_rgb_levels=grids[0].p_rgb_levels,
            p_d_levels=grids[0].p_d_levels,
            cells=grids[0].cells - grids[1].cells,
        )
        diff.save(out / "sweep-diff.tsv")
        print(f"sweep: difference grid at {out / 'sweep-diff.tsv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgbdmesh", description="RGB-D mesh recovery experiments on synthetic data"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=str, default=None, help="YAML config; defaults used when omitted")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--run-root", type=str, default=None, help="override the run directory root")
        p.add_argument("--data-dir", type=str, default=None, help="override the dataset directory")

    p = sub.add_parser("gen-data", help="generate the synthetic sub-datasets")
    add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = sub.add_parser("train-uscg", help="fit the constraint generator and write gated constraints")
    add_common(p)

    p = sub.add_parser("train", help="train the fusion model")
    add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint per sub-dataset")
    add_common(p)
    p.add_argument("checkpoint", type=str)
    p.add_argument("--input-mode", choices=["rgb", "depth", "rgbd"], default="rgbd")

    p = sub.add_parser("sweep", help="noise-robustness grid for one or two checkpoints")
    add_common(p)
    p.add_argument("checkpoints", type=str, nargs="+", help="one checkpoint, or two for a difference grid")

    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.run_root is not None:
        cfg.run_root = args.run_root
    if args.data_dir is not None:
        cfg.data_dir = args.data_dir
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, force=args.force)
        if args.command == "train-uscg":
            return cmd_train_uscg(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.input_mode)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.checkpoints)
        raise ValueError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return 2
    except FileExistsError as e:
        print(f"error: exists: {e}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as e:
        print(f"error: invalid: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
