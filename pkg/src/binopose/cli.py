"""Command-line driver.

    binopose <subcommand> --config run.cfg [--seed N] [--weights FILE] [--out DIR] [--single-thread]

Subcommands: synth, pretrain-pt, train-sce, train-e2e, eval, analyze-baseline,
gradcheck. Outputs land in ``--out`` (default: the config's ``out_dir``).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

from . import checks
from .config import ConfigError, RunConfig
from .geometry import baseline_error_mc, write_baseline_csv
from .metrics import write_reports
from .pipeline import evaluate, load_into, save_models, train_e2e
from .pose_transformer import PoseTransformer, pretrain_pt
from .sce import SCEModel, TrainConfig, train_sce
from .substrate import single_thread
from .synth import PoseConfig, SkeletonModel, load_dataset, make_dataset, sample_pose

SPLITS = {"train": 0, "val": 1, "test": 2}
PT_WEIGHTS = "pt.weights"
SCE_WEIGHTS = "sce.weights"
E2E_WEIGHTS = "e2e.weights"


class CommandError(RuntimeError):
    pass


def split_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, np.uint64)[0] >> 1)


def dataset_path(out: Path, split: str) -> Path:
    return out / f"{split}.bpsyn"


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {what}: {path}")
    return path


def load_split(cfg: RunConfig, out: Path, split: str):
    ds = load_dataset(require(dataset_path(out, split), f"{split} dataset (run 'synth' first)"))
    if ds.rig != cfg.rig():
        raise CommandError(f"{split} dataset rig {ds.rig} does not match the config rig {cfg.rig()}")
    if ds.config.digest() != cfg.synth().digest():
        raise CommandError(f"{split} dataset was generated with different synth settings")
    return ds


def pose_corpus(seed: int, n: int) -> np.ndarray:
    sk = SkeletonModel()
    rng = np.random.default_rng(seed)
    return np.stack([sample_pose(sk, rng, PoseConfig()) for _ in range(n)]) if n else np.zeros((0, 17, 3))


def write_rows(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in columns])


def echo(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    rig, sc = cfg.rig(), cfg.synth()
    for split, tag in SPLITS.items():
        n = cfg[f"data.{split}"]
        path = make_dataset(rig, sc, split_seed(cfg["seed"], tag), n, dataset_path(out, split))
        echo(f"wrote {n} {split} scenes to {path}")
    return 0


def cmd_pretrain_pt(cfg: RunConfig, out: Path, args) -> int:
    corpus = pose_corpus(split_seed(cfg["seed"], 10), cfg["data.pt_corpus"])
    held = pose_corpus(split_seed(cfg["seed"], 11), cfg["data.pt_heldout"])
    res = pretrain_pt(corpus, cfg.pt(), cfg.pretrain(), cfg["seed"], heldout_mm=held,
                      log_path=out / "pt_pretrain_log.csv", progress=lambda r: echo(f"pretrain {r}"))
    save_models(out / PT_WEIGHTS, pt=res.model)
    echo(f"constant-pad baseline {res.baseline_mm:.2f} mm; weights in {out / PT_WEIGHTS}")
    return 0


def cmd_train_sce(cfg: RunConfig, out: Path, args) -> int:
    ds = load_split(cfg, out, "train")
    torch.manual_seed(cfg["seed"])
    model = SCEModel(cfg.sce())
    rows = train_sce(model, ds.scenes, ds.rig, ds.config,
                     TrainConfig(epochs=cfg["optim.sce_epochs"], batch_size=cfg["optim.sce_batch"],
                                 lr=cfg["optim.lr_other"]),
                     seed=cfg["seed"], log=lambda r: echo(f"train-sce {r}"))
    write_rows(out / "sce_train_log.csv", ("epoch", "train_loss"), rows)
    save_models(out / SCE_WEIGHTS, sce=model)
    return 0


def cmd_train_e2e(cfg: RunConfig, out: Path, args) -> int:
    ds = load_split(cfg, out, "train")
    torch.manual_seed(cfg["seed"])
    sce, pt = SCEModel(cfg.sce()), PoseTransformer(cfg.pt())
    if not args.from_scratch:
        sce_w = require(Path(args.weights) if args.weights else out / SCE_WEIGHTS, "stereo-stage weights")
        pt_w = require(out / PT_WEIGHTS, "pose-transformer pre-training weights")
        load_into(sce_w, "sce.", sce)
        load_into(pt_w, "pt.", pt)
    rows = train_e2e(sce, pt, ds.scenes, ds.rig, ds.config, cfg["optim.e2e_epochs"], cfg["optim.e2e_batch"],
                     cfg["optim.lr_backbone"], cfg["seed"], strategy=cfg["eval.strategy"],
                     relative=cfg["eval.relative"], log=lambda r: echo(f"train-e2e {r}"))
    write_rows(out / "e2e_train_log.csv", ("epoch", "train_loss"), rows)
    save_models(out / E2E_WEIGHTS, sce=sce, pt=pt)
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    ds = load_split(cfg, out, "test")
    sce = pt = None
    if not args.inject_gt:
        weights = require(Path(args.weights) if args.weights else out / E2E_WEIGHTS, "weights")
        sce = SCEModel(cfg.sce())
        load_into(weights, "sce.", sce)
        pt = PoseTransformer(cfg.pt())
        if not load_into(weights, "pt.", pt, required=False):
            pt = None
    reports = evaluate(ds.scenes, ds.rig, ds.config, cfg.bbox_width_px(), sce=sce, pt=pt,
                       strategy=cfg["eval.strategy"], relative=cfg["eval.relative"], inject_gt=args.inject_gt)
    write_reports(reports, out / "eval_report.csv", out / "eval_report.txt")
    for r in reports:
        echo(r.to_text())
    return 0


def cmd_analyze_baseline(cfg: RunConfig, out: Path, args) -> int:
    stats = baseline_error_mc(cfg.rig(), cfg["baseline.baselines_mm"], cfg["baseline.sigma_px"],
                              cfg["baseline.trials"], cfg["seed"],
                              target_mm=(0.0, 0.0, cfg["baseline.target_depth_mm"]))
    path = write_baseline_csv(stats, out / "baseline_error.csv")
    for s in stats:
        echo(f"baseline {s.baseline_mm:7.1f} mm  median {s.median_mm:9.2f} mm")
    echo(f"wrote {path}")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    rows = checks.run_gradcheck_suite(cfg["seed"], cfg["gradcheck.eps"], cfg["gradcheck.tolerance"])
    with (out / "gradcheck.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "max_rel_error", "worst_param", "n_checked", "passed"])
        for r in rows:
            w.writerow([r.component, repr(r.max_rel_error), r.worst_param, r.n_checked, int(r.passed)])
    for r in rows:
        echo(f"{'PASS' if r.passed else 'FAIL'}  {r.component:20s} max rel err {r.max_rel_error:.3e}")
    return 0 if all(r.passed for r in rows) else 1


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-pt": cmd_pretrain_pt,
    "train-sce": cmd_train_sce,
    "train-e2e": cmd_train_e2e,
    "eval": cmd_eval,
    "analyze-baseline": cmd_analyze_baseline,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binopose", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat key = value config file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--weights", help="weight file to evaluate or to start end-to-end training from")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--single-thread", action="store_true",
                   help="one thread and deterministic kernels (bit-reproducible reference mode)")
    p.add_argument("--from-scratch", action="store_true",
                   help="train-e2e: start from random weights instead of the two pre-trained stages")
    p.add_argument("--inject-gt", action="store_true", help="eval: score ground truth as the prediction")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.set("seed", args.seed)
        out = Path(args.out or cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        if args.single_thread:
            single_thread(cfg["seed"])
        else:
            torch.manual_seed(cfg["seed"])
        return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, CommandError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"binopose {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
