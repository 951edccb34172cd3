"""Command-line entry point.

    shapeuda gen-data --out data/
    shapeuda train-source --data data/ --out runs/src
    shapeuda train-vae --data data/ --out runs/vae
    shapeuda adapt --data data/ --source runs/src --vae runs/vae --out runs/student
    shapeuda predict --data data/ --model runs/student --ttt --source runs/src --vae runs/vae --out runs/pred
    shapeuda eval --data data/ --pred runs/pred --out runs/eval
    shapeuda ablate | sweep-lambda | compare | analyze-losses --out runs/tables

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .adapt import AdaptConfig, TeacherBundle, adapt, test_time_predict, write_adapt_log
from .data.io import VolumeFormatError, read_dataset, read_volume, write_dataset, write_volume
from .data.preprocess import AugmentSpec
from .segnet import SegNet, UNetConfig, build_unet, predict_mask, train_source
from .shape_vae import ShapeVae, VaeConfig, build_vae, train_vae

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
# run manifests get their own name so they never clobber a checkpoint manifest
RUN_MANIFEST = "run.json"
SPLITS = ("source_train", "source_test", "target_train", "target_test")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(p: argparse.ArgumentParser):
    # SUPPRESS lets the flags appear before or after the subcommand
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help="key = value config file, or a run.json manifest to replay")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="experiment seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shapeuda", description="shape-prior domain adaptation experiments")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p)
        return p

    cmd("gen-data", "generate the synthetic source/target benchmark")
    p = cmd("train-source", "train the source segmenter")
    p.add_argument("--data", required=True, help="benchmark directory written by gen-data")
    p = cmd("train-vae", "train the shape VAE on source masks")
    p.add_argument("--data", required=True, help="benchmark directory written by gen-data")
    p = cmd("adapt", "adapt a student to the target domain")
    p.add_argument("--data", required=True, help="benchmark directory written by gen-data")
    p.add_argument("--source", required=True, help="source segmenter checkpoint")
    p.add_argument("--vae", required=True, help="VAE checkpoint")
    p.add_argument("--lambda", dest="lambda_hat", type=float, default=None, help="reconstruction weight (default from config)")
    p.add_argument("--dynamic", action="store_true", help="scale the weight with the reconstruction shortfall")
    p.add_argument("--no-recon", action="store_true", help="drop the reconstruction term")
    p.add_argument("--no-pseudo", action="store_true", help="drop the pseudo-label term")
    p = cmd("predict", "predict masks for a split")
    p.add_argument("--data", required=True, help="benchmark directory written by gen-data")
    p.add_argument("--split", default="target_test", choices=SPLITS, help="benchmark split (default target_test)")
    p.add_argument("--model", required=True, help="segmenter checkpoint")
    p.add_argument("--ttt", action="store_true", help="one test-time training step per image")
    p.add_argument("--source", help="source checkpoint (needed with --ttt)")
    p.add_argument("--vae", help="VAE checkpoint (needed with --ttt)")
    p = cmd("eval", "mean Dice of predicted masks")
    p.add_argument("--data", required=True, help="benchmark directory written by gen-data")
    p.add_argument("--split", default="target_test", choices=SPLITS, help="benchmark split (default target_test)")
    p.add_argument("--pred", required=True, help="directory of <case>.msk.vuda predictions")
    p.add_argument("--method", default="prediction", help="row label in the metrics table")
    for name, help_ in (("ablate", "component ablation table"), ("sweep-lambda", "reconstruction weight sweep"),
                        ("compare", "comparison with baselines and the upper bound"),
                        ("analyze-losses", "L_pseudo / L_recon scatter of target cases")):
        p = cmd(name, help_)
        p.add_argument("--cache", help="checkpoint cache directory (default <out>/cache)")
        p.add_argument("--quiet", action="store_true", help="no progress messages")
    return parser


# checkpoints carry their architecture next to the parameters

def save_segnet(net: SegNet, directory):
    d = Path(directory)
    net.save(d)
    (d / "model.json").write_text(json.dumps({"kind": "segnet", "depth": net.config.depth,
                                              "channels": list(net.config.channels)}))


def load_segnet(directory) -> SegNet:
    meta = _model_meta(directory, "segnet")
    return SegNet.load(directory, UNetConfig(depth=meta["depth"], channels=tuple(meta["channels"])))


def save_vae(vae: ShapeVae, directory):
    d = Path(directory)
    vae.save(d)
    c = vae.config
    (d / "model.json").write_text(json.dumps({"kind": "vae", "latent_dim": c.latent_dim, "depth": c.depth,
                                              "channels": list(c.channels), "input_size": c.input_size,
                                              "lambda_kl": c.lambda_kl}))


def load_vae(directory) -> ShapeVae:
    meta = _model_meta(directory, "vae")
    cfg = VaeConfig(latent_dim=meta["latent_dim"], depth=meta["depth"], channels=tuple(meta["channels"]),
                    input_size=meta["input_size"], lambda_kl=meta["lambda_kl"])
    return ShapeVae.load(directory, cfg)


def _model_meta(directory, kind):
    path = Path(directory) / "model.json"
    if not path.exists():
        raise DataError(f"{directory}: not a checkpoint directory (no model.json)")
    meta = json.loads(path.read_text())
    if meta.get("kind") != kind:
        raise DataError(f"{directory}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    return meta


def _config(args) -> ex.ExperimentConfig:
    path = getattr(args, "config", None)
    seed = getattr(args, "seed", None)
    if path and str(path).endswith(".json"):
        m = ex.RunManifest.load(path)
        cfg = ex.ExperimentConfig.from_dict(m.config)
        return cfg.with_(seed=seed) if seed is not None else cfg
    try:
        return ex.load_config(path, seed=seed)
    except (KeyError, ValueError, TypeError) as e:
        raise UsageError(f"bad config: {e}") from e


def _out(args) -> Path:
    out = getattr(args, "out", None)
    if not out:
        raise UsageError("--out is required")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _split(data, split):
    try:
        samples, _ = read_dataset(data, split)
    except FileNotFoundError as e:
        raise DataError(f"missing dataset split {split!r} under {data}: {e}") from e
    if not samples:
        raise DataError(f"dataset split {split!r} under {data} is empty")
    return samples


def _check_finite(net, what):
    for name, t in net.params.items():
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"{what}: non-finite values in {name}")


def _write_curve(path, history, keys):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in history:
            w.writerow([r[k] for k in keys])


def _save_manifest(out, command, cfg, seeds, phases=None, metrics=None):
    ex.RunManifest(command, cfg.seed, cfg.to_dict(), seeds, phases=phases or {},
                   metrics=metrics or {}).save(out / RUN_MANIFEST)


# commands

def cmd_gen_data(args):
    cfg, out = _config(args), _out(args)
    pipe = ex.Pipeline(cfg)
    bm = pipe.benchmark
    for split, samples in zip(SPLITS, bm):
        seeds = dict(zip((s.case_id for s in samples), bm.seeds[split]))
        extra = {"labels_for_evaluation_only": True} if split == "target_train" else None
        write_dataset(out, split, samples, seeds, extra)
    _save_manifest(out, "gen-data", cfg, bm.seeds, pipe.phases)
    print(f"wrote {sum(len(s) for s in bm)} cases to {out}")


def cmd_train_source(args):
    cfg, out = _config(args), _out(args)
    samples = _split(args.data, "source_train")
    net = build_unet(cfg.unet(), seed=cfg.seed)
    train_source(net, samples, cfg.source_iters, cfg.source_lr, AugmentSpec(), np.random.default_rng([cfg.seed, 1]))
    _check_finite(net, "source training")
    save_segnet(net, out)
    _write_curve(out / "loss_curve.csv", net.history, ("iter", "loss", "case"))
    _save_manifest(out, "train-source", cfg, {}, metrics={"final_loss": net.history[-1]["loss"] if net.history else None})
    print(f"saved source segmenter to {out}")


def cmd_train_vae(args):
    cfg, out = _config(args), _out(args)
    samples = _split(args.data, "source_train")
    vae = build_vae(cfg.vae(), seed=cfg.seed)
    train_vae(vae, [s.mask for s in samples], cfg.vae_iters, rng=np.random.default_rng([cfg.seed, 2]),
              **cfg.vae_training())
    _check_finite(vae, "VAE training")
    save_vae(vae, out)
    _write_curve(out / "loss_curve.csv", vae.history, ("iter", "loss", "recon", "kl"))
    _save_manifest(out, "train-vae", cfg, {})
    print(f"saved shape VAE to {out}")


def _adapt_config(args, cfg) -> AdaptConfig:
    kw = {}
    if getattr(args, "lambda_hat", None) is not None:
        kw["lambda_hat"] = args.lambda_hat
    if getattr(args, "dynamic", False):
        kw["dynamic"] = True
    if getattr(args, "no_recon", False):
        kw.update(use_recon=False, lambda_hat=0.0, dynamic=False)
    if getattr(args, "no_pseudo", False):
        kw["use_pseudo"] = False
    if not kw.get("use_pseudo", True) and not kw.get("use_recon", True):
        raise UsageError("--no-recon and --no-pseudo leave nothing to minimise")
    try:
        return cfg.adapt_config(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_adapt(args):
    cfg, out = _config(args), _out(args)
    acfg = _adapt_config(args, cfg)
    images = [s.image for s in _split(args.data, "target_train")]
    bundle = TeacherBundle(load_segnet(args.source), load_vae(args.vae))
    log: list = []
    student = adapt(bundle, bundle.student(), images, acfg, rng=np.random.default_rng([cfg.seed, 3]), log=log)
    _check_finite(student, "adaptation")
    save_segnet(student.eval(), out)
    write_adapt_log(out / "adapt_log.csv", log)
    _save_manifest(out, "adapt", cfg, {})
    print(f"saved adapted student to {out}")


def cmd_predict(args):
    cfg, out = _config(args), _out(args)
    samples = _split(args.data, args.split)
    net = load_segnet(args.model).eval()
    if args.ttt:
        if not (args.source and args.vae):
            raise UsageError("--ttt needs --source and --vae")
        bundle = TeacherBundle(load_segnet(args.source), load_vae(args.vae))
        acfg = _adapt_config(args, cfg).with_(ttt=True)
        preds = [test_time_predict(bundle, net, s.image, acfg) for s in samples]
    else:
        preds = [predict_mask(net, s.image, cfg.threshold) for s in samples]
    for s, p in zip(samples, preds):
        write_volume(out / f"{s.case_id}.msk.vuda", p)
    print(f"wrote {len(preds)} predictions to {out}")


def cmd_eval(args):
    out = _out(args)
    samples = _split(args.data, args.split)
    preds = []
    for s in samples:
        path = Path(args.pred) / f"{s.case_id}.msk.vuda"
        if not path.exists():
            raise DataError(f"missing prediction for case {s.case_id}: {path}")
        preds.append(read_volume(path))
    rec = ex.mean_dice(preds, [s.mask for s in samples], args.method)
    print(ex.write_table(out, "eval", [rec]), end="")


def _pipeline(args, cfg, out) -> ex.Pipeline:
    cache = getattr(args, "cache", None) or out / "cache"
    return ex.Pipeline(cfg, cache, verbose=not getattr(args, "quiet", False))


def _table_command(name, runner, title):
    def run(args):
        cfg, out = _config(args), _out(args)
        pipe = _pipeline(args, cfg, out)
        rows = runner(pipe)
        text = ex.write_table(out, name, rows, title)
        print(text, end="")
        pipe.manifest(args.command, {r.method: r.mean_dice for r in rows}).save(out / RUN_MANIFEST)
    return run


def cmd_analyze_losses(args):
    cfg, out = _config(args), _out(args)
    pipe = _pipeline(args, cfg, out)
    res = ex.run_loss_scatter(pipe)
    summary = ex.write_scatter(out, res)
    pipe.manifest("analyze-losses", {"dist_predicted_to_gt": res.dist_predicted,
                                     "dist_pseudo_to_gt": res.dist_pseudo}).save(out / RUN_MANIFEST)
    print(json.dumps(summary, indent=1))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "train-vae": cmd_train_vae,
    "adapt": cmd_adapt,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate": _table_command("ablation", ex.run_ablation, "component ablation, target test mean Dice"),
    "sweep-lambda": _table_command("lambda_sweep", ex.run_lambda_sweep, "reconstruction weight sweep"),
    "compare": _table_command("comparison", ex.run_comparison, "method comparison with domain gap"),
    "analyze-losses": cmd_analyze_losses,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        COMMANDS[args.command](args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VolumeFormatError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(cli_main())
