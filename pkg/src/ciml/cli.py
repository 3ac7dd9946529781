"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad config, data or check),
2 runtime error, 64 usage error. Every error line starts with ``CIML-ERR:``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64
ERR = "CIML-ERR:"

log = logging.getLogger("ciml")


class UsageError(Exception):
    pass


class ValidationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed_everything(seed: int) -> None:
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


# -- oracle -----------------------------------------------------------------------

def cmd_oracle_verify(args) -> int:
    from .oracle import format_table, run_verification

    results = run_verification(n_nets=args.nets, seed=args.seed, tol=args.tol,
                               n_bound_nets=args.bound_nets, n_joints=args.joints)
    print(format_table(results))
    if not all(r.passed for r in results):
        raise ValidationFailed("oracle checks failed: " + ", ".join(r.name for r in results if not r.passed))
    return EXIT_OK


# -- ShapeComposition demo ----------------------------------------------------------

def cmd_demo_shapes(args) -> int:
    from . import shapes

    if not (args.generate or args.train or args.evaluate or args.export_figures):
        raise UsageError("demo shapes: give at least one of --generate, --train, --evaluate, --export-figures")
    work = Path(args.workdir)
    data_dir, ckpt = work / "data", work / "demo_model.ckpt"
    if args.generate:
        pairs = shapes.generate_dataset(args.n, args.size, args.seed)
        shapes.save_pairs(data_dir, pairs)
        print(f"wrote {len(pairs)} pairs to {data_dir}")
    pairs = shapes.load_pairs(data_dir)
    train, test = shapes.split(pairs, args.test_fraction)
    if args.train:
        cfg = shapes.DemoTrainConfig(epochs=args.epochs, iterations_per_epoch=args.iterations,
                                     batch_size=args.batch_size, initial_lr=args.lr,
                                     beta_kl=args.beta, seed=args.seed)
        model = shapes.build_demo_model(shapes.DemoConfig(image_size=args.size), args.seed)
        work.mkdir(parents=True, exist_ok=True)
        with open(work / "train_log.jsonl", "w") as fh:
            def record(r):
                fh.write(json.dumps(r) + "\n")
                if r["epoch"] % 10 == 0:
                    log.info("epoch %d ce %.4f dice %.4f kl %.4f", r["epoch"], r["ce"], r["dice"], r["kl"])
            shapes.train_demo(model, train, cfg, record)
        shapes.save_demo_model(ckpt, model, {"epochs": cfg.epochs, "beta_kl": cfg.beta_kl})
        print(f"saved {ckpt}")
    if args.evaluate or args.export_figures:
        model, _ = shapes.load_demo_model(ckpt)
    if args.evaluate:
        metrics = {"union_dice": shapes.union_dice(model, test),
                   "localization": shapes.evaluate_localization(model, test),
                   **shapes.latent_stats(model, test), "n_test": len(test)}
        (work / "metrics.json").write_text(json.dumps(metrics, indent=2))
        for k, v in metrics.items():
            print(f"{k:20s} {v:.4f}" if isinstance(v, float) else f"{k:20s} {v}")
    if args.export_figures:
        out = work / "figure.png"
        shapes.export_figure(model, test[:args.rows], out)
        print(f"wrote {out}")
    return EXIT_OK


# -- synthetic volumes -----------------------------------------------------------

def cmd_synth_generate(args) -> int:
    from .config import ArchitectureConfig, ExperimentConfig, TrainConfig, config_to_dict
    from .synth import default_layout, generate_synthetic_volumes

    manifest = generate_synthetic_volumes(args.out, args.n_cases, args.size, args.modalities,
                                          args.regions, args.seed, args.noise)
    manifest.validate()
    cfg = ExperimentConfig(default_layout(args.modalities, args.regions),
                           ArchitectureConfig(patch_size=16, base_filters=4),
                           TrainConfig(initial_lr=3e-3, max_epoch=20, iterations_per_epoch=20, seed=args.seed))
    (Path(args.out) / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2))
    print(f"wrote {len(manifest)} cases and config.json to {args.out}")
    return EXIT_OK


# -- training / evaluation ---------------------------------------------------------

def _load_dataset(path, assignment=None):
    from .data_io import DatasetManifest

    manifest = DatasetManifest.load(path)
    manifest.validate()
    if assignment is not None:
        missing = {m.name for m in assignment.modalities} - set(manifest.modalities)
        if missing:
            raise ValidationFailed(f"dataset {path} lacks modalities {sorted(missing)}")
        known = {(r.name, r.class_index) for r in manifest.regions}
        wanted = {(r.name, r.class_index) for r in assignment.regions}
        if not wanted <= known:
            raise ValidationFailed(f"dataset regions {sorted(known)} do not include {sorted(wanted - known)}")
    return manifest


def cmd_train(args) -> int:
    from dataclasses import replace

    from .config import load_config
    from .train import fit, init_state, prepare_case

    cfg = load_config(args.config)
    overrides = {}
    if args.epochs is not None:
        overrides["max_epoch"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = replace(cfg, training=replace(cfg.training, **overrides))
    manifest = _load_dataset(args.data, cfg.assignment)
    cases = [prepare_case(s, cfg.assignment) for s in manifest]
    state = init_state(cfg)
    fit(state, cases, args.out)
    print(f"trained {state.epoch_id} epochs; checkpoint {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .blocks import load_checkpoint
    from .metrics import mean_dice, write_reports_csv
    from .train import evaluate, prepare_case

    model, _ = load_checkpoint(args.checkpoint)
    manifest = _load_dataset(args.data, model.config.assignment)
    cases = [prepare_case(s, model.config.assignment) for s in manifest]
    reports = evaluate(model, cases, manifest.spacing)
    out = Path(args.out)
    write_reports_csv(out, reports)
    for region in model.config.assignment.regions:
        rows = [r for r in reports if r.region == region]
        hds = [r.hd95 for r in rows if r.hd95 is not None]
        print(f"{region.name:6s} dice {np.mean([r.dice for r in rows]):.4f} "
              f"hd95 {np.mean(hds) if hds else float('nan'):.3f}")
    print(f"MEAN   dice {mean_dice(reports):.4f}; wrote {out}")
    return EXIT_OK


# -- interpretability -------------------------------------------------------------

def cmd_viz_cam(args) -> int:
    from .blocks import load_checkpoint
    from .cam import (EmptyRegion, UndefinedWeights, region_crop, save_overlays, segmentor_cams, weight_table,
                      write_weights_json)
    from .train import prepare_case

    model, _ = load_checkpoint(args.checkpoint)
    assignment = model.config.assignment
    manifest = _load_dataset(args.data, assignment)
    cases = [prepare_case(s, assignment) for s in manifest]
    if args.case:
        shown = [c for c in cases if c.case_id == args.case]
        if not shown:
            raise ValidationFailed(f"case {args.case} not in {args.data}")
    else:
        shown = cases[:1]
    pairs = [(m.name, r) for m in assignment.modalities for r in assignment.targets(m)]
    if args.segmentor:
        pairs = [p for p in pairs if p[0] == args.segmentor]
    if args.region:
        pairs = [p for p in pairs if p[1].name == args.region]
    if not pairs:
        raise ValidationFailed("no (segmentor, region) pair matches the filters")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables: dict = {}
    patch = model.config.architecture.patch_size
    for seg, region in pairs:
        try:
            tables.setdefault(seg, {})[region.name] = weight_table(model, cases, seg, region)
        except UndefinedWeights as exc:
            log.warning("%s", exc)
        for case in shown:
            try:
                inputs = region_crop(case.volumes, case.mask, region, patch, assignment.nested)
                stacks = segmentor_cams(model, inputs, seg, region)
            except EmptyRegion as exc:
                log.warning("%s", exc)
                continue
            png = out / f"cam_{case.case_id}_{seg}_{region.name}.png"
            save_overlays(png, inputs[seg][0, 0].numpy(), stacks)
    write_weights_json(out / "weights.json", tables, len(cases))
    print(f"wrote heatmaps and weights.json (averaged over {len(cases)} cases) to {out}")
    return EXIT_OK


def cmd_viz_weights(args) -> int:
    from .cam import save_weight_bars

    path = Path(args.weights)
    if not path.is_file():
        raise ValidationFailed(f"weights file not found: {path}")
    data = json.loads(path.read_text())
    tables = data.get("weights")
    if not isinstance(tables, dict):
        raise ValidationFailed(f"{path}: missing 'weights' table")
    flat = {f"{seg}/{region}": w for seg, regions in tables.items() for region, w in regions.items()}
    save_weight_bars(args.out, flat, f"averaged over {data.get('averaged_over_cases', '?')} cases")
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0, or the config's seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ciml", description="Multimodal segmentation with complementary-information filtering.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    oracle = sub.add_parser("oracle", help="exact information-theory checks")
    osub = oracle.add_subparsers(dest="action", parser_class=_Parser)
    ov = osub.add_parser("verify", parents=[common], help="run the discrete oracle checks")
    ov.add_argument("--nets", type=int, default=50)
    ov.add_argument("--bound-nets", type=int, default=20)
    ov.add_argument("--joints", type=int, default=100)
    ov.add_argument("--tol", type=float, default=1e-9)
    ov.set_defaults(func=cmd_oracle_verify)

    demo = sub.add_parser("demo", help="demonstration tasks")
    dsub = demo.add_subparsers(dest="task", parser_class=_Parser)
    ds = dsub.add_parser("shapes", parents=[common], help="triangle/ellipse union task")
    ds.add_argument("--workdir", default="shapes_demo")
    ds.add_argument("--generate", action="store_true")
    ds.add_argument("--train", action="store_true")
    ds.add_argument("--evaluate", action="store_true")
    ds.add_argument("--export-figures", action="store_true")
    ds.add_argument("--n", type=int, default=1000)
    ds.add_argument("--size", type=int, default=64)
    ds.add_argument("--test-fraction", type=float, default=0.1)
    ds.add_argument("--epochs", type=int, default=100)
    ds.add_argument("--iterations", type=int, default=5, help="iterations per epoch")
    ds.add_argument("--batch-size", type=int, default=32)
    ds.add_argument("--lr", type=float, default=3e-3)
    ds.add_argument("--beta", type=float, default=0.5)
    ds.add_argument("--rows", type=int, default=4, help="rows in the exported figure")
    ds.set_defaults(func=cmd_demo_shapes)

    synth = sub.add_parser("synth", help="synthetic multimodal volumes")
    ssub = synth.add_subparsers(dest="action", parser_class=_Parser)
    sg = ssub.add_parser("generate", parents=[common])
    sg.add_argument("--out", required=True)
    sg.add_argument("--n-cases", type=int, default=20)
    sg.add_argument("--size", type=int, default=32)
    sg.add_argument("--modalities", type=int, default=4)
    sg.add_argument("--regions", type=int, default=3)
    sg.add_argument("--noise", type=float, default=0.3)
    sg.set_defaults(func=cmd_synth_generate)

    tr = sub.add_parser("train", parents=[common], help="joint training of all segmentors")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", default="run")
    tr.add_argument("--epochs", type=int, default=None, help="override max_epoch")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="Dice / HD95 per case and region")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", default="metrics.csv")
    ev.set_defaults(func=cmd_eval)

    vc = sub.add_parser("viz-cam", parents=[common], help="Grad-CAM maps and complementary weights")
    vc.add_argument("--checkpoint", required=True)
    vc.add_argument("--data", required=True)
    vc.add_argument("--out", default="cam")
    vc.add_argument("--case", default=None)
    vc.add_argument("--segmentor", default=None)
    vc.add_argument("--region", default=None)
    vc.set_defaults(func=cmd_viz_cam)

    vw = sub.add_parser("viz-weights", parents=[common], help="bar chart of complementary weights")
    vw.add_argument("--weights", required=True)
    vw.add_argument("--out", default="weights.png")
    vw.set_defaults(func=cmd_viz_weights)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("missing subcommand")
    except UsageError as exc:
        print(f"{ERR} usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stdout,
                        format="%(message)s", force=True)
    if args.func is not cmd_train:
        args.seed = 0 if args.seed is None else args.seed
    if args.seed is not None:
        _seed_everything(args.seed)
    from .data_io import DataError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{ERR} usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationFailed, ConfigError, DataError, FileNotFoundError) as exc:
        print(f"{ERR} {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("traceback", exc_info=True)
        print(f"{ERR} {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
