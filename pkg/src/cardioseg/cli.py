"""Command-line front door: synth, train, eval, crossval, sweep, probe, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import SweepSpec, probe_l1, report, sweep_lambda
from .config import dump_config, load_config, set_dotted
from .data import Manifest, build_disease_datasets
from .metrics import cross_validate
from .synth import synth_generate
from .training import ARMS, TrainConfig, parse_arm, run_matrix

log = logging.getLogger("cardioseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args):
    cfg = load_config(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k, _parse_value(v))
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "paper_literal_center_range", False):
        cfg["mask"]["paper_literal_center_range"] = True
    return cfg


def _train_cfg(cfg):
    tc = TrainConfig.from_dict(cfg)
    if cfg["data"].get("target_size"):
        tc.model.input_size = tuple(cfg["data"]["target_size"])
    return tc


def _manifest(path, cfg_value, what):
    path = path or cfg_value
    if not path:
        raise UsageError(f"no {what} manifest given (flag or config data.{what}_manifest)")
    return Manifest.load(path)


def _arms(values, cfg):
    if not values:
        return [(str(cfg["train"]["strategy"]).upper(), bool(cfg["train"]["key"]))]
    arms = []
    for v in values:
        for tag in v.split(","):
            arms.extend(ARMS if tag == "all" else [parse_arm(tag)])
    return list(dict.fromkeys(arms))


def cmd_synth(args):
    cfg = _config(args)
    seed = cfg["train"]["seed"] if args.seed is None else args.seed
    manifests = synth_generate(cfg["data"]["synth"], seed, args.out)
    for split, m in manifests.items():
        print(f"{split}: {len(m.cases)} cases -> {Path(args.out) / f'{split}_manifest.json'}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    tc = _train_cfg(cfg)
    manifest = _manifest(args.train_manifest, cfg["data"].get("train_manifest"), "train")
    datasets = build_disease_datasets(manifest, *tc.model.input_size, normalize=cfg["data"]["normalize"])
    runs = args.runs if args.runs is not None else tc.runs
    arms = _arms(args.arm, cfg)
    out = Path(args.out)
    dump_config(cfg, out / "config.json")
    index = run_matrix(datasets, tc, arms, runs, out, dataset_name=manifest.dataset_name)
    failed = [r for r in index["runs"] if r["status"] != "complete"]
    print(f"run set {out}: {len(index['runs'])} runs, {len(failed)} failed, status {index['status']}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _eval(args, suffix):
    cfg = _config(args)
    manifest = _manifest(args.test_manifest, cfg["data"].get("test_manifest"), "test")
    table = cross_validate(args.runset, manifest, normalize=cfg["data"]["normalize"])
    out = Path(args.out) if args.out else Path(args.runset) / "eval" / f"{manifest.dataset_name}{suffix}"
    paths = table.save(out)
    for f in table.failures:
        log.error("run %s seed %s failed: %s", f["arm"], f["seed"], f["error"])
    print(f"wrote {paths['table']} ({len(table.case_rows)} case rows, {len(table.failures)} failures)")
    return EXIT_RUNTIME if table.failures else EXIT_OK


def cmd_eval(args):
    return _eval(args, "")


def cmd_crossval(args):
    return _eval(args, "-cross")


def cmd_sweep(args):
    cfg = _config(args)
    sw = dict(cfg["sweep"])
    if args.kind:
        sw["kind"] = args.kind
    if args.lambdas:
        sw["lambdas"] = [float(x) for x in args.lambdas.split(",")]
    if args.arm:
        sw["arm"] = args.arm
    if args.runs is not None:
        sw["runs"] = args.runs
    spec = SweepSpec(sw["kind"], list(sw["lambdas"]), sw["arm"], int(sw["runs"]))
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tc = _train_cfg(cfg)
    train_m = _manifest(args.train_manifest, cfg["data"].get("train_manifest"), "train")
    test_m = _manifest(args.test_manifest, cfg["data"].get("test_manifest"), "test")
    datasets = build_disease_datasets(train_m, *tc.model.input_size, normalize=cfg["data"]["normalize"])
    path, rows, n_models = sweep_lambda(spec, tc, datasets, test_m, args.out, normalize=cfg["data"]["normalize"])
    print(f"wrote {path} ({len(rows)} lambda rows, {n_models} models trained)")
    return EXIT_OK


def cmd_probe(args):
    _, _, summary = probe_l1(args.runset, args.out)
    for s in summary:
        print(
            f"{s['strategy']}: final L1 ITD {s['itd_final_mean']:.2f} vs CTD {s['ctd_final_mean']:.2f} "
            f"({s['pairs_itd_greater']}/{s['n_pairs']} seed pairs ITD > CTD)"
        )
    return EXIT_OK


def cmd_report(args):
    manifest = report(args.runset, args.out)
    state = "partial" if manifest["partial"] else "complete"
    print(f"report ({state}) written to {args.out}")
    return EXIT_OK


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config with data/model/train/mask/optim/eval sections")
    common.add_argument("--seed", type=int, help="base seed; overrides train.seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cardioseg", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic phantom train/test sets")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train one or more arms into a run set")
    s.add_argument("--train-manifest")
    s.add_argument("--arm", action="append", help="nts+ctd, nts+itd, mts+ctd, mts+itd or 'all' (repeatable)")
    s.add_argument("--runs", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--paper-literal-center-range", action="store_true",
                   help="sample box centers from the literal (narrower) range instead of the containment range")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "evaluate every run of a run set on a test manifest"),
        ("crossval", cmd_crossval, "evaluate a run set on another dataset without retraining"),
    ):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--runset", required=True)
        s.add_argument("--test-manifest")
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("sweep", parents=[common], help="mask lambda sweep")
    s.add_argument("--train-manifest")
    s.add_argument("--test-manifest")
    s.add_argument("--kind", choices=["ideal", "gaussian"])
    s.add_argument("--lambdas", help="comma separated, strictly increasing, each in (0, 1)")
    s.add_argument("--arm")
    s.add_argument("--runs", type=int)
    s.add_argument("--paper-literal-center-range", action="store_true",
                   help="sample box centers from the literal (narrower) range instead of the containment range")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("probe", parents=[common], help="per-epoch L1 norm curves and ITD/CTD summary")
    s.add_argument("--runset", required=True, action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("report", parents=[common], help="comparison tables, box-plot data and L1 curves")
    s.add_argument("--runset", required=True, action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cardioseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
