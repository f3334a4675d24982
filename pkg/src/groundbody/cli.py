"""Command-line entry point: ``groundbody <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, report
from .augment import STRATEGIES
from .bayesmix import DEFAULT_DIMS, SearchSpace
from .cloudcore import read_pcd
from .dataset import Manifest
from .errors import StageError
from .nanocnn import CnnModel


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """``key.sub=value`` assignments onto a nested config dict; values parse as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        *parents, leaf = key.split(".")
        node = d
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"cannot set {key!r}: {p!r} is not a mapping")
        node[leaf] = _parse_value(value)
    return d


def load_config(args) -> harness.ExperimentConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    base = apply_overrides(base, args.set)
    for flag, key in (("out", "out_dir"), ("seed", "master_seed"), ("workers", "workers"),
                      ("external_pcd_dir", "external_pcd_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    cfg = harness.ExperimentConfig.from_dict(base)
    if cfg.external_pcd_dir and not Path(cfg.external_pcd_dir).is_dir():
        raise FileNotFoundError(f"external PCD directory {cfg.external_pcd_dir} does not exist")
    return cfg


def _print(obj):
    print(json.dumps(obj, indent=1))


def cmd_synth(args):
    cfg = load_config(args)
    data = harness.make_datasets(cfg)
    out = {k: str(m.root / "manifest.json") for k, m in data.items()}
    if "shifted" in cfg.domains:
        out["shifted"] = str(harness.make_shifted_domain(cfg).root / "manifest.json")
    _print(out)


def cmd_augment(args):
    cfg = load_config(args)
    m = harness.augmented_train_set(cfg, harness.make_datasets(cfg)["train"])
    _print({"manifest": str(m.root / "manifest.json"), "entries": len(m.entries)})


def cmd_train(args):
    cfg = load_config(args)
    data = harness.make_datasets(cfg)
    train_m = harness.augmented_train_set(cfg, data["train"])
    model, history, n = harness.train_model(cfg, harness.featurize(train_m, cfg))
    path = Path(args.model or Path(cfg.out_dir) / "model.bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model.to_bytes(harness.pipeline_header(cfg)))
    _print({"model": str(path), "train_rois": n, "loss_history": [round(v, 6) for v in history]})


def _load_model(path):
    data = Path(path).read_bytes()
    return CnnModel.from_bytes(data), CnnModel.read_header(data).get("hyperparameters", {})


def cmd_eval(args):
    cfg = load_config(args)
    model, _ = _load_model(args.model)
    domains = {}
    if args.manifest:
        domains["manifest"] = Manifest.load(args.manifest)
    else:
        if "clean" in cfg.domains:
            domains["clean"] = harness.make_datasets(cfg)["test"]
        if "shifted" in cfg.domains:
            domains["shifted"] = harness.make_shifted_domain(cfg)
        if cfg.external_pcd_dir:
            domains["external"] = harness.external_manifest(cfg.external_pcd_dir)
    _print({name: harness.evaluate(model, m, cfg).to_json() for name, m in domains.items()})


def cmd_sweep(args):
    cfg = load_config(args)
    counts = [int(c) for c in args.counts.split(",")] if args.counts else harness.DEFAULT_COUNTS
    strategies = [s for s in args.strategies.split(",") if s] if args.strategies is not None else STRATEGIES
    csv_path = Path(args.csv or Path(cfg.out_dir) / "sweep.csv")
    res = harness.run_sweep(cfg, strategies, counts, csv_path)
    fig = report.plot_sweep(res, csv_path.with_suffix(".png"))
    print(csv_path.read_text(), end="")
    print(f"# figure: {fig}", file=sys.stderr)


def cmd_bo(args):
    cfg = load_config(args)
    dims = tuple(args.dims.split(",")) if args.dims else DEFAULT_DIMS
    space = SearchSpace(dims, budget=args.budget, max_count=args.budget)
    csv_path = Path(args.csv or Path(cfg.out_dir) / "bo_history.csv")
    res = harness.run_bo(cfg, space, args.iters, csv_path=csv_path)
    fig = report.plot_bo(res.history, dims, csv_path.with_suffix(".png"))
    print(csv_path.read_text(), end="")
    print(f"# best {dict(zip(dims, res.best_plan))} accuracy {res.best_value:.4f}; figure: {fig}", file=sys.stderr)


def cmd_infer(args):
    model, header = _load_model(args.model)
    cloud = read_pcd(args.pcd)
    hmap, rois, probs = harness.infer_cloud(model, cloud, header)
    if args.dump:
        report.dump_rois(hmap.cells, rois, args.dump, Path(args.pcd).stem, probs)
    _print({
        "pcd": str(args.pcd),
        "casualty": bool(len(probs) and probs.max() >= 0.5),
        "rois": [{**r.to_json(), "p_casualty": round(float(p), 6), "p_non_casualty": round(1 - float(p), 6)}
                 for r, p in zip(rois, probs)],
    })


def cmd_report(args):
    out = {}
    if args.sweep_csv:
        res = harness.SweepResult.read_csv(args.sweep_csv)
        out["sweep"] = str(report.plot_sweep(res, Path(args.sweep_csv).with_suffix(".png")))
    if args.bo_csv:
        dims, hist = report.read_bo_csv(args.bo_csv)
        out["bo"] = str(report.plot_bo(hist, dims, Path(args.bo_csv).with_suffix(".png")))
    _print(out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundbody", description="Heightmap casualty detection experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--out", help=f"output root (default ${harness.OUT_ENV} or ./runs)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--external-pcd-dir", help="labelled real PCDs to evaluate on")
        return sp

    with_config(sub.add_parser("synth", help="generate datasets")).set_defaults(fn=cmd_synth)
    with_config(sub.add_parser("augment", help="apply the augmentation plan")).set_defaults(fn=cmd_augment)
    sp = with_config(sub.add_parser("train", help="train a classifier"))
    sp.add_argument("--model", help="output model path")
    sp.set_defaults(fn=cmd_train)
    sp = with_config(sub.add_parser("eval", help="evaluate a model"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", help="evaluate on this manifest instead of the config domains")
    sp.set_defaults(fn=cmd_eval)
    sp = with_config(sub.add_parser("sweep", help="per-strategy sample-count sweep"))
    sp.add_argument("--strategies", help="comma-separated (empty string = baseline only)")
    sp.add_argument("--counts", help="comma-separated nominal counts")
    sp.add_argument("--csv")
    sp.set_defaults(fn=cmd_sweep)
    sp = with_config(sub.add_parser("bo", help="Bayesian optimisation of the augmentation mix"))
    sp.add_argument("--iters", type=int, default=25)
    sp.add_argument("--dims", help="comma-separated strategies")
    sp.add_argument("--budget", type=int, default=10000)
    sp.add_argument("--csv")
    sp.set_defaults(fn=cmd_bo)
    sp = sub.add_parser("infer", help="classify one PCD")
    sp.add_argument("pcd")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dump", help="directory for heightmap/ROI PGMs")
    sp.set_defaults(fn=cmd_infer)
    sp = sub.add_parser("report", help="render figures from CSV outputs")
    sp.add_argument("--sweep-csv")
    sp.add_argument("--bo-csv")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {StageError(args.command, exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
