"""``spcl`` command line: gen, pretrain, run, ablate, gradcheck.

Exit codes: 0 success, 1 config error, 2 runtime error, 3 oracle failure.
"""

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gradcheck, harness
from .checkpoint import load_checkpoint, save_checkpoint
from .data import export_universe, load_universe, make_synthetic_universe
from .errors import ArgumentError, ConfigError, SparseCLError
from .harness import FrozenBaseline

log = logging.getLogger("sparsecl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORACLE = 0, 1, 2, 3


# ------------------------------------------------------------------ helpers

def _load_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig().validate()
    if getattr(args, "baseline", None):
        cfg = cfg.replace(run={"baseline": args.baseline})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(run={"seeds": [args.seed]})
    return cfg


def _universe(cfg, universe_dir):
    if universe_dir:
        return load_universe(universe_dir)
    return make_synthetic_universe(cfg.data)


def _dumps(rec):
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


class JsonlWriter:
    """Append-only JSONL file, flushed per record."""

    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, rec):
        self.fh.write(_dumps(rec) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _frozen_from_meta(meta):
    f = meta["frozen"]
    return FrozenBaseline(f["h0"], f["task_acc"], f["final_acc"])


# ------------------------------------------------------------------ commands

def cmd_gen(cfg, out_dir):
    manifest = export_universe(make_synthetic_universe(cfg.data), out_dir)
    print(f"wrote {len(manifest['splits'])} splits to {out_dir}")
    return EXIT_OK


def cmd_pretrain(cfg, universe_dir, out_dir):
    universe = _universe(cfg, universe_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.run.seeds:
        model, frozen = harness.foundation_model(universe, cfg, seed)
        meta = {"seed": int(seed), "frozen": frozen.to_dict(), "config_hash": cfg.config_hash()}
        save_checkpoint(out / f"pretrained-s{seed}.spcl", model, meta=meta)
        (out / f"frozen-s{seed}.json").write_text(
            _dumps({"record": "frozen", "seed": int(seed), **frozen.to_dict()}) + "\n")
        print(f"seed {seed}: h0={frozen.h0:.4f} frozen task acc "
              + " ".join(f"{a:.3f}" for a in frozen.task_acc))
    return EXIT_OK


def _final_state(buffer, mas):
    extra = {}
    if mas is not None:
        extra["mas.omega"] = mas.omega
        extra["mas.anchor"] = mas.anchor
    if buffer is not None:
        extra.update(buffer.state_arrays())
    return extra


def run_one(cfg, universe, seed, out_dir, pretrained=None):
    """One seed of ``cmd_run``: metrics JSONL plus final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    masks = {}

    def keep_mask(t, mask):
        masks[f"mask.task{t}"] = mask.indices

    writer = JsonlWriter(out / f"metrics-s{seed}.jsonl")
    try:
        report, model, buffer, mas = harness.run_sequence(
            cfg, universe, seed, pretrained=pretrained, on_record=writer, on_mask=keep_mask)
    finally:
        writer.close()
    extra = {**masks, **_final_state(buffer, mas)}
    meta = {"seed": int(seed), "baseline": cfg.baseline_tag, "config_hash": cfg.config_hash(),
            "summary": report.summary()}
    save_checkpoint(out / f"final-s{seed}.spcl", model, extra=extra, meta=meta)
    return report


def cmd_run(cfg, universe_dir, out_dir, pretrained_path=None):
    universe = _universe(cfg, universe_dir)
    pretrained = None
    seeds = cfg.run.seeds
    if pretrained_path:
        model, _, meta = load_checkpoint(pretrained_path)
        pretrained = (model, _frozen_from_meta(meta))
        if len(seeds) != 1:
            seeds = [int(meta["seed"])]
    reports = []
    for seed in seeds:
        rep = run_one(cfg, universe, seed, out_dir, pretrained)
        reports.append(rep)
        s = rep.summary()
        print(f"seed {seed} [{cfg.baseline_tag}] avg_acc={s['avg_acc']:.4f} "
              f"forgetting={s['forgetting']:.4f} holdout={s['holdout_final']:.4f} "
              f"holdout_impr={s['holdout_impr']:+.4f}")
    agg = harness.aggregate(reports, cfg)
    (Path(out_dir) / "aggregate.json").write_text(_dumps(agg) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ ablation

def _layer_variants(cfg):
    s = cfg.selection.rate
    # Both localizes twice as many parameters; halve s to keep the budget equal
    return [("first", {"selection": {"mode": "first"}}),
            ("second", {"selection": {"mode": "second"}}),
            ("both", {"selection": {"mode": "both", "rate": s / 2}})]


AXES = {
    "mode": lambda v: {"selection": {"mode": v}},
    "rate": lambda v: {"selection": {"rate": float(v)}},
    "strategy": lambda v: {"selection": {"strategy": v}},
    "buffer": lambda v: {"replay": {"capacity_fraction": float(v)}},
    "conditional": lambda v: {"mas": {"conditional_priming": bool(v)}},
}

PRESETS = {
    "layer": _layer_variants,
    "rate": lambda cfg: [(f"{v:g}", AXES["rate"](v)) for v in (0.01, 0.10, 0.50)],
    "strategy": lambda cfg: [(v, AXES["strategy"](v)) for v in ("weight", "neuron", "random")],
    "buffer": lambda cfg: [(f"{v:g}", AXES["buffer"](v)) for v in (0.01, 0.02, 0.04)],
    "conditional": lambda cfg: [("on", AXES["conditional"](True)),
                                ("off", AXES["conditional"](False))],
}


def _merge(*overrides):
    out = {}
    for o in overrides:
        for sec, vals in o.items():
            out.setdefault(sec, {}).update(vals)
    return out


def grid_variants(grid):
    """Cross product of ``{axis: [values]}`` as ``(label, overrides)`` pairs."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ArgumentError("ablation grid is empty")
    for axis in grid:
        if axis not in AXES:
            raise ConfigError(f"grid.{axis}", f"unknown axis; expected one of {sorted(AXES)}")
    axes = sorted(grid)
    out = []
    for combo in itertools.product(*(grid[a] for a in axes)):
        label = ",".join(f"{a}={v}" for a, v in zip(axes, combo))
        out.append((label, _merge(*(AXES[a](v) for a, v in zip(axes, combo)))))
    return out


def _ablate_job(job):
    cfg_dict, universe_dir, seed, out_dir = job
    cfg = config_mod.from_dict(cfg_dict)
    universe = _universe(cfg, universe_dir)
    rep = run_one(cfg, universe, seed, out_dir)
    return rep.summary()


AGG_COLUMNS = ("axis", "label", "baseline", "config_hash", "seeds", "avg_acc", "avg_acc_std",
               "forgetting", "forgetting_std", "holdout_final", "holdout_final_std",
               "acc_impr", "acc_impr_std", "holdout_impr", "holdout_impr_std")


def _aggregate_row(axis, label, cfg, summaries):
    row = {"axis": axis, "label": label, "baseline": cfg.baseline_tag,
           "config_hash": cfg.config_hash(), "seeds": list(cfg.run.seeds)}
    for k in harness._AGG_KEYS:
        vals = [s[k] for s in summaries]
        if any(v is None for v in vals):
            row[k] = row[k + "_std"] = None
        else:
            row[k] = float(np.mean(vals))
            row[k + "_std"] = float(np.std(vals))
    return row


def cmd_ablate(cfg, out_dir, axes=None, grid=None, universe_dir=None, workers=1):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = {}
    if grid is not None:
        tables["grid"] = grid_variants(grid)
    for axis in axes or ():
        if axis not in PRESETS:
            raise ConfigError("axis", f"unknown preset {axis!r}; expected one of {sorted(PRESETS)}")
        tables[axis] = PRESETS[axis](cfg)
    if not tables:
        raise ArgumentError("ablation grid is empty")

    jobs, keys, cfgs = [], [], {}
    for axis, variants in tables.items():
        for label, overrides in variants:
            vcfg = cfg.replace(**overrides)
            cfgs[(axis, label)] = vcfg
            for seed in vcfg.run.seeds:
                run_dir = out / "runs" / axis / label.replace(",", "_").replace("=", "-")
                jobs.append((vcfg.to_dict(), universe_dir, seed, str(run_dir)))
                keys.append((axis, label))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_job, jobs))
    else:
        results = [_ablate_job(j) for j in jobs]

    by_variant = {}
    for key, summary in zip(keys, results):
        by_variant.setdefault(key, []).append(summary)
    for axis, variants in tables.items():
        rows = [_aggregate_row(axis, label, cfgs[(axis, label)], by_variant[(axis, label)])
                for label, _ in variants]
        with open(out / f"ablate-{axis}.jsonl", "w") as fh:
            for r in rows:
                fh.write(_dumps({"record": "ablation", **r}) + "\n")
        with open(out / f"ablate-{axis}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=AGG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({**r, "seeds": " ".join(str(s) for s in r["seeds"])})
        for r in rows:
            print(f"{axis:12s} {r['label']:24s} avg_acc={r['avg_acc']:.4f} "
                  f"forgetting={r['forgetting']:.4f} holdout_impr={r['holdout_impr']:+.4f}")
    return EXIT_OK


def cmd_gradcheck(seed=0):
    results, elapsed = gradcheck.run_all(seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} oracles passed in {elapsed:.2f}s")
    return EXIT_ORACLE if failed else EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser():
    p = argparse.ArgumentParser(prog="spcl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override run.seeds (and data seed for gen)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen", help="write a synthetic universe as CSV + manifest")
    common(sp)
    sp = sub.add_parser("pretrain", help="pretrain and record the frozen baseline")
    common(sp)
    sp.add_argument("--universe", help="universe directory (default: generate from config)")
    sp = sub.add_parser("run", help="learn the class-incremental stream")
    common(sp)
    sp.add_argument("--universe")
    sp.add_argument("--pretrained", help="checkpoint written by 'pretrain'")
    sp.add_argument("--baseline", choices=sorted(config_mod.BASELINES))
    sp = sub.add_parser("ablate", help="run ablation presets or a grid")
    common(sp)
    sp.add_argument("--universe")
    sp.add_argument("--baseline", choices=sorted(config_mod.BASELINES))
    sp.add_argument("--axis", action="append", choices=sorted(PRESETS),
                    help="preset table (repeatable; default: all presets unless --grid)")
    sp.add_argument("--grid", help="TOML file with a [grid] table of axis = [values]")
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("gradcheck", help="run the self-verification oracles")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _read_grid(path):
    with open(path, "rb") as fh:
        try:
            d = config_mod.tomllib.load(fh)
        except config_mod.tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"TOML syntax error: {exc}") from None
    unknown = set(d) - {"grid"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    grid = d.get("grid", {})
    for k, v in grid.items():
        if not isinstance(v, list):
            raise ConfigError(f"grid.{k}", "expected a list of values")
    return grid


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed)
        cfg = _load_config(args)
        if args.command == "gen":
            if args.seed is not None:
                cfg = cfg.replace(data={"seed": args.seed})
            return cmd_gen(cfg, args.out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.universe, args.out)
        if args.command == "run":
            return cmd_run(cfg, args.universe, args.out, args.pretrained)
        if args.command == "ablate":
            grid = _read_grid(args.grid) if args.grid else None
            axes = args.axis if args.axis or grid is not None else sorted(PRESETS)
            return cmd_ablate(cfg, args.out, axes, grid, args.universe, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArgumentError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SparseCLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
