"""Command-line pipelines: simulate, train, generate, evaluate, privacy, utility, report and rerun.

Every command writes its outputs plus a ``manifest.json`` (arguments, resolved
config and its hash, seed, input and output hashes) into ``--out``. ``rerun``
replays a manifest into a new directory. Outputs are staged in a temporary
directory and only moved into place when the command succeeds.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import time
import traceback
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__

log = logging.getLogger("replaygan")

MANIFEST = "manifest.json"


class CLIError(Exception):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def load_yaml(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise CLIError(f"{path}: config must be a mapping")
    return data


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (tuple, set)):
        return list(x)
    return str(x)


def _csv(df: pd.DataFrame, path: Path, index: bool = False) -> None:
    df.to_csv(path, index=index, lineterminator="\n", float_format="%.10g")


def _schema():
    from .schema import hiv_schema

    return hiv_schema()


def _read_cohort(path: str):
    from .schema import Cohort

    return Cohort.read_csv(path, _schema())


# ---------------------------------------------------------------------------
# commands; each writes into ``out`` and returns (resolved config, input paths)


def cmd_simulate(args, out: Path):
    from .cohortsim import SimConfig, sample_cohort

    cfg = SimConfig.from_dict(load_yaml(args.config))
    if args.n_patients is not None:
        cfg.n_patients = args.n_patients
    cfg.seed = args.seed
    cohort = sample_cohort(cfg)
    cohort.to_csv(out / "cohort.csv")
    return cfg.to_dict(), []


def cmd_train(args, out: Path):
    import torch

    from .trainer import TrainConfig, save_checkpoint, train

    raw = load_yaml(args.config)
    for key in ("variant", "epochs", "batch_size"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    raw["seed"] = args.seed
    cfg = TrainConfig.from_dict(raw)
    torch.set_num_threads(args.threads)
    cohort = _read_cohort(args.data)
    t0 = time.perf_counter()
    bundle, buffer, trace = train(cfg, cohort)
    save_checkpoint(out / "checkpoint.pt", bundle, buffer)
    trace.to_csv(out / "trace.csv")
    (out / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - t0}) + "\n")
    _write_json(out / "summary.json", {"variant": cfg.variant, "final_l_corr": trace.final_l_corr(),
                                       "parameter_hash": bundle.parameter_hash(), "updates": len(trace)})
    return {**cfg.to_dict(), "threads": args.threads}, [args.data]


def cmd_generate(args, out: Path):
    from .schema import check_record
    from .trainer import generate_cohort, load_checkpoint

    bundle, buffer = load_checkpoint(args.checkpoint, _schema())
    syn = generate_cohort(bundle, buffer, args.n_patients, args.months, seed=args.seed)
    for rec in syn:
        problems = check_record(rec, syn.schema, strict_length=False)
        if problems:
            raise CLIError(f"generated record fails validation: {problems[:3]}")
    syn.to_csv(out / "synthetic.csv")
    return {"n_patients": args.n_patients, "months": args.months, "seed": args.seed}, [args.checkpoint]


def cmd_evaluate(args, out: Path):
    from .correlations import correlation_report
    from .fidelity import coverage_detail, log_cluster, run_test_table
    from . import plots

    real, syn = _read_cohort(args.real), _read_cohort(args.syn)
    cov = coverage_detail(real, syn)
    lc = log_cluster(real, syn, gamma=args.clusters, repeats=args.repeats, sample_n=args.sample_n, seed=args.seed)
    table = run_test_table(real, syn, iters=args.iters, batch=args.batch, seed=args.seed)
    cr_real, cr_syn = correlation_report(real), correlation_report(syn)

    _csv(pd.DataFrame({"variable": list(cov.per_variable), "coverage": list(cov.per_variable.values())}),
         out / "coverage.csv")
    _csv(pd.DataFrame({"repeat": np.arange(len(lc.U)), "U": lc.U}), out / "log_cluster.csv")
    _csv(table.to_frame().reset_index(), out / "test_table.csv")
    names = real.schema.names
    for tag, cr in (("real", cr_real), ("syn", cr_syn)):
        for kind in ("static", "trend", "cycle"):
            _csv(pd.DataFrame(getattr(cr, kind), index=names, columns=names), out / f"corr_{kind}_{tag}.csv",
                 index=True)
    _write_json(out / "eval.json", {
        "cat": cov.cat, "log_cluster_mean": lc.mean, "log_cluster_std": lc.std,
        "empty_clusters": lc.empty_clusters, "excluded_variables": cov.excluded,
        "n_real": len(real), "n_syn": len(syn),
    })
    if not args.no_plots:
        plots.distribution_plots(real, syn, out)
        plots.correlation_plots(cr_real, cr_syn, out)
    return {k: getattr(args, k) for k in ("clusters", "repeats", "sample_n", "iters", "batch", "seed")}, \
        [args.real, args.syn]


def cmd_privacy(args, out: Path):
    from .privacy import privacy_audit

    real, syn = _read_cohort(args.real), _read_cohort(args.syn)
    res = privacy_audit(real, syn)
    d = res.to_dict()
    _csv(pd.DataFrame([{"class": " | ".join(c["class"]), "F_s": c["F_s"], "in_both": c["in_both"]}
                       for c in d.pop("classes")]), out / "classes.csv")
    _csv(pd.DataFrame([d]), out / "risk.csv")
    _write_json(out / "risk.json", d)
    return {"quasi_identifiers": list(real.schema.quasi_identifiers)}, [args.real, args.syn]


def cmd_utility(args, out: Path):
    from .utility_rl import RLSpec, utility_comparison
    from . import plots

    spec = RLSpec(**load_yaml(args.config))
    if args.subgroup:
        key, _, level = args.subgroup.partition("=")
        spec.subgroup = {key: level}
    real, syn = _read_cohort(args.real), _read_cohort(args.syn)
    res = utility_comparison(real, syn, spec, seed=args.seed)
    rows, cols = (real.schema[v].levels for v in spec.action_vars)
    for tag, m in (("real", res.map_real), ("syn", res.map_syn)):
        _csv(pd.DataFrame(m, index=pd.Index(rows, name=spec.action_vars[0]), columns=cols),
             out / f"heatmap_{tag}.csv", index=True)
    summary = {"tv": res.tv, "top1_agree": res.top1_agree, "n_states": res.n_states, "used_pca": res.used_pca,
               "fallback_states_real": res.fallback_real, "fallback_states_syn": res.fallback_syn}
    _csv(pd.DataFrame([summary]), out / "utility.csv")
    _write_json(out / "utility.json", summary)
    if not args.no_plots:
        plots.action_heatmaps(res.map_real, res.map_syn, rows, cols, spec.action_vars, out)
    return {**spec.to_dict(), "seed": args.seed}, [args.real, args.syn]


def cmd_report(args, out: Path):
    lines = ["# Evaluation report", ""]
    rows = []
    for d in map(Path, args.runs):
        man = json.loads((d / MANIFEST).read_text())
        lines += [f"## {man['command']}: `{d}`", "", f"- seed: {man['seed']}", f"- config hash: `{man['config_hash'][:16]}`"]
        for name in ("summary.json", "eval.json", "risk.json", "utility.json"):
            p = d / name
            if p.exists():
                data = json.loads(p.read_text())
                for k, v in data.items():
                    if isinstance(v, (int, float, str, bool)) or v is None:
                        lines.append(f"- {k}: {v}")
                        rows.append({"run": str(d), "command": man["command"], "metric": k, "value": v})
        tt = d / "test_table.csv"
        if tt.exists():
            lines += ["", "| " + " | ".join(pd.read_csv(tt).columns) + " |"]
            lines.append("|" + "---|" * len(pd.read_csv(tt).columns))
            for r in pd.read_csv(tt).itertuples(index=False):
                lines.append("| " + " | ".join("" if pd.isna(x) else str(x) for x in r) + " |")
        for png in sorted(d.glob("*.png")):
            lines.append(f"\n![{png.stem}]({png.resolve()})")
        lines.append("")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _csv(pd.DataFrame(rows, columns=["run", "command", "metric", "value"]), out / "metrics.csv")
    return {"runs": [str(Path(r).resolve()) for r in args.runs]}, [str(Path(r) / MANIFEST) for r in args.runs]


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "privacy": cmd_privacy,
    "utility": cmd_utility,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        self.print_usage(sys.stderr)
        sys.exit(2)


def _emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="replaygan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML file with command parameters")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = common(sub.add_parser("simulate", help="sample a surrogate cohort"))
    sp.add_argument("--n-patients", type=int)

    sp = common(sub.add_parser("train", help="train a generator"))
    sp.add_argument("--data", required=True, help="cohort CSV")
    sp.add_argument("--variant")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--threads", type=int, default=1, help="torch intra-op threads (fixed for reproducibility)")

    sp = common(sub.add_parser("generate", help="sample synthetic records from a checkpoint"), config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-patients", type=int, default=1000)
    sp.add_argument("--months", type=int, default=60)

    sp = common(sub.add_parser("evaluate", help="fidelity metrics and plots"), config=False)
    sp.add_argument("--real", required=True)
    sp.add_argument("--syn", required=True)
    sp.add_argument("--clusters", type=int, default=20)
    sp.add_argument("--repeats", type=int, default=20)
    sp.add_argument("--sample-n", type=int, default=100_000)
    sp.add_argument("--iters", type=int, default=100)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--no-plots", action="store_true")

    sp = common(sub.add_parser("privacy", help="distance and disclosure-risk audit"), config=False)
    sp.add_argument("--real", required=True)
    sp.add_argument("--syn", required=True)

    sp = common(sub.add_parser("utility", help="offline RL utility comparison"))
    sp.add_argument("--real", required=True)
    sp.add_argument("--syn", required=True)
    sp.add_argument("--subgroup", help="filter such as Ethnic=African")
    sp.add_argument("--no-plots", action="store_true")

    sp = common(sub.add_parser("report", help="aggregate run directories into report.md"), config=False)
    sp.add_argument("runs", nargs="+", help="run directories containing manifest.json")

    sp = sub.add_parser("rerun", help="replay a manifest into a new directory")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    return p


def _absolutize(args: argparse.Namespace) -> None:
    for key in ("config", "data", "checkpoint", "real", "syn"):
        val = getattr(args, key, None)
        if val:
            setattr(args, key, str(Path(val).resolve()))
    if getattr(args, "runs", None):
        args.runs = [str(Path(r).resolve()) for r in args.runs]


def execute(args: argparse.Namespace) -> Path:
    """Run one command, staging outputs so a failure leaves nothing behind."""
    _absolutize(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        config, inputs = COMMANDS[args.command](args, stage)
        arg_dict = {k: v for k, v in vars(args).items() if k not in ("out", "verbose")}
        manifest = {
            "tool": "replaygan",
            "version": __version__,
            "command": args.command,
            "args": arg_dict,
            "seed": args.seed,
            "config": config,
            "config_hash": config_hash(config),
            "inputs": {str(p): sha256_file(Path(p)) for p in inputs},
            "outputs": {p.name: sha256_file(p) for p in sorted(stage.iterdir()) if p.is_file()},
        }
        _write_json(stage / MANIFEST, manifest)
        out.mkdir(parents=True, exist_ok=True)
        for p in sorted(stage.iterdir()):
            shutil.move(str(p), out / p.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return out


def rerun(manifest_path: str, out: str) -> Path:
    man = json.loads(Path(manifest_path).read_text())
    if man.get("command") not in COMMANDS:
        raise CLIError(f"{manifest_path}: unknown command {man.get('command')!r}")
    for p, digest in man.get("inputs", {}).items():
        if not Path(p).exists():
            raise CLIError(f"input {p} is missing")
        if sha256_file(Path(p)) != digest:
            raise CLIError(f"input {p} changed since the manifest was written")
    ns = argparse.Namespace(**man["args"], out=out, verbose=False)
    return execute(ns)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "rerun":
            out = rerun(args.manifest, args.out)
        else:
            out = execute(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        _emit_error(type(exc).__name__, str(exc), command=args.command,
                    trace=traceback.format_exc(limit=3).splitlines()[-3:])
        return 1
    print(json.dumps({"ok": True, "command": args.command, "out": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
