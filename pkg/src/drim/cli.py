"""Command-line interface: generate cohorts, train, evaluate, robustness grid, stratify, audit."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .encoders import load_checkpoint, save_checkpoint
from .experiments import GRID_COLUMNS, REPORT_COLUMNS, all_subsets, parse_subset, robustness_grid
from .fusion import FUSION_KINDS, audit_tensor_params, mafusion_param_count
from .losses import IntervalGrid
from .metrics import evaluate, km_estimate, logrank_test, risk_stratify
from .model import ModelConfig
from .synth import CohortFormatError, GeneratorConfig, export_cohort, generate, load_cohort, split_indices
from .training import LOG_COLUMNS, NumericalAbort, TrainConfig, build_from_checkpoint, train

log = logging.getLogger("drim")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT = "checkpoint.npz"
FUSIONS = ("mafusion",) + FUSION_KINDS


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion_kinds: list = field(default_factory=lambda: ["mafusion"])
    subsets: list = field(default_factory=list)  # empty: every nonempty subset
    seeds: list = field(default_factory=lambda: [0])
    test_fraction: float = 0.2
    output_dir: str = "runs"

    def validate(self) -> None:
        self.generator.validate()
        self.train.validate()
        bad = [k for k in self.fusion_kinds if k not in FUSIONS]
        if bad:
            raise UsageError(f"unknown fusion kinds {bad}; choose from {list(FUSIONS)}")
        if not 0 < self.test_fraction < 1:
            raise UsageError("test_fraction must lie in (0, 1)")
        for s in self.subsets:
            parse_subset(s, self.generator.n_modalities)

    def to_dict(self) -> dict:
        return asdict(self)


# -- configuration ------------------------------------------------------------------------


def _coerce(text: str):
    return yaml.safe_load(text) if isinstance(text, str) else text


def _set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def _build_section(cls, raw: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown {name} option(s): {', '.join(sorted(unknown))}")
    return cls(**raw)


def load_spec(path: str | None, overrides: dict, args: argparse.Namespace) -> ExperimentSpec:
    raw: dict = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a mapping")
    for key, value in overrides.items():
        _set_dotted(raw, key, value)
    if getattr(args, "seed", None) is not None:
        raw.setdefault("generator", {})["seed"] = args.seed
        raw.setdefault("train", {})["seed"] = args.seed
        raw["seeds"] = [args.seed]
    if getattr(args, "regime", None):
        raw.setdefault("train", {})["regime"] = args.regime
    if getattr(args, "fusion", None):
        raw.setdefault("train", {})["fusion"] = args.fusion
        raw["fusion_kinds"] = [args.fusion]
    if getattr(args, "output_dir", None):
        raw["output_dir"] = args.output_dir

    gen = dict(raw.pop("generator", None) or {})
    tr = dict(raw.pop("train", None) or {})
    if "fusion_kinds" not in raw and "fusion" in tr:
        raw["fusion_kinds"] = [tr["fusion"]]
    try:
        spec = ExperimentSpec(
            generator=_build_section(GeneratorConfig, gen, "generator"),
            train=_build_section(TrainConfig, tr, "train"),
            **_build_section(_TopLevel, raw, "top-level").__dict__,
        )
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return spec


@dataclass
class _TopLevel:
    fusion_kinds: list = field(default_factory=lambda: ["mafusion"])
    subsets: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    test_fraction: float = 0.2
    output_dir: str = "runs"


def _split_overrides(extra: list[str]) -> dict:
    """``--train.epochs 5`` or ``--train.epochs=5`` pairs from the unparsed tail."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognised argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 1
        out[key] = _coerce(value)
        i += 1
    return out


# -- output helpers ----------------------------------------------------------------------


def _write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if _blank(row.get(c)) else _fmt(row.get(c)) for c in columns])
    tmp.replace(path)
    return path


def _blank(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _fresh_dir(path: Path, force: bool, what: str) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{what} {path} already exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _test_indices(meta: dict, cohort) -> np.ndarray:
    ids = np.asarray(meta["test_ids"])
    pos = {pid: i for i, pid in enumerate(cohort.patient_ids.tolist())}
    missing = [p for p in ids.tolist() if p not in pos]
    if missing:
        raise CohortFormatError(meta.get("cohort", "?"), None, f"{len(missing)} test patients missing from cohort")
    return np.array([pos[p] for p in ids.tolist()], dtype=np.intp)


def _load_run(args):
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / CHECKPOINT
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    state, meta = load_checkpoint(ckpt)
    cohort = load_cohort(args.cohort or meta["cohort"])
    model = build_from_checkpoint(ModelConfig.from_dict(meta["model_config"]), state)
    grid = IntervalGrid(**meta["grid"])
    train_idx = np.setdiff1d(np.arange(cohort.n_patients), _test_indices(meta, cohort))
    return ckpt, meta, model, grid, cohort.subset(train_idx), cohort.subset(_test_indices(meta, cohort))


# -- commands ----------------------------------------------------------------------------


def cmd_generate(args, spec: ExperimentSpec) -> int:
    out = _fresh_dir(Path(spec.output_dir), args.force, "cohort directory")
    batch = generate(spec.generator)
    export_cohort(batch, out, with_truth=args.with_truth)
    (out / "generator.yaml").write_text(yaml.safe_dump(asdict(spec.generator), sort_keys=True))
    print(f"wrote cohort of {batch.n_patients} patients x {batch.n_modalities} modalities to {out}")
    return EXIT_OK


def _train_one(cohort_dir: str, out_dir: str, config: dict, test_fraction: float) -> dict:
    cohort = load_cohort(cohort_dir)
    cfg = TrainConfig(**config)
    train_idx, test_idx = split_indices(cohort.event, [1.0 - test_fraction, test_fraction], cfg.seed)
    tr, te = cohort.subset(train_idx), cohort.subset(test_idx)
    result = train(tr, cfg)
    run_id = f"{cfg.regime}-{cfg.fusion}-seed{cfg.seed}"
    out = Path(out_dir) / run_id
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "run_id": run_id,
        "cohort": str(Path(cohort_dir).resolve()),
        "train_config": cfg.to_dict(),
        "model_config": result.model.config.to_dict(),
        "grid": {"n_intervals": result.grid.n_intervals, "t_max": result.grid.t_max},
        "test_ids": cohort.patient_ids[test_idx].tolist(),
        "skipped_batches": result.skipped_batches,
    }
    save_checkpoint(out / CHECKPOINT, result.model.state_dict(), meta)
    _write_csv(out / "epochs.csv", LOG_COLUMNS, result.pretrain_log + result.log)
    metrics = evaluate_on(result.model, result.grid, te)
    row = {"run_id": run_id, "seed": cfg.seed, "subset": "all", **metrics}
    _write_csv(out / "metrics.csv", REPORT_COLUMNS, [row])
    return row


def evaluate_on(model, grid, data) -> dict:
    return evaluate(model.predict(data.features, data.present), data.time, data.event, grid)


def cmd_train(args, spec: ExperimentSpec) -> int:
    if not args.cohort:
        raise UsageError("train needs --cohort")
    load_cohort(args.cohort)  # fail early on malformed files
    out = _fresh_dir(Path(spec.output_dir), args.force, "output directory")
    jobs = []
    for kind in spec.fusion_kinds:
        for seed in spec.seeds:
            cfg = {**spec.train.to_dict(), "fusion": kind, "seed": seed}
            TrainConfig(**cfg).validate()
            jobs.append(cfg)
    args_list = [(args.cohort, str(out), cfg, spec.test_fraction) for cfg in jobs]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_train_one, *zip(*args_list)))
    else:
        rows = [_train_one(*a) for a in args_list]
    _write_csv(out / "metrics.csv", REPORT_COLUMNS, rows)
    for r in rows:
        print(f"{r['run_id']}: C-index {r['cindex']:.3f}  IBS {r['ibs']:.3f}  CS {r['cs']:.3f}")
    return EXIT_OK


def cmd_eval(args, spec: ExperimentSpec) -> int:
    ckpt, meta, model, grid, _, test = _load_run(args)
    row = {"run_id": meta["run_id"], "seed": meta["train_config"]["seed"], "subset": "all",
           **evaluate_on(model, grid, test)}
    out = Path(args.output_dir) if args.output_dir else ckpt.parent
    _write_csv(out / "eval_metrics.csv", REPORT_COLUMNS, [row])
    print(json.dumps({k: row[k] for k in REPORT_COLUMNS}, default=float))
    return EXIT_OK


def cmd_robustness_grid(args, spec: ExperimentSpec) -> int:
    ckpt, meta, model, grid, train_set, test = _load_run(args)
    M = test.n_modalities
    subsets = [parse_subset(s, M) for s in spec.subsets] or all_subsets(M)
    rows = robustness_grid(model, grid, train_set, test, subsets, jobs=max(args.jobs, 1))
    out = Path(args.output_dir) if args.output_dir else ckpt.parent
    path = _write_csv(out / "robustness.csv", GRID_COLUMNS, rows)
    for r in rows:
        cs = "-" if r["cs"] is None else f"{r['cs']:.3f}"
        print(f"{r['subset']:>12}  n={r['n']:<4} train%={r['train_pct']:5.1f}  CS={cs}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_stratify(args, spec: ExperimentSpec) -> int:
    ckpt, meta, model, grid, _, test = _load_run(args)
    hazards = model.predict(test.features, test.present)
    high = risk_stratify(hazards, args.risk)
    rows = []
    for name, grp in (("low", ~high), ("high", high)):
        if not grp.any():
            continue
        km = km_estimate(test.time[grp], test.event[grp])
        rows.append({"time": 0.0, "survival": 1.0, "group": name})
        rows += [{"time": t, "survival": s, "group": name} for t, s in zip(km.times, km.survival)]
    out = Path(args.output_dir) if args.output_dir else ckpt.parent
    _write_csv(out / "km_curves.csv", ("time", "survival", "group"), rows)
    report = {"n_high": int(high.sum()), "n_low": int((~high).sum())}
    if not high.any() or high.all():
        report["error"] = "degenerate split: every patient has the same risk score"
    elif not test.event[high].any() and not test.event[~high].any():
        report["error"] = "no events in either group; log-rank is undefined (use a larger test set)"
    else:
        res = logrank_test(test.time[high], test.event[high], test.time[~high], test.event[~high])
        report.update(chi2=res.chi2, p=res.p)
    (out / "logrank.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return EXIT_OK if "error" not in report else EXIT_DATA


def audit_rows(config: ModelConfig) -> list[dict]:
    """Parameter counts for the configured model plus the reference tensor-fusion audits."""
    from .model import build_model

    model = build_model(config, np.random.default_rng(0))
    rows = [{"item": f"model.{k}", "count": v, "reference": ""} for k, v in model.parameter_report().items()]
    rows.append({"item": "tensor_fusion(M=4,d=128,out=128)", "count": audit_tensor_params(4, 128, 128),
                 "reference": "approaching 34,500 million"})
    rows.append({"item": "tensor_fusion(M=4,d=32,out=32)", "count": audit_tensor_params(4, 32, 32),
                 "reference": "about 38 million"})
    c = config
    for M in (4, 5):
        rows.append({"item": f"mafusion_block(slots={M},d={c.d})",
                     "count": mafusion_param_count(c.d, M, c.heads, c.head_dim, c.slot_embeddings),
                     "reference": ""})
    return rows


def cmd_audit_params(args, spec: ExperimentSpec) -> int:
    cfg = spec.train.model_config(spec.generator.feature_dims, decoders=spec.train.regime == "unsup")
    rows = audit_rows(cfg)
    for r in rows:
        ref = f"  ({r['reference']})" if r["reference"] else ""
        print(f"{r['item']:<40} {r['count']:>18,}{ref}")
    if args.output_dir:
        _write_csv(Path(args.output_dir) / "audit.csv", ("item", "count", "reference"), rows)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "robustness-grid": cmd_robustness_grid,
    "stratify": cmd_stratify,
    "audit-params": cmd_audit_params,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML file with generator/train/experiment sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--jobs", type=int, default=1)
        return sp

    g = common(sub.add_parser("generate", help="write a synthetic cohort directory"))
    g.add_argument("--with-truth", action="store_true")

    t = common(sub.add_parser("train", help="train one run per fusion kind and seed"))
    t.add_argument("--cohort")
    t.add_argument("--regime", choices=("surv", "unsup"))
    t.add_argument("--fusion", choices=FUSIONS)

    for name in ("eval", "robustness-grid", "stratify"):
        sp = common(sub.add_parser(name))
        sp.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
        sp.add_argument("--cohort", help="defaults to the cohort recorded in the checkpoint")
        if name == "stratify":
            sp.add_argument("--risk", choices=("sum", "one_minus_survival"), default="sum")

    a = common(sub.add_parser("audit-params", help="exact parameter counts"))
    a.add_argument("--regime", choices=("surv", "unsup"))
    a.add_argument("--fusion", choices=FUSIONS)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        spec = load_spec(args.config, _split_overrides(extra), args)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return COMMANDS[args.command](args, spec)
    except UsageError as exc:
        print(f"drim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CohortFormatError, FileNotFoundError, KeyError) as exc:
        print(f"drim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"drim: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
