"""Command line entry point: ``cfaudit {ingest,match,audit,synth}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import yaml

from . import __version__
from .experiment import ExperimentConfig, derive_seed, histograms, run_ablation
from .ingest import (
    filter_population, load_schema, read_records, records_to_csv, rejects_frame, summarize,
)
from .matching import BinningSpec, balance_report, impute_means, match_exact, proxy_auc
from .synth import GeneratorParams, generate

log = logging.getLogger("cfaudit")

OUT_ENV = "CFAUDIT_OUT"


@dataclass
class RunConfig:
    seed: int = 0
    out: Optional[str] = None
    data: dict = field(default_factory=dict)  # path, schema, year
    binning: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "out"}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def binning_spec(self) -> BinningSpec:
        return BinningSpec.from_dict(self.binning)

    def generator_params(self) -> GeneratorParams:
        g = dict(self.generator)
        g.setdefault("seed", derive_seed(self.seed, "synth"))
        return GeneratorParams.from_dict(g)

    def experiment_config(self, **overrides) -> ExperimentConfig:
        e = {**self.experiment, **{k: v for k, v in overrides.items() if v is not None}}
        e["seed"] = self.seed
        e["binning"] = self.binning_spec
        return ExperimentConfig.from_dict(e)


class Outputs:
    """Writes files into the output directory, each with a provenance header."""

    def __init__(self, out: Path, cfg: RunConfig):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.header = f"cfaudit {__version__} config={cfg.config_hash()} seed={cfg.seed}"
        self.provenance = {"version": __version__, "config_hash": cfg.config_hash(), "seed": cfg.seed}

    def csv(self, name: str, frame=None, text: Optional[str] = None) -> Path:
        if text is None:
            text = frame.to_csv(index=False, lineterminator="\n")
        path = self.out / name
        path.write_text(f"# {self.header}\n{text}", encoding="utf-8")
        return path

    def json(self, name: str, payload) -> Path:
        path = self.out / name
        doc = {"provenance": self.provenance, **payload}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
        return path

    def text(self, name: str, body: str) -> Path:
        path = self.out / name
        path.write_text(f"<!-- {self.header} -->\n{body}", encoding="utf-8")
        return path

    def table(self, name: str, frame, fmt: str) -> Path:
        if fmt == "json":
            return self.json(f"{name}.json", {"rows": frame.to_dict(orient="records")})
        return self.csv(f"{name}.csv", frame)


def _jsonable(o):
    import numpy as np

    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or cfg.out or "."
    cfg.out = str(out)
    return Path(out)


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "input", None):
        cfg.data = {**cfg.data, "path": args.input}
    return cfg


def _read_population(cfg: RunConfig):
    path = cfg.data.get("path")
    if not path:
        return None
    if not Path(path).exists():
        raise FileNotFoundError(f"input file not found: {path}")
    records, _ = read_records(path, load_schema(cfg.data.get("schema")))
    return filter_population(records, year=cfg.data.get("year", 2019))


class CommandError(RuntimeError):
    pass


def cmd_ingest(args) -> int:
    cfg = _load(args)
    path = cfg.data.get("path")
    if not path:
        raise CommandError("no input file: pass --input or set data.path in the config")
    if not Path(path).exists():
        raise FileNotFoundError(f"input file not found: {path}")
    out = Outputs(_out_dir(args, cfg), cfg)
    records, rejects = read_records(path, load_schema(cfg.data.get("schema")))
    filtered = filter_population(records, year=cfg.data.get("year", 2019))
    out.csv("records.csv", text=records_to_csv(filtered))
    out.table("rejects", rejects_frame(rejects), args.format)
    summary = summarize(filtered)
    if args.format == "json":
        out.json("summary.json", {"summary": summary.to_dict(), "unfiltered_count": len(records)})
    else:
        out.csv("summary.csv", summary.to_frame())
    log.info("parsed %d records, rejected %d, kept %d after filtering", len(records), len(rejects), len(filtered))
    return 0


def cmd_match(args) -> int:
    cfg = _load(args)
    records = _read_population(cfg)
    if records is None:
        records = generate(cfg.generator_params())
    out = Outputs(_out_dir(args, cfg), cfg)
    pairs = match_exact(records, cfg.binning_spec, derive_seed(cfg.seed, "match"))
    if len(pairs) == 0:
        raise CommandError("no pairs: no coarsened key holds both a Black and a White application")
    if args.format == "json":
        out.json("pairs.json", pairs.to_json_dict())
    else:
        out.csv("pairs.csv", pairs.pairs)
    out.csv("balance.csv", balance_report(records, pairs))
    holdout = cfg.experiment.get("holdout", 0.25)
    if len(pairs) >= 10:
        value = proxy_auc(pairs, impute_means(pairs, records), holdout, derive_seed(cfg.seed, "proxy"))
    else:
        value = None
    out.json("proxy_auc.json", {"proxy_auc": value, "n_pairs": len(pairs), "holdout": holdout,
                                "n_black": int((records["race"] == "Black").sum()),
                                "unmatched_black": len(pairs.unmatched_black)})
    log.info("matched %d pairs; proxy AUC %s", len(pairs), value)
    return 0


def cmd_audit(args) -> int:
    cfg = _load(args)
    if args.task:
        cfg.experiment = {**cfg.experiment, "task": args.task}
    if args.threads:
        cfg.experiment = {**cfg.experiment, "threads": args.threads}
    if args.keep_going:
        cfg.experiment = {**cfg.experiment, "keep_going": True}
    records = _read_population(cfg)
    if records is None:
        records = generate(cfg.generator_params())
    econf = cfg.experiment_config()
    out = Outputs(_out_dir(args, cfg), cfg)
    run = run_ablation(econf, records)
    report = run.report
    out.csv("report.csv", text=report.to_csv())
    out.text("report.md", report.to_markdown())
    out.csv("histograms.csv", histograms(report, econf.histogram_bin_width))
    out.json("plan.json", json.loads(run.plan.to_json()))
    # the output location is not part of the run, so it stays out of the file body
    config = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    out.json("provenance.json", {"run": report.provenance, "config": config})
    failed = [c for c in report.cells if c.error]
    if failed:
        log.warning("%d cell(s) failed", len(failed))
    return 0


def cmd_synth(args) -> int:
    cfg = _load(args)
    gen = dict(cfg.generator)
    if args.preset:
        gen["preset"] = args.preset
    if args.n is not None:
        gen["n"] = args.n
    cfg.generator = gen
    out = Outputs(_out_dir(args, cfg), cfg)
    records = generate(cfg.generator_params())
    out.csv("synthetic.csv", text=records_to_csv(records))
    log.info("wrote %d synthetic records", len(records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfaudit", description=__doc__)
    p.add_argument("--version", action="version", version=f"cfaudit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt=True):
        sp.add_argument("--config", help="YAML/JSON run configuration file")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, then config 'out', then .)")
        sp.add_argument("--threads", type=int, default=None, help="maximum worker threads")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if fmt:
            sp.add_argument("--format", choices=("csv", "json"), default="csv",
                            help="format of tabular outputs (default csv)")

    sp = sub.add_parser("ingest", help="parse, filter and summarize an application file")
    common(sp)
    sp.add_argument("--input", help="delimited input file (overrides data.path)")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("match", help="coarsened exact matching, balance table and proxy AUC")
    common(sp)
    sp.add_argument("--input", help="records file (overrides data.path); synthetic data when absent")
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("audit", help="run the four-variant ablation and write the report")
    common(sp, fmt=False)
    sp.add_argument("--input", help="records file (overrides data.path); synthetic data when absent")
    sp.add_argument("--task", choices=("approval", "rate"), help="prediction task")
    sp.add_argument("--keep-going", action="store_true", help="record failed cells and continue")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("synth", help="write synthetic applications in the canonical CSV schema")
    common(sp, fmt=False)
    sp.add_argument("--preset", choices=("null", "paper-like"), help="generator preset")
    sp.add_argument("--n", type=int, help="number of applications")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - converted to an error record
        record = {"error": type(e).__name__, "message": str(e), "command": args.command}
        cell = getattr(e, "model", None)
        if cell:
            record["cell"] = {"model": e.model, "variant": e.variant}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
