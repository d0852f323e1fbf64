"""``medfuse`` command line: fit, simulate and report."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import inference, simlab
from .core import ExternalSummary, InternalDataset, Method, validate, with_intercept
from .errors import (
    ConfigError,
    MedfuseError,
    NoConvergence,
    ParseError,
    SchemaMismatch,
)
from .estimators import HardConfig, SoftConfig, fit, fit_unconstrained

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4
SUMMARY_COLUMNS = ("scenario_id", "method", "effect", "truth", "mean_est", "rmse",
                   "rel_rmse_vs_unconstrained", "coverage", "mean_ci_length",
                   "n_replicates", "n_failed")
SCHEMA_VERSION = 1


def tool_version() -> str:
    try:
        return metadata.version("medfuse")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "0+unknown"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    tool_version: str
    config_hash: str
    seed: int | None
    started: str
    finished: str = ""
    input_digests: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# ----------------------------------------------------------------------------- ingestion

def read_table(path, columns: list[str]) -> dict[str, np.ndarray]:
    """Read the named numeric columns of a headed CSV file.

    Blank cells and non-numeric values raise :class:`ParseError` naming the
    offending data row (1-based, header excluded) and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise ParseError(f"{path}: columns not found in header: {', '.join(missing)}")
        idx = {c: header.index(c) for c in columns}
        rows, blanks = [], []
        for lineno, rec in enumerate(reader, start=1):
            if not rec or all(not v.strip() for v in rec):
                continue
            vals = []
            for c in columns:
                j = idx[c]
                cell = rec[j].strip() if j < len(rec) else ""
                if cell == "":
                    blanks.append(lineno)
                    break
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: row {lineno}, column {c!r}: "
                                     f"cannot parse {cell!r} as a number") from None
            else:
                rows.append(vals)
        if blanks:
            shown = ", ".join(map(str, blanks[:20]))
            raise ParseError(f"{path}: missing values in rows {shown}"
                             + (" ..." if len(blanks) > 20 else ""))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return {c: arr[:, k] for k, c in enumerate(columns)}


def _split_names(text: str | None) -> list[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


@dataclass
class FitRequest:
    data_path: str
    outcome_col: str
    exposure_col: str
    mediator_cols: list[str]
    confounder_cols: list[str]
    external: dict | None
    method: str = "soft"
    s2: str = "eb"
    bootstrap_B: int = 500
    level: float = 0.95
    seed: int | None = None
    wald_pretest: bool = True

    def __post_init__(self):
        names = [self.outcome_col, self.exposure_col, *self.mediator_cols, *self.confounder_cols]
        if len(set(names)) != len(names):
            raise ConfigError("outcome, exposure, mediator and confounder columns must be distinct")
        if not self.mediator_cols:
            raise ConfigError("at least one mediator column is required")

    def load(self) -> InternalDataset:
        cols = read_table(self.data_path, [self.outcome_col, self.exposure_col,
                                           *self.mediator_cols, *self.confounder_cols])
        n = cols[self.outcome_col].size
        C = (np.column_stack([cols[c] for c in self.confounder_cols])
             if self.confounder_cols else None)
        return InternalDataset(Y=cols[self.outcome_col],
                               M=np.column_stack([cols[c] for c in self.mediator_cols]),
                               A=cols[self.exposure_col], C=with_intercept(C, n))

    def soft_config(self) -> SoftConfig:
        s2 = self.s2 if str(self.s2).lower() == "eb" else float(self.s2)
        return SoftConfig(s2=s2)


def _interval_dict(iv):
    if iv is None:
        return None
    return {"lower": iv.lower, "upper": iv.upper, "length": iv.length,
            "level": iv.level, "kind": iv.kind.value}


def fit_report(req: FitRequest) -> dict:
    """Fit one model and assemble the machine-readable report."""
    data = req.load()
    validate(data)
    ext = None
    if req.external is not None:
        ext = ExternalSummary(req.external["theta_e"], req.external["var_theta_e"],
                              req.external.get("n_e"))
    soft = req.soft_config()
    fu = fit_unconstrained(data)
    f = fu if req.method == "unconstrained" else fit(data, ext, req.method, soft=soft)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eff = inference.infer_effects(f, data, ext, level=req.level, soft=soft,
                                      bootstrap_B=req.bootstrap_B, seed=req.seed,
                                      wald_pretest=req.wald_pretest, fit_u=fu)
    av = eff.avar
    return {
        "method": Method(f.method).value,
        "n": data.n,
        "p_m": data.p_m,
        "p_c": data.p_c,
        "estimates": {"nde": eff.nde, "nie": eff.nie, "te": eff.te},
        "intervals": {k: _interval_dict(eff.intervals.get(k)) for k in ("nde", "nie", "te")},
        "asymptotic_variances": {"nde": av.avar_nde, "nie": av.avar_nie, "te": av.avar_te},
        "wald": None if eff.wald is None else asdict(eff.wald),
        "partial_r2": eff.partial_r2,
        "sigma_a2": eff.sigma_a2,
        "s2_used": f.s2_used,
        "loglik": f.loglik,
        "iterations": f.n_iter,
        "notes": eff.notes,
    }


def format_fit_report(rep: dict) -> str:
    lines = [f"method: {rep['method']}  (n={rep['n']}, p_m={rep['p_m']}, p_c={rep['p_c']})"]
    if rep["s2_used"] is not None:
        lines.append(f"prior scale s2: {rep['s2_used']:.6g}")
    lines.append(f"{'effect':<6} {'estimate':>12} {'lower':>12} {'upper':>12} {'length':>10}  interval")
    for k in ("nde", "nie", "te"):
        iv = rep["intervals"][k]
        if iv is None:
            lines.append(f"{k.upper():<6} {rep['estimates'][k]:>12.6g} {'-':>12} {'-':>12} {'-':>10}")
        else:
            lines.append(f"{k.upper():<6} {rep['estimates'][k]:>12.6g} {iv['lower']:>12.6g} "
                         f"{iv['upper']:>12.6g} {iv['length']:>10.4g}  {iv['kind']}")
    lines.append(f"partial R2 (M | A, C): {rep['partial_r2']:.4f}")
    if rep["wald"]:
        w = rep["wald"]
        lines.append(f"Wald no-mediation test: stat={w['statistic']:.4g}, df={w['dof']}, "
                     f"p={w['p_value']:.4g}")
    lines.extend(f"note: {m}" for m in rep["notes"])
    return "\n".join(lines)


def cmd_fit(args) -> int:
    external = None
    if args.external_theta is not None or args.external_var is not None:
        if args.external_theta is None or args.external_var is None:
            raise ConfigError("--external-theta and --external-var must be given together")
        external = {"theta_e": args.external_theta, "var_theta_e": args.external_var,
                    "n_e": args.external_n}
    if args.method != "unconstrained" and external is None:
        raise ConfigError(f"method {args.method!r} needs --external-theta and --external-var")
    req = FitRequest(args.data, args.outcome, args.exposure, _split_names(args.mediators),
                     _split_names(args.confounders), external, args.method, args.s2,
                     args.bootstrap, args.level, args.seed, not args.no_wald)
    started = _now()
    rep = fit_report(req)
    rep["manifest"] = asdict(RunManifest(
        tool_version(), config_hash(asdict(req)), args.seed, started, _now(),
        {str(args.data): sha256_file(args.data)}))
    if args.json:
        Path(args.json).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(format_fit_report(rep))
    return EXIT_OK


# ----------------------------------------------------------------------------- simulate

def load_config(path) -> list[simlab.ScenarioConfig]:
    """Parse a TOML scenario file into the cells of its grid.

    Scalars in ``[scenario]`` set fields for every cell; list values
    (other than ``beta_m_pattern``) are grid axes.  Optional ``[hard]`` and
    ``[soft]`` tables configure the estimators.
    """
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(raw) - {"scenario", "hard", "soft"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    sc = dict(raw.get("scenario", {}))
    fields = simlab.ScenarioConfig.__dataclass_fields__
    for k in sc:
        if k not in fields or k in ("hard", "soft"):
            raise ConfigError(f"{path}: [scenario].{k} is not a scenario field")
    base, grid = {}, {}
    for k, v in sc.items():
        if isinstance(v, list) and k != "beta_m_pattern":
            if not v:
                raise ConfigError(f"{path}: [scenario].{k} grid is empty")
            grid[k] = v
        else:
            base[k] = v
    try:
        if "hard" in raw:
            base["hard"] = HardConfig(**raw["hard"])
        if "soft" in raw:
            base["soft"] = SoftConfig(**raw["soft"])
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return simlab.expand_grid(base, grid)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except (ValueError, MedfuseError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def summary_csv(summary: simlab.ScenarioSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in summary.rows:
        w.writerow([summary.scenario_id] + [_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS[1:]])
    return buf.getvalue()


def replicates_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = simlab.ReplicateResult.CSV_FIELDS
    w.writerow(cols)
    for r in results:
        w.writerow([_fmt(getattr(r, c)) for c in cols])
    return buf.getvalue()


def cell_stem(cfg: simlab.ScenarioConfig) -> str:
    return f"{cfg.scenario_id}_seed{cfg.seed}"


def cmd_simulate(args) -> int:
    cells = load_config(args.config)
    if args.seed is not None:
        cells = [simlab.with_overrides(c, seed=args.seed) for c in cells]
    if args.replicates is not None:
        cells = [simlab.with_overrides(c, replicates=args.replicates) for c in cells]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(tool_version(), config_hash([c.to_dict() for c in cells]),
                           args.seed if args.seed is not None else cells[0].seed, _now(),
                           input_digests={str(args.config): sha256_file(args.config)})
    for cfg in cells:
        summary = simlab.run_scenario(cfg, workers=args.workers)
        stem = cell_stem(cfg)
        files = {
            f"{stem}.replicates.csv": replicates_csv(summary.results),
            f"{stem}.summary.csv": summary_csv(summary),
            f"{stem}.config.json": json.dumps(
                {"schema_version": SCHEMA_VERSION, "scenario_id": cfg.scenario_id,
                 "seed": cfg.seed, "failure_rate": summary.failure_rate,
                 "flagged": summary.flagged, "config": cfg.to_dict()},
                indent=2, sort_keys=True) + "\n",
        }
        for name, text in files.items():
            (out / name).write_text(text)
            manifest.outputs.append(name)
        flag = "  [FLAGGED: >1% failed replicates]" if summary.flagged else ""
        print(f"{stem}: {cfg.replicates} replicates{flag}")
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    return EXIT_OK


# ----------------------------------------------------------------------------- report

def read_summary(path) -> tuple[list[dict], dict]:
    """Rows of a summary CSV plus its sidecar metadata (if present)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != SUMMARY_COLUMNS:
            raise SchemaMismatch(f"{path}: unexpected columns {list(header)}")
        rows = [dict(zip(header, rec)) for rec in reader if rec]
    meta = {}
    side = path.with_name(path.name.replace(".summary.csv", ".config.json"))
    if side != path and side.exists():
        meta = json.loads(side.read_text())
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch(f"{side}: schema version {meta.get('schema_version')} "
                                 f"!= {SCHEMA_VERSION}")
    return rows, meta


def _typed(cls, rec: dict) -> dict:
    out = {}
    for k, v in rec.items():
        t = cls.__dataclass_fields__[k].type
        if t in ("int", int):
            out[k] = int(v)
        elif t in ("float", float):
            out[k] = float(v)
        elif t in ("bool", bool):
            out[k] = v == "True"
        else:
            out[k] = v
    return out


def parse_summary(path) -> list[simlab.EffectSummary]:
    """Re-read a summary CSV into :class:`~medfuse.simlab.EffectSummary` rows."""
    rows, _ = read_summary(path)
    return [simlab.EffectSummary(**_typed(simlab.EffectSummary,
                                          {k: v for k, v in r.items() if k != "scenario_id"}))
            for r in rows]


def parse_replicates(path) -> list[simlab.ReplicateResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != simlab.ReplicateResult.CSV_FIELDS:
            raise SchemaMismatch(f"{path}: unexpected columns {reader.fieldnames}")
        return [simlab.ReplicateResult(**_typed(simlab.ReplicateResult, r)) for r in reader]


REPORT_COLUMNS = ("scenario_id", "seed", "method", "effect", "rmse",
                  "rel_rmse_vs_unconstrained", "coverage", "mean_ci_length")


def cmd_report(args) -> int:
    table = []
    for p in args.summaries:
        rows, meta = read_summary(p)
        for r in rows:
            table.append({**r, "seed": str(meta.get("seed", ""))})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    md = ["| " + " | ".join(REPORT_COLUMNS) + " |",
          "|" + "---|" * len(REPORT_COLUMNS)]
    for r in table:
        md.append("| " + " | ".join(_md_cell(r[c]) for c in REPORT_COLUMNS) + " |")
    out.write_text("\n".join(md) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in table:
        w.writerow([r[c] for c in REPORT_COLUMNS])
    out.with_suffix(".csv").write_text(buf.getvalue())
    print(f"{len(table)} rows -> {out} and {out.with_suffix('.csv')}")
    return EXIT_OK


def _md_cell(v: str) -> str:
    try:
        x = float(v)
    except ValueError:
        return v
    if math.isnan(x):
        return "-"
    return v if "." not in v and "e" not in v else f"{x:.4f}"


# ----------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="medfuse", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a mediation model to a CSV file")
    f.add_argument("--data", required=True)
    f.add_argument("--outcome", required=True)
    f.add_argument("--exposure", required=True)
    f.add_argument("--mediators", required=True, help="comma-separated column names")
    f.add_argument("--confounders", default="", help="comma-separated column names")
    f.add_argument("--external-theta", type=float)
    f.add_argument("--external-var", type=float)
    f.add_argument("--external-n", type=int)
    f.add_argument("--method", choices=[m.value for m in Method], default="soft")
    f.add_argument("--s2", default="eb", help="'eb' or a fixed nonnegative prior scale")
    f.add_argument("--bootstrap", type=int, default=500, help="soft NDE bootstrap size")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--seed", type=int)
    f.add_argument("--no-wald", action="store_true", help="skip the no-mediation pre-test")
    f.add_argument("--json", help="also write the report as JSON to this path")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--replicates", type=int, help="override the replicate count")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="combine summary CSVs into one table")
    r.add_argument("summaries", nargs="+")
    r.add_argument("--out", required=True, help="markdown path; a .csv twin is also written")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (MedfuseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
