"""Command-line entry points and the end-to-end study driver.

Subcommands: ``simulate`` (write scenario datasets), ``site`` (serve one
cohort), ``analyze`` (run one distributed analysis against live sites),
``evaluate`` (score finished runs), ``bench-calls`` (traffic accounting
study) and ``repro`` (full pipeline: simulate, analyze every method,
evaluate, manifest).

Exit codes: 0 success, 2 configuration error, 3 site failure, 4 numerical
abort.  ``FEDBOOST_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__, metrics, pooled
from .boostcore import (BLOCK, FULL, HEURISTIC, MODES, BoostingConfig,
                        DegenerateDiagonalError, NonFiniteScoreError,
                        run_boosting)
from .coordinator import (Coordinator, InProcessChannel, SiteError,
                          SocketChannel, run_inprocess)
from .metrics import (RunRecord, auc, plot_calls_values,
                      plot_selection_summary, summarize,
                      univariable_meta_baseline, write_metrics)
from .protocol import DisclosurePolicy
from .simgen import (IndivisibleSplitError, LayoutInfeasibleError, Scenario,
                     generate_replicate, read_truth, replicate_rng,
                     split_cohorts, write_replicate)
from .sitenode import DegenerateColumnError, SiteDataset, SiteSession, serve

log = logging.getLogger("fedboost.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SITE = 3
EXIT_NUMERIC = 4

_SPLIT_PURPOSE = 2  # rng purpose tag used for cohort splits

NUMERIC_ERRORS = (NonFiniteScoreError, DegenerateDiagonalError,
                  DegenerateColumnError, pooled.DegenerateColumnError)


class ConfigError(ValueError):
    pass


# --- configuration ----------------------------------------------------------

def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _from_table(cls, table: dict, context: str):
    """Build a dataclass from a TOML table, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def parse_scenario(doc: dict, context: str = "config") -> Scenario:
    if "scenario" not in doc:
        raise ConfigError(f"{context}: missing [scenario] table")
    return _from_table(Scenario, doc["scenario"], f"{context}.scenario")


@dataclass
class RunConfig:
    """The [run] table of a repro/bench configuration."""

    cohorts: list = dataclasses.field(default_factory=lambda: [1])
    standardize: str = "local"
    methods: list = dataclasses.field(default_factory=lambda: [FULL])
    buffer: int = 20
    nu: float = 0.1
    max_steps: int = 200
    model_size: int = 10
    min_site_n: int = 1
    baseline: bool = False
    pooled: bool = False
    in_process: bool = True

    def __post_init__(self):
        if self.standardize not in ("local", "global"):
            raise ValueError(f"standardize must be local or global, "
                             f"got {self.standardize!r}")
        bad = [m for m in self.methods if m not in MODES]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(MODES)}")
        if not self.cohorts or any(int(c) < 1 for c in self.cohorts):
            raise ValueError("cohorts must be a nonempty list of positive ints")
        self.cohorts = [int(c) for c in self.cohorts]


@dataclass
class OutputConfig:
    dir: str = "out"
    write_data: bool = False
    plots: bool = True


@dataclass
class ReproConfig:
    scenario: Scenario
    run: RunConfig
    output: OutputConfig

    @classmethod
    def load(cls, path) -> "ReproConfig":
        doc = _load_toml(path)
        extras = set(doc) - {"scenario", "run", "output"}
        if extras:
            raise ConfigError(f"{path}: unknown tables {sorted(extras)}")
        return cls(scenario=parse_scenario(doc, str(path)),
                   run=_from_table(RunConfig, doc.get("run", {}), f"{path}.run"),
                   output=_from_table(OutputConfig, doc.get("output", {}),
                                      f"{path}.output"))


# --- artifacts ---------------------------------------------------------------

def write_selection_csv(state, p: int, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"rank": i + 1, "covariate": f"x{j + 1}", "beta": state.beta[j]}
            for i, j in enumerate(state.inclusion_order)]
    pd.DataFrame(rows, columns=["rank", "covariate", "beta"]).to_csv(path, index=False)
    return path


def read_selection_csv(path, p: int):
    frame = pd.read_csv(path)
    order = [int(str(c)[1:]) - 1 for c in frame["covariate"]]
    beta = np.zeros(p)
    beta[order] = frame["beta"].to_numpy(dtype=float)
    return order, beta


def write_ledger_csv(ledger, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(ledger.to_rows(), columns=["metric", "value"]).to_csv(path, index=False)
    return path


def write_history_csv(ledger, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(ledger.history,
                 columns=["step", "model_size", "covariance_calls",
                          "covariance_values"]).to_csv(path, index=False)
    return path


def _read_xy(path):
    frame = pd.read_csv(path)
    xcols = [c for c in frame.columns if c != "y"]
    return frame[xcols].to_numpy(dtype=float), frame["y"].to_numpy(dtype=float)


# --- site process management -------------------------------------------------

class SiteProcess:
    """One spawned ``fedboost site`` serving a CSV on loopback."""

    def __init__(self, csv_path, min_site_n: int = 1):
        cmd = [sys.executable, "-m", "fedboost", "site",
               "--data", str(csv_path), "--listen", "127.0.0.1:0",
               "--min-n", str(min_site_n)]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE,
                                     stderr=subprocess.DEVNULL, text=True)
        line = self.proc.stdout.readline().strip()
        if not line.startswith("LISTENING "):
            self.close()
            raise SiteError(str(csv_path), f"site did not announce itself: {line!r}")
        host, port = line.split(" ", 1)[1].rsplit(":", 1)
        self.host, self.port = host, int(port)

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


def run_distributed(site_data, boost_config: BoostingConfig, standardize: str,
                    min_site_n: int = 1, transport: str = "memory",
                    workdir=None):
    """Run one analysis over in-memory or subprocess sites.

    ``site_data`` is a list of (x, y) pairs.  With ``transport='socket'``
    each site is written to ``workdir`` and served by its own process; the
    message encoding on the wire is identical either way.
    """
    if transport == "memory":
        return run_inprocess(site_data, boost_config, standardize=standardize,
                             min_site_n=min_site_n)
    if transport != "socket":
        raise ConfigError(f"unknown transport {transport!r}")
    workdir = Path(workdir or ".")
    workdir.mkdir(parents=True, exist_ok=True)
    processes = []
    channels = []
    try:
        for i, (x, y) in enumerate(site_data, start=1):
            path = workdir / f"site_{i}.csv"
            frame = pd.DataFrame(np.asarray(x),
                                 columns=[f"x{j + 1}" for j in range(np.asarray(x).shape[1])])
            frame["y"] = np.asarray(y)
            frame.to_csv(path, index=False)
            processes.append(SiteProcess(path, min_site_n))
        channels = [SocketChannel(proc.host, proc.port) for proc in processes]
        coordinator = Coordinator(channels)
        coordinator.describe()
        coordinator.standardize(standardize)
        return run_boosting(coordinator, boost_config)
    finally:
        for channel in channels:
            try:
                channel.close()
            except OSError:
                pass
        for proc in processes:
            proc.close()


# --- the study driver ---------------------------------------------------------

def method_label(mode: str, standardize: str) -> str:
    return f"{mode}_{standardize}"


def boost_config_for(mode: str, scenario: Scenario, run: RunConfig) -> BoostingConfig:
    return BoostingConfig(p=scenario.p, nu=run.nu, max_steps=run.max_steps,
                          target_model_size=run.model_size, mode=mode,
                          buffer_w=run.buffer if mode == BLOCK else 0)


def run_study(config: ReproConfig, transport: str = "memory", out_dir=None,
              progress=None):
    """All replicates of one scenario across cohort counts and methods.

    Returns (records, truths, history rows).  When ``out_dir`` is given,
    per-run selection/ledger files are written beneath it.
    """
    scenario = config.scenario
    run = config.run
    base_scenario = dataclasses.replace(scenario, cohorts=1)
    records: list[RunRecord] = []
    history_rows: list[dict] = []
    truths: dict[str, np.ndarray] = {}
    for r in range(scenario.replicates):
        data = generate_replicate(base_scenario, r)
        truths[scenario.name] = data.beta_true
        pooled_record = None
        if run.pooled:
            xg, yg = pooled.standardize_pooled(data.x, data.y)
            ref = pooled.pooled_boosting(xg, yg, nu=run.nu,
                                         max_steps=run.max_steps,
                                         target_model_size=run.model_size)
            pooled_record = (ref.inclusion_order,
                             auc(data.test_x @ ref.beta, data.test_y))
        for cohorts in run.cohorts:
            sites = split_cohorts(data.x, data.y, cohorts,
                                  replicate_rng(base_scenario, r, _SPLIT_PURPOSE))
            common = dict(scenario=scenario.name, n=scenario.n,
                          cohorts=cohorts, replicate=r)
            if pooled_record is not None:
                records.append(RunRecord(method="pooled",
                                         inclusion_order=list(pooled_record[0]),
                                         auc=pooled_record[1], **common))
            if run.baseline:
                top, _ = univariable_meta_baseline(sites, k=10)
                records.append(RunRecord(method="baseline",
                                         inclusion_order=top.tolist(),
                                         auc=float("nan"), **common))
            for mode in run.methods:
                label = method_label(mode, run.standardize)
                boost_config = boost_config_for(mode, scenario, run)
                workdir = None
                if out_dir is not None:
                    rundir = (Path(out_dir) / "runs" / scenario.name
                              / f"n{scenario.n}" / f"L{cohorts}" / label
                              / f"rep_{r:03d}")
                    workdir = rundir / "sites"
                state, ledger = run_distributed(sites, boost_config,
                                                run.standardize,
                                                run.min_site_n,
                                                transport=transport,
                                                workdir=workdir)
                beta = state.beta_vector(scenario.p)
                record = RunRecord(method=label,
                                   inclusion_order=list(state.inclusion_order),
                                   auc=auc(data.test_x @ beta, data.test_y),
                                   data_calls=ledger.data_calls,
                                   covariance_calls=ledger.covariance_calls,
                                   covariance_values=ledger.covariance_values,
                                   history=list(ledger.history), **common)
                records.append(record)
                for row in ledger.history:
                    history_rows.append(dict(scenario=scenario.name,
                                             n=scenario.n, cohorts=cohorts,
                                             method=label, replicate=r, **row))
                if out_dir is not None:
                    write_selection_csv(state, scenario.p, rundir / "selection.csv")
                    write_ledger_csv(ledger, rundir / "ledger.csv")
                    write_history_csv(ledger, rundir / "ledger_history.csv")
            if progress is not None:
                progress(replicate=r, cohorts=cohorts)
        if config.output.write_data and out_dir is not None:
            write_replicate(data, Path(out_dir) / "data" / f"rep_{r:03d}")
    return records, truths, history_rows


def write_manifest(out_dir, extra: dict) -> Path:
    """List every produced file with a content hash."""
    out_dir = Path(out_dir)
    files = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            files[str(path.relative_to(out_dir))] = digest
    manifest = {"version": __version__,
                "python": platform.python_version(),
                **extra,
                "files": files}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    doc = _load_toml(args.scenario)
    extras = set(doc) - {"scenario"}
    if extras:
        raise ConfigError(f"{args.scenario}: unknown tables {sorted(extras)}")
    scenario = parse_scenario(doc, str(args.scenario))
    out = Path(args.out)
    for r in range(scenario.replicates):
        data = generate_replicate(scenario, r)
        write_replicate(data, out / f"rep_{r:03d}")
    print(f"wrote {scenario.replicates} replicate(s) of '{scenario.name}' to {out}")
    return EXIT_OK


def cmd_site(args) -> int:
    host, _, port = args.listen.rpartition(":")
    if not host:
        raise ConfigError(f"--listen must be host:port, got {args.listen!r}")
    data = SiteDataset.from_csv(args.data)
    policy = DisclosurePolicy(min_site_n=args.min_n)
    serve(data, host=host, port=int(port), policy=policy)
    return EXIT_OK


def cmd_analyze(args) -> int:
    addresses = []
    for part in args.sites.split(","):
        host, _, port = part.strip().rpartition(":")
        if not host:
            raise ConfigError(f"bad site address {part!r}")
        addresses.append((host, int(port)))
    channels = [SocketChannel(host, port) for host, port in addresses]
    try:
        coordinator = Coordinator(channels)
        metas = coordinator.describe()
        coordinator.standardize(args.standardize)
        config = BoostingConfig(p=metas[0].p, nu=args.nu, max_steps=args.steps,
                                target_model_size=args.model_size,
                                mode=args.mode,
                                buffer_w=args.buffer if args.mode == BLOCK else 0)
        state, ledger = run_boosting(coordinator, config)
    finally:
        for channel in channels:
            try:
                channel.close()
            except OSError:
                pass
    out = Path(args.out)
    write_selection_csv(state, metas[0].p, out / "selection.csv")
    write_ledger_csv(ledger, out / "ledger.csv")
    write_history_csv(ledger, out / "ledger_history.csv")
    print(f"selected {len(state.inclusion_order)} covariates in "
          f"{ledger.data_calls} data calls "
          f"({ledger.covariance_values} covariance values); output in {out}")
    return EXIT_OK


def _label_parts(rel_parts):
    """Split a run directory path into (label, cohorts, replicate)."""
    cohorts = 0
    replicate = 0
    label_bits = []
    for part in rel_parts:
        if part.startswith("rep_") and part[4:].isdigit():
            replicate = int(part[4:])
        elif part.startswith("L") and part[1:].isdigit():
            cohorts = int(part[1:])
            label_bits.append(part)
        else:
            label_bits.append(part)
    return "/".join(label_bits) or "run", cohorts, replicate


def cmd_evaluate(args) -> int:
    results = Path(args.results)
    truth = read_truth(args.truth)
    p = truth.shape[0]
    test_x, test_y = _read_xy(args.test)
    records = []
    for sel in sorted(results.rglob("selection.csv")):
        label, cohorts, replicate = _label_parts(sel.parent.relative_to(results).parts)
        order, beta = read_selection_csv(sel, p)
        counts = {}
        ledger_path = sel.parent / "ledger.csv"
        if ledger_path.exists():
            counts = dict(pd.read_csv(ledger_path).itertuples(index=False, name=None))
        records.append(RunRecord(
            scenario="results", n=test_x.shape[0], cohorts=cohorts,
            method=label, replicate=replicate, inclusion_order=order,
            auc=auc(test_x @ beta, test_y),
            data_calls=int(counts.get("data_calls", 0)),
            covariance_calls=int(counts.get("covariance_calls", 0)),
            covariance_values=int(counts.get("covariance_values", 0))))
    if not records:
        raise ConfigError(f"no selection.csv files under {results}")
    summary = summarize(records, {"results": truth})
    out = Path(args.out)
    write_metrics(summary, out / "metrics.csv")
    print(summary.to_string(index=False))
    print(f"metrics written to {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_bench_calls(args) -> int:
    doc = _load_toml(args.scenario)
    extras = set(doc) - {"scenario", "run"}
    if extras:
        raise ConfigError(f"{args.scenario}: unknown tables {sorted(extras)}")
    config = ReproConfig(
        scenario=parse_scenario(doc, str(args.scenario)),
        run=_from_table(RunConfig, doc.get("run", {}), f"{args.scenario}.run"),
        output=OutputConfig(dir=str(args.out), plots=not args.no_plots))
    buffers = [int(b) for b in args.buffers.split(",")] if args.buffers else [config.run.buffer]
    out = Path(args.out)
    all_rows = []
    summaries = []
    for mode in config.run.methods:
        for buffer in (buffers if mode == BLOCK else [0]):
            run_cfg = dataclasses.replace(config.run, methods=[mode], buffer=buffer)
            study = dataclasses.replace(config, run=run_cfg)
            records, _, history = run_study(study, transport="memory")
            tag = f"{mode}_w{buffer}" if mode == BLOCK else mode
            for row in history:
                row["method"] = tag
                all_rows.append(row)
            ends = [r for r in records if r.method.startswith(mode)]
            summaries.append({
                "method": tag,
                "mean_covariance_calls": float(np.mean([r.covariance_calls for r in ends])),
                "mean_covariance_values": float(np.mean([r.covariance_values for r in ends])),
                "replicates": len(ends)})
    out.mkdir(parents=True, exist_ok=True)
    history_frame = pd.DataFrame(all_rows)
    history_frame.to_csv(out / "call_history.csv", index=False)
    summary_frame = pd.DataFrame(summaries)
    summary_frame.to_csv(out / "call_summary.csv", index=False)
    if config.output.plots and not history_frame.empty:
        plot_calls_values(history_frame, out / "plots")
    print(summary_frame.to_string(index=False))
    return EXIT_OK


def cmd_repro(args) -> int:
    config = ReproConfig.load(args.config)
    if args.in_process:
        config.run.in_process = True
    if args.out:
        config.output.dir = args.out
    transport = "memory" if config.run.in_process else "socket"
    out = Path(config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    records, truths, history = run_study(config, transport=transport, out_dir=out)
    summary = summarize(records, truths)
    write_metrics(summary, out / "metrics.csv")
    if config.output.plots:
        plot_selection_summary(summary, out / "plots")
        if history:
            plot_calls_values(pd.DataFrame(history), out / "plots")
    write_manifest(out, {
        "config": str(args.config),
        "scenario": dataclasses.asdict(config.scenario),
        "run": dataclasses.asdict(config.run),
        "transport": transport,
    })
    print(summary.to_string(index=False))
    print(f"artifacts in {out}")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedboost",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate scenario datasets")
    p_sim.add_argument("--scenario", required=True, help="TOML file with a [scenario] table")
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_site = sub.add_parser("site", help="serve one cohort's aggregates")
    p_site.add_argument("--data", required=True, help="CSV with x1..xp and y columns")
    p_site.add_argument("--listen", default="127.0.0.1:0", help="host:port (port 0 = pick free)")
    p_site.add_argument("--min-n", type=int, default=10,
                        help="refuse statistics below this cohort size")
    p_site.set_defaults(func=cmd_site)

    p_an = sub.add_parser("analyze", help="run one distributed analysis")
    p_an.add_argument("--sites", required=True, help="comma-separated host:port list")
    p_an.add_argument("--mode", choices=list(MODES), default=FULL)
    p_an.add_argument("--buffer", type=int, default=20)
    p_an.add_argument("--nu", type=float, default=0.1)
    p_an.add_argument("--steps", type=int, default=200)
    p_an.add_argument("--model-size", type=int, default=10)
    p_an.add_argument("--standardize", choices=["local", "global"], default="local")
    p_an.add_argument("--out", required=True)
    p_an.set_defaults(func=cmd_analyze)

    p_ev = sub.add_parser("evaluate", help="score finished runs")
    p_ev.add_argument("--results", required=True)
    p_ev.add_argument("--truth", required=True)
    p_ev.add_argument("--test", required=True)
    p_ev.add_argument("--out", required=True)
    p_ev.set_defaults(func=cmd_evaluate)

    p_bc = sub.add_parser("bench-calls", help="data-call accounting study")
    p_bc.add_argument("--scenario", required=True)
    p_bc.add_argument("--buffers", default="", help="comma-separated buffer sizes for block mode")
    p_bc.add_argument("--no-plots", action="store_true")
    p_bc.add_argument("--out", required=True)
    p_bc.set_defaults(func=cmd_bench_calls)

    p_rep = sub.add_parser("repro", help="full pipeline from one config file")
    p_rep.add_argument("--config", required=True)
    p_rep.add_argument("--in-process", action="store_true",
                       help="use the in-memory transport instead of site processes")
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FEDBOOST_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (LayoutInfeasibleError, IndivisibleSplitError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (SiteError, ConnectionError) as exc:
        log.error("site failure: %s", exc)
        return EXIT_SITE
    except OSError as exc:
        log.error("site failure: %s", exc)
        return EXIT_SITE


if __name__ == "__main__":
    sys.exit(main())
