"""
Command-line interface
命令行入口：模拟、推断、学习、评估与基准测试
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from loguru import logger
from pydantic import BaseModel, Field

from . import __version__
from .config import AppConfig, InferenceMode, MaskSpec, MaskTask, load_config
from .data_io import (
    IDS_FILE,
    LEDGER_FILE,
    load_dataset,
    apply_mask,
    load_ids,
    load_truth,
    generate_benchmark,
    write_dataset,
    write_ledger,
)
from .engine import IndividualPosterior, infer
from .epidemic import INFECTIOUS, EpidemicParams, compile_system, simulate
from .errors import DataFormatError, SkmError, UsageError
from .evaluation import (
    BASELINE_RUNNERS,
    BaselineSpec,
    BenchmarkFixture,
    all_cells,
    collective_curve,
    load_scores_csv,
    roc_from_arrays,
    scaling_benchmark,
    score_cells,
    write_bench_csv,
    write_counts_csv,
    write_roc_csv,
    write_scores_csv,
)
from .exact import exact_forward_backward, exact_individual_marginals
from .learning import learn_rates
from .log import configure_logging
from .model import MISSING, ObservationModel, SkmSystem
from .samplers import gibbs_infer, pf_infer

MANIFEST_FILE = "manifest.json"


class RunManifest(BaseModel):
    """Record of one CLI run, written beside its outputs."""
    command: str
    arguments: Dict[str, object] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    version: str = __version__
    wall_time: float = 0.0
    diagnostics: Dict[str, object] = Field(default_factory=dict)
    flags: List[str] = Field(default_factory=list)     # e.g. not_converged, degenerate

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_FILE
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.model_dump_json(indent=2))
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths: Sequence[Path]) -> Dict[str, str]:
    return {p.name: sha256_file(p) for p in paths if p.exists()}


def _arguments(args: argparse.Namespace) -> Dict[str, object]:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "handler"}


def resolve_threads(requested: Optional[int]) -> int:
    """SKM_THREADS wins over --threads; the default is every core."""
    env = os.environ.get("SKM_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"SKM_THREADS must be an integer, got {env!r}") from None
    else:
        value = requested if requested is not None else (os.cpu_count() or 1)
    if value < 1:
        raise UsageError("thread count must be positive")
    return value


def _app_config(args: argparse.Namespace) -> AppConfig:
    config = load_config(args.config)
    vi = {"threads": resolve_threads(args.threads)}
    for flag, key in (("iters", "max_iters"), ("tol", "tol"), ("damping", "damping")):
        value = getattr(args, flag, None)
        if value is not None:
            vi[key] = value
    sampler = {}
    for flag, key in (("sweeps", "iterations"), ("particles", "particles"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            sampler[key] = value
    try:
        return config.model_copy(update={
            "vi": config.vi.model_validate({**config.vi.model_dump(), **vi}),
            "sampler": config.sampler.model_validate({**config.sampler.model_dump(), **sampler}),
        })
    except ValueError as e:
        raise UsageError(str(e)) from e


# ---------------------------------------------------------------------------
# Method registry
# ---------------------------------------------------------------------------

Runner = Callable[[SkmSystem, ObservationModel, np.ndarray, AppConfig, InferenceMode], Tuple[IndividualPosterior, Dict]]


def _run_viskm(system, obsmodel, observations, config: AppConfig, mode: InferenceMode):
    vi = config.vi.model_copy(update={"mode": mode})
    posterior, diag = infer(system, obsmodel, observations, vi)
    return posterior, diag.to_dict()


def _run_gibbs(system, obsmodel, observations, config: AppConfig, mode: InferenceMode):
    if mode == InferenceMode.FILTERING:
        logger.warning("Gibbs sampling always smooths; filtering mode is ignored")
    posterior, diag = gibbs_infer(system, obsmodel, observations, config.sampler)
    return posterior, diag.to_dict()


def _run_pf(system, obsmodel, observations, config: AppConfig, mode: InferenceMode):
    sampler = config.sampler.model_copy(update={"mode": mode})
    posterior, diag = pf_infer(system, obsmodel, observations, sampler)
    return posterior, diag.to_dict()


def _run_exact(system, obsmodel, observations, config: AppConfig, mode: InferenceMode):
    started = time.perf_counter()
    joint = exact_forward_backward(system, obsmodel, observations)
    filtered = mode == InferenceMode.FILTERING
    gamma = np.stack([
        exact_individual_marginals(joint, m, filtered=filtered) for m in range(system.num_individuals)
    ])
    diag = {
        "method": "exact",
        "log_evidence": joint.log_evidence,
        "converged": True,
        "wall_time": time.perf_counter() - started,
    }
    return IndividualPosterior(gamma=gamma, mode=mode), diag


METHODS: Dict[str, Runner] = {
    "viskm": _run_viskm,
    "gibbs": _run_gibbs,
    "pf": _run_pf,
    "exact": _run_exact,
}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    """生成合成 SIS 数据集"""
    started = time.perf_counter()
    out = Path(args.out)
    try:
        params = EpidemicParams(
            c1=args.c1, c2=args.c2, c3=args.c3,
            obs_sensitivity=args.sens, obs_specificity=args.spec,
            initial_prevalence=args.prevalence,
        )
    except ValueError as e:
        raise UsageError(f"invalid epidemic parameters: {e}") from e
    if args.m < 1 or args.t < 1:
        raise UsageError("--m and --t must be positive")

    contacts, bundle = generate_benchmark(args.m, args.t, args.density, params, args.seed)
    if args.strict:
        bundle = simulate(contacts, params, seed=args.seed, strict=True)
    paths = write_dataset(out, contacts, bundle, params)

    manifest = RunManifest(
        command="simulate",
        arguments=_arguments(args),
        seeds={"simulation": args.seed},
        wall_time=time.perf_counter() - started,
        diagnostics={
            "edges": contacts.num_edges,
            "infected_cells": int(bundle.states.sum()),
            "outputs": {name: sha256_file(p) for name, p in paths.items()},
        },
    )
    manifest.write(out)
    print(f"wrote dataset to {out}")
    return 0


def _posterior_frame(posterior: IndividualPosterior) -> pd.DataFrame:
    M, T, S = posterior.gamma.shape
    t_idx, m_idx = np.meshgrid(np.arange(1, T + 1), np.arange(M), indexing="ij")
    frame = pd.DataFrame({"t": t_idx.ravel(), "m": m_idx.ravel()})
    grid = np.moveaxis(posterior.gamma, 0, 1).reshape(T * M, S)
    for x in range(S):
        frame[f"p{x}"] = grid[:, x]
    return frame


def cmd_infer(args: argparse.Namespace) -> int:
    """对数据集执行推断"""
    started = time.perf_counter()
    directory, out = Path(args.dir), Path(args.out)
    config = _app_config(args)
    dataset = load_dataset(directory)
    if dataset.params is None:
        raise DataFormatError("dataset has no params.json", path=str(directory))
    params = dataset.params
    system = compile_system(dataset.contacts, params)
    obsmodel = params.observation_model()

    observations = dataset.observations
    ledger = None
    mode = InferenceMode.SMOOTHING
    seeds = {"sampler": config.sampler.seed}
    mask = config.mask
    if args.task is not None:
        try:
            mask = MaskSpec(task=MaskTask(args.task), fraction=args.mask_fraction, seed=args.seed or 0)
        except ValueError as e:
            raise UsageError(f"invalid mask: {e}") from e
    if mask is not None:
        masked = apply_mask(observations, mask)
        observations, ledger = masked.observations, masked.ledger
        write_ledger(out / LEDGER_FILE, ledger, observations.shape, ids=dataset.contacts.ids)
        seeds["mask"] = mask.seed
        if mask.task == MaskTask.PREDICT:
            mode = InferenceMode.FILTERING

    posterior, diagnostics = METHODS[args.method](system, obsmodel, observations, config, mode)

    if ledger is None:
        ledger = all_cells(*observations.shape)
    cells = score_cells(posterior, dataset.truth, ledger)
    write_scores_csv(out / "scores.csv", cells)
    _posterior_frame(posterior).to_csv(out / "posterior.csv", index=False)

    flags = []
    if not diagnostics.get("converged", True):
        flags.append("not_converged")
    manifest = RunManifest(
        command="infer",
        arguments=_arguments(args),
        seeds=seeds,
        input_hashes=_hash_inputs(sorted(directory.glob("*.json*"))),
        wall_time=time.perf_counter() - started,
        diagnostics=diagnostics,
        flags=flags,
    )
    manifest.write(out)
    print(f"{args.method}: wrote {len(cells)} scores to {out}")
    return 0


def _parse_rates(items: Optional[Sequence[str]]) -> Optional[Dict[str, float]]:
    if not items:
        return None
    rates = {}
    for item in items:
        group, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--init-c expects GROUP=VALUE, got {item!r}")
        try:
            rates[group] = float(value)
        except ValueError:
            raise UsageError(f"--init-c value for {group!r} is not a number") from None
    return rates


def cmd_learn(args: argparse.Namespace) -> int:
    """学习速率常数"""
    started = time.perf_counter()
    directory, out = Path(args.dir), Path(args.out)
    config = _app_config(args)
    dataset = load_dataset(directory)
    if dataset.params is None:
        raise DataFormatError("dataset has no params.json", path=str(directory))
    system = compile_system(dataset.contacts, dataset.params)

    update = {"vi": config.vi}
    init = _parse_rates(args.init_c)
    if init is not None:
        update["init_rates"] = init
    if args.max_em_iters is not None:
        update["max_em_iters"] = args.max_em_iters
    try:
        learn_config = config.learn.model_validate({**config.learn.model_dump(), **update})
    except ValueError as e:
        raise UsageError(str(e)) from e

    result = learn_rates(system, dataset.params.observation_model(), dataset.observations, learn_config)

    out.mkdir(parents=True, exist_ok=True)
    trace = pd.DataFrame(result.trace)
    trace.insert(0, "iteration", np.arange(len(trace)))
    trace.to_csv(out / "rates_trace.csv", index=False)
    with open(out / "rates.json", "w", encoding="utf-8") as f:
        json.dump(result.rates, f, indent=2, ensure_ascii=False)

    flags = []
    if (dataset.observations == MISSING).all():
        flags.append("degenerate")
    if not result.converged:
        flags.append("not_converged")
    flags.extend(f"zero_opportunity:{group}" for group in result.flagged)
    manifest = RunManifest(
        command="learn",
        arguments=_arguments(args),
        input_hashes=_hash_inputs(sorted(directory.glob("*.json*"))),
        wall_time=time.perf_counter() - started,
        diagnostics={"iterations": result.iterations, "converged": result.converged, "rates": result.rates},
        flags=flags,
    )
    manifest.write(out)
    print(f"learned rates: {result.rates}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """计算 ROC 与群体计数曲线"""
    started = time.perf_counter()
    out = Path(args.out)
    truth_path = Path(args.truth)
    ids_path = truth_path.parent / IDS_FILE
    ids = load_ids(ids_path) if ids_path.exists() else None
    truth = load_truth(truth_path, ids)

    scores = load_scores_csv(args.scores)
    t = scores["t"].to_numpy(dtype=np.int64)
    m = scores["m"].to_numpy(dtype=np.int64)
    T, M = truth.shape
    if ((t < 1) | (t > T) | (m < 0) | (m >= M)).any():
        raise DataFormatError("scores reference cells outside the truth grid", path=str(args.scores))
    labels = (truth[t - 1, m] == INFECTIOUS).astype(np.int64)
    roc = roc_from_arrays(scores["score"].to_numpy(dtype=float), labels)
    write_roc_csv(out / "roc.csv", roc)

    inputs = [Path(args.scores), truth_path]
    diagnostics = {"auc": roc.auc, "cells": int(len(scores))}
    if args.posterior:
        frame = pd.read_csv(args.posterior)
        column = f"p{INFECTIOUS}"
        if not {"t", column}.issubset(frame.columns):
            raise DataFormatError("posterior file lacks t or probability columns", path=str(args.posterior))
        expected = frame.groupby("t")[column].sum().reindex(np.arange(1, T + 1), fill_value=0.0).to_numpy()
        write_counts_csv(out / "counts.csv", expected * args.scale, collective_curve(truth))
        inputs.append(Path(args.posterior))

    manifest = RunManifest(
        command="eval",
        arguments=_arguments(args),
        input_hashes=_hash_inputs(inputs),
        wall_time=time.perf_counter() - started,
        diagnostics=diagnostics,
    )
    manifest.write(out)
    print(f"AUC = {roc.auc:.4f}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    """运行时间扩展性基准"""
    started = time.perf_counter()
    out = Path(args.out)
    try:
        fixture = BenchmarkFixture(
            horizon=args.t, contact_density=args.density, repeats=args.repeats, seed=args.seed or 0
        )
        spec = BaselineSpec(sweeps=args.sweeps, particles=args.particles, timed_sweeps=args.timed_sweeps)
    except ValueError as e:
        raise UsageError(str(e)) from e
    result = scaling_benchmark(args.sizes, fixture, args.iters or 10, baselines=args.baselines or (), spec=spec)
    write_bench_csv(out / "bench.csv", result)
    manifest = RunManifest(
        command="bench",
        arguments=_arguments(args),
        seeds={"fixture": fixture.seed},
        wall_time=time.perf_counter() - started,
        diagnostics={
            "slope": result.slope,
            "intercept": result.intercept,
            "r_squared": result.r_squared,
            "ratios": result.ratios,
            "speedups": result.speedups(),
        },
    )
    manifest.write(out)
    print(f"timed sizes {result.sizes}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="kinetic-vi",
        description="Variational inference for stochastic kinetic models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
examples:
  # simulate a synthetic SIS outbreak
  kinetic-vi simulate --m 50 --t 100 --seed 1 --out data/

  # smoothing task with variational inference
  kinetic-vi infer --dir data/ --method viskm --task smooth --out runs/vi/

  # ROC and collective counts
  kinetic-vi eval --scores runs/vi/scores.csv --truth data/truth.jsonl --posterior runs/vi/posterior.csv --out runs/vi/

  # learn rate constants
  kinetic-vi learn --dir data/ --init-c recovery=0.2 contact=0.02 outside=0.01 --out runs/learn/

  # runtime scaling
  kinetic-vi bench --sizes 15 30 60 --iters 10 --out runs/bench/

  # VI against Gibbs-1000 and PF-1000 at M = 60
  kinetic-vi bench --sizes 60 --baselines gibbs pf --out runs/speed/
        """,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (-vv for debug)")
    parser.add_argument("--log-level", help="explicit log level (overrides -v)")
    parser.add_argument("--threads", type=int, help="worker threads for VI sweeps (SKM_THREADS overrides)")
    parser.add_argument("--config", help="JSON config file with vi/sampler/learn/mask sections")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--m", type=int, default=50, help="number of individuals")
    p.add_argument("--t", type=int, default=100, help="number of timesteps")
    p.add_argument("--density", type=float, default=2.0, help="expected contacts per individual per step")
    p.add_argument("--c1", type=float, default=0.1, help="recovery rate")
    p.add_argument("--c2", type=float, default=0.05, help="per-contact infection rate")
    p.add_argument("--c3", type=float, default=0.005, help="outside infection rate")
    p.add_argument("--sens", type=float, default=0.95, help="symptom sensitivity")
    p.add_argument("--spec", type=float, default=0.95, help="symptom specificity")
    p.add_argument("--prevalence", type=float, default=0.1, help="initial infection probability")
    p.add_argument("--strict", action="store_true", help="sample the compiled per-individual event model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("infer", help="run an inference method on a dataset")
    p.add_argument("--dir", required=True, help="dataset directory")
    p.add_argument("--method", choices=sorted(METHODS), default="viskm")
    p.add_argument("--task", choices=[t.value for t in MaskTask], help="mask observations for this task")
    p.add_argument("--mask-fraction", type=float, help="task-specific fraction (see MaskSpec)")
    p.add_argument("--iters", type=int, help="VI iteration cap")
    p.add_argument("--tol", type=float, help="VI convergence tolerance")
    p.add_argument("--damping", type=float, help="VI message damping")
    p.add_argument("--sweeps", type=int, help="Gibbs sweeps")
    p.add_argument("--particles", type=int, help="particle count")
    p.add_argument("--seed", type=int, help="mask and sampler seed")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("learn", help="learn rate constants")
    p.add_argument("--dir", required=True, help="dataset directory")
    p.add_argument("--init-c", nargs="+", metavar="GROUP=VALUE", help="initial rate per group")
    p.add_argument("--max-em-iters", type=int)
    p.add_argument("--iters", type=int, help="VI iteration cap per EM step")
    p.add_argument("--tol", type=float, help="VI convergence tolerance")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_learn)

    p = sub.add_parser("eval", help="ROC and collective counts")
    p.add_argument("--scores", required=True, help="scores.csv from infer")
    p.add_argument("--truth", required=True, help="truth.jsonl")
    p.add_argument("--posterior", help="posterior.csv; adds counts.csv")
    p.add_argument("--scale", type=float, default=1.0, help="multiplier for the expected counts")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="runtime scaling benchmark")
    p.add_argument("--sizes", type=int, nargs="+", default=[15, 30, 60])
    p.add_argument("--iters", type=int, default=10, help="pinned VI iterations")
    p.add_argument("--t", type=int, default=100)
    p.add_argument("--density", type=float, default=2.0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--baselines", nargs="+", choices=sorted(BASELINE_RUNNERS), help="also time these samplers against a full VI run")
    p.add_argument("--sweeps", type=int, default=1000, help="Gibbs sweeps to price")
    p.add_argument("--particles", type=int, default=1000, help="PF particle count")
    p.add_argument("--timed-sweeps", type=int, default=20, help="Gibbs sweeps actually run, scaled to --sweeps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return e.exit_code

    level = args.log_level or {0: None, 1: "INFO"}.get(args.verbose, "DEBUG")
    try:
        configure_logging(level)
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return UsageError.exit_code
    try:
        return args.handler(args)
    except SkmError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} crashed: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
