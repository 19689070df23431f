"""
Dataset files, observation masking and the synthetic generator
数据文件读写、观测掩码与合成数据生成

Every *.jsonl file starts with a header record {"M": .., "T": .., "S": ..}
followed by one JSON object per line. Timesteps are 1-based.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, StrictInt, ValidationError

from .config import MaskSpec, MaskTask
from .epidemic import NUM_STATES, ContactGraph, EpidemicParams, check_hazards, simulate
from .errors import DataFormatError
from .model import MISSING, TrajectoryBundle

CONTACTS_FILE = "contacts.jsonl"
IDS_FILE = "ids.jsonl"
OBSERVATIONS_FILE = "observations.jsonl"
TRUTH_FILE = "truth.jsonl"
LEDGER_FILE = "mask-ledger.jsonl"
PARAMS_FILE = "params.json"

PathLike = Union[str, Path]
ExternalId = Union[StrictInt, str]


class Header(BaseModel):
    """文件头"""
    model_config = ConfigDict(extra="forbid")

    M: int = Field(..., ge=0)
    T: int = Field(..., ge=0)
    S: int = Field(NUM_STATES, ge=1)


class ContactRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: StrictInt = Field(..., ge=1)
    u: ExternalId
    v: ExternalId


class IdRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m: StrictInt = Field(..., ge=0)
    id: ExternalId


class ObservationRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: StrictInt = Field(..., ge=1)
    m: ExternalId
    y: StrictInt = Field(..., ge=0)


class TruthRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: StrictInt = Field(..., ge=1)
    m: ExternalId
    x: StrictInt = Field(..., ge=0)


class LedgerRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: StrictInt = Field(..., ge=1)
    m: ExternalId


RecordT = TypeVar("RecordT", bound=BaseModel)


@dataclass
class ContactStats:
    """Counts gathered while loading a contact file."""
    path: str
    records: int = 0
    duplicates: int = 0
    edges: int = 0


@dataclass
class Dataset:
    """One simulated or loaded experiment directory."""
    contacts: ContactGraph
    observations: np.ndarray                 # T × M, MISSING where absent
    truth: Optional[np.ndarray] = None       # T × M
    params: Optional[EpidemicParams] = None
    stats: Optional[ContactStats] = None


@dataclass
class MaskResult:
    """Masked observations plus the evaluation ledger of hidden cells."""
    observations: np.ndarray
    ledger: np.ndarray                       # K × 2 rows of (t, m), t 1-based
    task: MaskTask
    query_steps: List[int] = field(default_factory=list)
    kept_individuals: List[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Low-level JSONL
# ---------------------------------------------------------------------------

def _read_jsonl(path: PathLike, model: Type[RecordT]) -> Tuple[Optional[Header], Iterator[Tuple[int, RecordT]]]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    def parse(lineno: int, text: str, kind: Type[BaseModel]):
        try:
            return kind.model_validate(json.loads(text))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"invalid JSON: {e.msg}", path=str(path), line=lineno) from e
        except ValidationError as e:
            raise DataFormatError(f"invalid record: {e.errors()[0]['msg']}", path=str(path), line=lineno) from e

    numbered = [(i, text) for i, text in enumerate(lines, start=1) if text.strip()]
    if not numbered:
        return None, iter(())
    first_no, first = numbered[0]
    header = parse(first_no, first, Header)

    def records():
        for lineno, text in numbered[1:]:
            yield lineno, parse(lineno, text, model)

    return header, records()


def _write_jsonl(path: PathLike, header: Header, records: Sequence[Dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(header.model_dump_json() + "\n")
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def _external(ids: Optional[Sequence[str]], m: int) -> ExternalId:
    return ids[m] if ids is not None else int(m)


def _resolver(path: PathLike, header: Header, ids: Optional[Mapping[str, int]]):
    def resolve(lineno: int, m: ExternalId) -> int:
        if ids is not None:
            if str(m) not in ids:
                raise DataFormatError(f"unknown individual id {m!r}", path=str(path), line=lineno)
            return ids[str(m)]
        if not isinstance(m, int) or not 0 <= m < header.M:
            raise DataFormatError(f"individual {m!r} outside 0..{header.M - 1}", path=str(path), line=lineno)
        return m
    return resolve


def _check_t(path: PathLike, header: Header, lineno: int, t: int) -> None:
    if t > header.T:
        raise DataFormatError(f"t={t} exceeds the declared horizon {header.T}", path=str(path), line=lineno)


# ---------------------------------------------------------------------------
# Contacts and ids
# ---------------------------------------------------------------------------

def write_ids(path: PathLike, ids: Sequence[str], horizon: int = 0, num_states: int = NUM_STATES) -> None:
    header = Header(M=len(ids), T=horizon, S=num_states)
    _write_jsonl(path, header, [{"m": m, "id": ident} for m, ident in enumerate(ids)])


def load_ids(path: PathLike) -> Tuple[str, ...]:
    """Dense index -> external id table."""
    header, records = _read_jsonl(path, IdRecord)
    if header is None:
        return ()
    table: Dict[int, str] = {}
    for lineno, rec in records:
        if rec.m >= header.M or rec.m in table:
            raise DataFormatError(f"bad or repeated index {rec.m}", path=str(path), line=lineno)
        table[rec.m] = str(rec.id)
    if len(table) != header.M:
        raise DataFormatError(f"expected {header.M} ids, found {len(table)}", path=str(path))
    return tuple(table[m] for m in range(header.M))


def read_contacts(path: PathLike, ids: Optional[Sequence[str]] = None) -> Tuple[ContactGraph, ContactStats]:
    """Parse a contact file into a dense-indexed graph and a load report.

    Args:
        path: contacts.jsonl
        ids: persisted id table; without it ids are numbered by first appearance

    Returns:
        (ContactGraph, ContactStats)
    """
    stats = ContactStats(path=str(path))
    header, records = _read_jsonl(path, ContactRecord)
    if header is None:
        return ContactGraph(0, 0, {}), stats

    index: Dict[str, int] = {ident: m for m, ident in enumerate(ids)} if ids is not None else {}
    order: List[str] = list(ids) if ids is not None else []
    seen = set()
    edges: List[Tuple[int, int, int]] = []
    for lineno, rec in records:
        stats.records += 1
        _check_t(path, header, lineno, rec.t)
        pair = []
        for raw in (rec.u, rec.v):
            key = str(raw)
            if key not in index:
                if ids is not None:
                    raise DataFormatError(f"unknown individual id {raw!r}", path=str(path), line=lineno)
                index[key] = len(order)
                order.append(key)
            pair.append(index[key])
        u, v = pair
        if u == v:
            raise DataFormatError(f"self-loop on {rec.u!r}", path=str(path), line=lineno)
        edge = (rec.t, min(u, v), max(u, v))
        if edge in seen:
            stats.duplicates += 1
            continue
        seen.add(edge)
        edges.append(edge)

    if len(order) > header.M:
        raise DataFormatError(f"{len(order)} individuals exceed the declared M={header.M}", path=str(path))
    filler = 0
    while len(order) < header.M:
        while str(filler) in index:
            filler += 1
        index[str(filler)] = len(order)
        order.append(str(filler))
    stats.edges = len(edges)
    if stats.duplicates:
        logger.warning(f"{path}: dropped {stats.duplicates} duplicate edges")
    graph = ContactGraph.from_edges(header.M, header.T, edges, ids=order)
    return graph, stats


def load_contacts(path: PathLike, ids: Optional[Sequence[str]] = None) -> ContactGraph:
    return read_contacts(path, ids)[0]


def write_contacts(path: PathLike, graph: ContactGraph, num_states: int = NUM_STATES) -> None:
    header = Header(M=graph.num_individuals, T=graph.horizon, S=num_states)
    records = []
    for t in sorted(graph.edges_at):
        for u, v in graph.edge_array(t):
            records.append({"t": t, "u": _external(graph.ids, u), "v": _external(graph.ids, v)})
    _write_jsonl(path, header, records)


# ---------------------------------------------------------------------------
# Observation-like grids
# ---------------------------------------------------------------------------

def _load_grid(
    path: PathLike,
    model: Type[BaseModel],
    value_field: str,
    ids: Optional[Mapping[str, int]],
    shape: Optional[Tuple[int, int]],
    complete: bool,
) -> Tuple[np.ndarray, Header]:
    header, records = _read_jsonl(path, model)
    if header is None:
        if shape is None:
            return np.full((0, 0), MISSING, dtype=np.int64), Header(M=0, T=0)
        header = Header(M=shape[1], T=shape[0])
    elif shape is not None and (header.T, header.M) != tuple(shape):
        raise DataFormatError(f"header declares T={header.T}, M={header.M}, expected {shape}", path=str(path))

    grid = np.full((header.T, header.M), MISSING, dtype=np.int64)
    resolve = _resolver(path, header, ids)
    for lineno, rec in records:
        _check_t(path, header, lineno, rec.t)
        m = resolve(lineno, rec.m)
        value = getattr(rec, value_field)
        if value >= header.S:
            raise DataFormatError(f"{value_field}={value} outside 0..{header.S - 1}", path=str(path), line=lineno)
        if grid[rec.t - 1, m] != MISSING:
            raise DataFormatError(f"duplicate record for t={rec.t}, m={rec.m!r}", path=str(path), line=lineno)
        grid[rec.t - 1, m] = value
    if complete and (grid == MISSING).any():
        t, m = np.argwhere(grid == MISSING)[0]
        raise DataFormatError(f"missing value for t={t + 1}, m={m}", path=str(path))
    return grid, header


def _write_grid(
    path: PathLike,
    grid: np.ndarray,
    value_field: str,
    num_states: int,
    ids: Optional[Sequence[str]],
) -> None:
    grid = np.asarray(grid)
    T, M = grid.shape
    records = [
        {"t": int(t) + 1, "m": _external(ids, m), value_field: int(grid[t, m])}
        for t, m in zip(*np.nonzero(grid != MISSING))
    ]
    _write_jsonl(path, Header(M=M, T=T, S=num_states), records)


def _id_index(ids: Optional[Sequence[str]]) -> Optional[Dict[str, int]]:
    return {ident: m for m, ident in enumerate(ids)} if ids is not None else None


def load_observations(
    path: PathLike,
    ids: Optional[Sequence[str]] = None,
    shape: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """T × M observation grid; absent (t, m) records are MISSING."""
    return _load_grid(path, ObservationRecord, "y", _id_index(ids), shape, complete=False)[0]


def write_observations(
    path: PathLike,
    observations: np.ndarray,
    num_states: int = NUM_STATES,
    ids: Optional[Sequence[str]] = None,
) -> None:
    _write_grid(path, observations, "y", num_states, ids)


def load_truth(
    path: PathLike,
    ids: Optional[Sequence[str]] = None,
    shape: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """Complete T × M hidden-state grid."""
    return _load_grid(path, TruthRecord, "x", _id_index(ids), shape, complete=True)[0]


def write_truth(
    path: PathLike,
    states: np.ndarray,
    num_states: int = NUM_STATES,
    ids: Optional[Sequence[str]] = None,
) -> None:
    _write_grid(path, states, "x", num_states, ids)


def write_ledger(
    path: PathLike,
    ledger: np.ndarray,
    shape: Tuple[int, int],
    num_states: int = NUM_STATES,
    ids: Optional[Sequence[str]] = None,
) -> None:
    T, M = shape
    records = [{"t": int(t), "m": _external(ids, int(m))} for t, m in np.asarray(ledger).reshape(-1, 2)]
    _write_jsonl(path, Header(M=M, T=T, S=num_states), records)


def load_ledger(path: PathLike, ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """K × 2 array of hidden (t, m) cells, t 1-based."""
    header, records = _read_jsonl(path, LedgerRecord)
    if header is None:
        return np.zeros((0, 2), dtype=np.int64)
    resolve = _resolver(path, header, _id_index(ids))
    rows = []
    for lineno, rec in records:
        _check_t(path, header, lineno, rec.t)
        rows.append((rec.t, resolve(lineno, rec.m)))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def write_params(path: PathLike, params: EpidemicParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(params.model_dump_json(indent=2))


def load_params(path: PathLike) -> EpidemicParams:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return EpidemicParams.model_validate_json(f.read())
    except ValidationError as e:
        raise DataFormatError(f"invalid epidemic parameters: {e.errors()[0]['msg']}", path=str(path)) from e


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def write_dataset(
    directory: PathLike,
    contacts: ContactGraph,
    bundle: TrajectoryBundle,
    params: Optional[EpidemicParams] = None,
) -> Dict[str, Path]:
    """Write contacts, ids, observations, truth and params; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T = contacts.horizon
    ids = contacts.ids or tuple(str(m) for m in range(contacts.num_individuals))
    paths = {
        "contacts": directory / CONTACTS_FILE,
        "ids": directory / IDS_FILE,
        "observations": directory / OBSERVATIONS_FILE,
        "truth": directory / TRUTH_FILE,
    }
    write_contacts(paths["contacts"], contacts)
    write_ids(paths["ids"], ids, horizon=T)
    write_observations(paths["observations"], bundle.observations, ids=contacts.ids)
    write_truth(paths["truth"], bundle.states, ids=contacts.ids)
    if params is not None:
        paths["params"] = directory / PARAMS_FILE
        write_params(paths["params"], params)
    return paths


def load_dataset(directory: PathLike) -> Dataset:
    """Read a directory written by write_dataset; truth and params are optional."""
    directory = Path(directory)
    ids_path = directory / IDS_FILE
    ids = load_ids(ids_path) if ids_path.exists() else None
    contacts, stats = read_contacts(directory / CONTACTS_FILE, ids)
    shape = (contacts.horizon, contacts.num_individuals)
    observations = load_observations(directory / OBSERVATIONS_FILE, contacts.ids if ids else None, shape)
    truth_path = directory / TRUTH_FILE
    truth = load_truth(truth_path, contacts.ids if ids else None, shape) if truth_path.exists() else None
    params_path = directory / PARAMS_FILE
    params = load_params(params_path) if params_path.exists() else None
    return Dataset(contacts=contacts, observations=observations, truth=truth, params=params, stats=stats)


# ---------------------------------------------------------------------------
# Masking and generation
# ---------------------------------------------------------------------------

def apply_mask(observations: np.ndarray, spec: MaskSpec) -> MaskResult:
    """Hide observation cells for one evaluation task.

    predict hides every observation at a random share of steps t >= 2;
    smooth hides per-individual intervals until the requested share of
    observed cells is gone; expand keeps only a random share of individuals.
    The ledger lists exactly the observed cells that were hidden.
    """
    obs = np.array(observations, dtype=np.int64, copy=True)
    T, M = obs.shape
    rng = np.random.default_rng(spec.seed)
    fraction = spec.effective_fraction
    observed = obs != MISSING
    hide = np.zeros_like(observed)
    result = MaskResult(observations=obs, ledger=np.zeros((0, 2), dtype=np.int64), task=spec.task)

    if spec.task == MaskTask.PREDICT:
        if T >= 2:
            count = max(1, int(round(fraction * (T - 1))))
            steps = np.sort(rng.choice(np.arange(1, T), size=min(count, T - 1), replace=False))
            hide[steps] = True
            result.query_steps = [int(s) + 1 for s in steps]
    elif spec.task == MaskTask.SMOOTH:
        target = int(round(fraction * observed.sum()))
        hidden = attempts = 0
        limit = 100 * max(1, T * M)
        while hidden < target and attempts < limit:
            attempts += 1
            m = int(rng.integers(M))
            length = int(rng.integers(spec.min_interval, spec.max_interval + 1))
            start = int(rng.integers(T))
            window = slice(start, start + length)
            hidden += int((~hide[window, m] & observed[window, m]).sum())
            hide[window, m] = True
    else:
        keep = int(round(fraction * M))
        kept = np.sort(rng.choice(M, size=keep, replace=False)) if keep else np.zeros(0, dtype=np.int64)
        hide[:, :] = True
        hide[:, kept] = False
        result.kept_individuals = [int(m) for m in kept]

    cells = hide & observed
    obs[cells] = MISSING
    t_idx, m_idx = np.nonzero(cells)
    result.ledger = np.stack([t_idx + 1, m_idx], axis=1).astype(np.int64)
    logger.debug(f"mask {spec.task.value}: hid {len(result.ledger)} of {int(observed.sum())} observed cells")
    return result


def random_contacts(
    num_individuals: int,
    horizon: int,
    contact_density: float,
    rng: np.random.Generator,
) -> ContactGraph:
    """Per-step Erdős–Rényi graphs with expected degree `contact_density`."""
    M, T = num_individuals, horizon
    if contact_density < 0:
        raise DataFormatError("contact density must be non-negative")
    p = min(1.0, contact_density / (M - 1)) if M > 1 else 0.0
    iu, ju = np.triu_indices(M, 1)
    draws = rng.random((T, len(iu))) < p
    edges_at = {
        t + 1: frozenset(zip(iu[draws[t]].tolist(), ju[draws[t]].tolist()))
        for t in range(T)
        if draws[t].any()
    }
    return ContactGraph(M, T, edges_at)


def generate_benchmark(
    num_individuals: int,
    horizon: int,
    contact_density: float,
    params: EpidemicParams,
    seed: int,
) -> Tuple[ContactGraph, TrajectoryBundle]:
    """Random dynamic contact graph plus a simulated outbreak, fully determined by seed."""
    rng = np.random.default_rng(seed)
    contacts = random_contacts(num_individuals, horizon, contact_density, rng)
    check_hazards(contacts, params, hint="lower the contact density or c2")
    bundle = simulate(contacts, params, seed=rng)
    logger.info(
        f"generated benchmark: M={num_individuals}, T={horizon}, "
        f"edges={contacts.num_edges}, infected cells={int(bundle.states.sum())}"
    )
    return contacts, bundle
