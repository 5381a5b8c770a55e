"""Devices, instances and datasets: encoding, synthetic generation, CSV I/O, folds."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dynamics
from .dynamics import SIGNALS, WhiteBoxParams
from .solver import TimeGrid, simulate

CSV_COLUMNS = ("instance_id", "device", "C6", "C12", "time") + SIGNALS

DEFAULT_BLOCKS = (("Pcat", "RS100", "R33"), ("Pcat", "S32", "S175", "S34"))
DEFAULT_DEVICES = ("Pcat-Pcat", "RS100-S32", "RS100-S34", "R33-S32", "R33-S175", "R33-S34")
DEFAULT_C6 = (0.0, 1.0, 4.0, 16.0, 64.0, 256.0)
DEFAULT_C12 = (0.0, 1.0, 4.0, 16.0, 64.0, 256.0)


class DataError(ValueError):
    """Invalid dataset content; the message names the row and column where known."""


# ---------------------------------------------------------------------------
# devices


@dataclass(frozen=True)
class CassetteCatalog:
    """Component names per slot; a device picks one component from each block."""

    blocks: tuple[tuple[str, ...], ...] = DEFAULT_BLOCKS
    block_names: tuple[str, ...] = ("R", "S")

    def __post_init__(self):
        blocks = tuple(tuple(b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "block_names", tuple(self.block_names))
        if len(blocks) != len(self.block_names):
            raise ValueError("need one block name per block")
        for name, block in zip(self.block_names, blocks):
            if not block:
                raise ValueError(f"block {name} is empty")
            if len(set(block)) != len(block):
                raise ValueError(f"block {name} has duplicate component names")
            for comp in block:
                if "-" in comp or not comp.strip():
                    raise ValueError(f"invalid component name {comp!r} in block {name}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(b) for b in self.blocks)

    @property
    def width(self) -> int:
        return sum(self.sizes)

    def labels(self) -> list[str]:
        """One label per group-code entry, e.g. ``R:Pcat``."""
        return [f"{n}:{c}" for n, block in zip(self.block_names, self.blocks) for c in block]

    def offsets(self) -> list[int]:
        return [int(x) for x in np.cumsum((0,) + self.sizes[:-1])]

    def devices(self) -> list[str]:
        """Every device name the catalog can express."""
        names = [""]
        for block in self.blocks:
            names = [f"{n}-{c}" if n else c for n in names for c in block]
        return names

    def to_dict(self) -> dict:
        return {n: list(b) for n, b in zip(self.block_names, self.blocks)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[str]]) -> "CassetteCatalog":
        return cls(blocks=tuple(tuple(v) for v in d.values()), block_names=tuple(d.keys()))


def parse_device(name: str, catalog: CassetteCatalog) -> tuple[str, ...]:
    parts = tuple(str(name).split("-"))
    if len(parts) != len(catalog.blocks):
        raise ValueError(f"device name {name!r} must have {len(catalog.blocks)} '-'-separated components")
    return parts


def encode_device(components: str | Sequence[str], catalog: CassetteCatalog) -> np.ndarray:
    """Multi-hot group code: concatenated one-hot vectors, one per block."""
    if isinstance(components, str):
        components = parse_device(components, catalog)
    if len(components) != len(catalog.blocks):
        raise ValueError(f"expected {len(catalog.blocks)} components, got {len(components)}")
    g = np.zeros(catalog.width)
    for offset, bname, block, comp in zip(catalog.offsets(), catalog.block_names, catalog.blocks, components):
        if comp not in block:
            raise ValueError(f"unknown component {comp!r} for block {bname}; valid names: {', '.join(block)}")
        g[offset + block.index(comp)] = 1.0
    return g


def decode_device(g: np.ndarray, catalog: CassetteCatalog) -> str:
    g = np.asarray(g)
    parts = []
    for offset, block in zip(catalog.offsets(), catalog.blocks):
        parts.append(block[int(np.argmax(g[offset:offset + len(block)]))])
    return "-".join(parts)


# ---------------------------------------------------------------------------
# instances and datasets


@dataclass
class Instance:
    id: str
    device: str
    g: np.ndarray
    u: np.ndarray       # (C6, C12) in nM
    times: np.ndarray   # (T,)
    Y: np.ndarray       # (4, T): OD, RFP, YFP, CFP

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64).reshape(2)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.shape != (len(SIGNALS), self.times.size):
            raise DataError(f"instance {self.id}: Y has shape {self.Y.shape}, expected {(len(SIGNALS), self.times.size)}")
        if np.any(self.u < 0):
            raise DataError(f"instance {self.id}: treatments must be non-negative, got {self.u}")
        if np.any(np.diff(self.times) <= 0):
            raise DataError(f"instance {self.id}: times must be strictly increasing")


@dataclass
class Dataset:
    instances: list[Instance]
    catalog: CassetteCatalog = field(default_factory=CassetteCatalog)
    folds: np.ndarray | None = None        # fold index per instance
    fold_mode: str | None = None           # "crossval" or "holdout:<device>"
    truth: dict | None = None              # ground truth of synthetic data

    def __post_init__(self):
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise DataError("instance ids must be unique")
        for inst in self.instances:
            expected = encode_device(inst.device, self.catalog)
            if not np.array_equal(expected, inst.g):
                raise DataError(f"instance {inst.id}: group code does not match device {inst.device}")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def ids(self) -> list[str]:
        return [inst.id for inst in self.instances]

    @property
    def devices(self) -> list[str]:
        return sorted({inst.device for inst in self.instances})

    def subset(self, indices) -> list[Instance]:
        return [self.instances[i] for i in indices]

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, test) instance indices for ``fold``."""
        if self.folds is None:
            raise DataError("no folds assigned")
        test = np.flatnonzero(self.folds == fold)
        train = np.flatnonzero(self.folds != fold)
        return train, test

    def scales(self, indices=None) -> np.ndarray:
        return signal_scales(self.instances if indices is None else self.subset(indices))


def signal_scales(instances: Sequence[Instance]) -> np.ndarray:
    """Per-signal maximum absolute value, used to normalise encoder inputs."""
    if not instances:
        return np.ones(len(SIGNALS))
    peak = np.max([np.abs(inst.Y).max(axis=1) for inst in instances], axis=0)
    return np.where(peak > 0, peak, 1.0)


@dataclass
class Batch:
    """Instances stacked for one objective evaluation (all share one time grid)."""

    ids: list[str]
    Y: np.ndarray        # (B, 4, T)
    u: np.ndarray        # (B, 2)
    g: np.ndarray        # (B, C)
    times: np.ndarray    # (T,)

    @classmethod
    def from_instances(cls, instances: Sequence[Instance]) -> "Batch":
        if not instances:
            raise DataError("empty batch")
        times = instances[0].times
        for inst in instances[1:]:
            if inst.times.shape != times.shape or not np.array_equal(inst.times, times):
                raise DataError(f"instance {inst.id} uses a different time grid; batches need a shared grid")
        return cls(
            ids=[inst.id for inst in instances],
            Y=np.stack([inst.Y for inst in instances]),
            u=np.stack([inst.u for inst in instances]),
            g=np.stack([inst.g for inst in instances]),
            times=times,
        )

    @property
    def size(self) -> int:
        return len(self.ids)

    def repeat(self, K: int) -> "Batch":
        """Each instance repeated K times in a row (instance-major)."""
        return Batch(
            ids=[i for i in self.ids for _ in range(K)],
            Y=np.repeat(self.Y, K, axis=0),
            u=np.repeat(self.u, K, axis=0),
            g=np.repeat(self.g, K, axis=0),
            times=self.times,
        )

    def Y_columns(self, K: int = 1) -> np.ndarray:
        """Observations as (4, T, B*K), matching decoder output layout."""
        return np.repeat(self.Y, K, axis=0).transpose(1, 2, 0)

    def first_od(self, window: int = 1, floor: float = 1e-3) -> np.ndarray:
        """Initial density: mean of the first ``window`` OD readings, floored."""
        return np.maximum(self.Y[:, 0, :window].mean(axis=1), floor)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticTruth:
    """Ground-truth white-box parameters for the generator.

    ``population`` holds every population parameter except the noise scales
    (Hill coefficients and leak fractions as plain values).  ``cassettes``
    maps a group parameter to per-component values; ``a_R`` follows the
    R-block component and ``a_S`` the S-block component.  Individual
    parameters are log-normal around ``individual[name] = (median, log_sd)``;
    the initial density is uniform on ``c0``.
    """

    population: dict = field(default_factory=lambda: {
        "d_RFP": 0.1, "d_CFP": 0.2, "d_YFP": 0.2, "d_R": 0.3, "d_S": 0.3,
        "a_CFP": 2.0, "a_YFP": 2.0, "a_480": 0.05, "a_530": 0.05,
        "K_R6": 0.1, "K_R12": 0.002, "K_S6": 0.002, "K_S12": 0.1,
        "n_R": 1.5, "n_S": 1.5,
        "K_GR76": 0.05, "K_GS76": 0.002, "K_GR81": 0.002, "K_GS81": 0.05,
        "eps76": 0.05, "eps81": 0.05,
    })
    cassettes: dict = field(default_factory=lambda: {
        "a_R": {"Pcat": 0.5, "RS100": 1.0, "R33": 2.0},
        "a_S": {"Pcat": 0.5, "S32": 0.8, "S175": 1.5, "S34": 3.0},
    })
    individual: dict = field(default_factory=lambda: {
        "r": (1.0, 0.1), "K": (1.0, 0.1), "t_lag": (3.0, 0.1), "r_c": (1.0, 0.1),
    })
    c0: tuple = (0.05, 0.1)

    def group_values(self, device: str, catalog: CassetteCatalog) -> dict:
        comps = parse_device(device, catalog)
        out = {}
        for name, table in self.cassettes.items():
            slot = 0 if name == "a_R" else 1
            if comps[slot] not in table:
                raise ValueError(f"no true {name} for component {comps[slot]!r}")
            out[name] = float(table[comps[slot]])
        return out

    def to_dict(self) -> dict:
        return {
            "population": dict(self.population),
            "cassettes": {k: dict(v) for k, v in self.cassettes.items()},
            "individual": {k: list(v) for k, v in self.individual.items()},
            "c0": list(self.c0),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticTruth":
        base = cls()
        unknown = set(d) - {"population", "cassettes", "individual", "c0"}
        if unknown:
            raise ValueError(f"unknown truth keys: {sorted(unknown)}")
        pop = dict(base.population)
        pop.update(d.get("population", {}))
        cas = {k: dict(v) for k, v in base.cassettes.items()}
        for k, v in d.get("cassettes", {}).items():
            cas.setdefault(k, {}).update(v)
        ind = dict(base.individual)
        ind.update({k: tuple(v) for k, v in d.get("individual", {}).items()})
        return cls(pop, cas, ind, tuple(d.get("c0", base.c0)))


def simulate_noiseless(params: Mapping[str, object], u, times, c0, substeps: int) -> np.ndarray:
    """Observer output of white-box simulations with plain parameter values.

    Parameters, ``c0`` and the two rows of ``u`` may be scalars or arrays of
    shape (N,); the result is (4, T) or (4, T, N) accordingly.
    """
    values = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    for s in SIGNALS:
        values.setdefault(f"sigma_{s}", np.array(1.0))
    p = WhiteBoxParams(values)
    p.validate()
    u = np.asarray(u, dtype=np.float64)
    c0 = np.asarray(c0, dtype=np.float64)
    batched = c0.ndim == 1
    if not batched:
        c0 = c0.reshape(1)
        u = u.reshape(2, 1)
        values = {k: v.reshape(-1) if v.ndim else v for k, v in values.items()}
        p = WhiteBoxParams(values)
    rhs = dynamics.make_whitebox_rhs(p, (u[0], u[1]))
    x0 = dynamics.whitebox_initial_state(c0)
    X = simulate(rhs, x0, TimeGrid(np.asarray(times, dtype=np.float64), substeps))
    M = dynamics.observe(X, "whitebox").value
    return M if batched else M[..., 0]


def _stack_params(records: Sequence[Mapping]) -> dict:
    return {k: np.array([r[k] for r in records]) for k in records[0]}


def treatment_grid(C6: Sequence[float] = DEFAULT_C6, C12: Sequence[float] = DEFAULT_C12) -> list[tuple[float, float]]:
    """Two dilution series: C6 with C12 = 0, then C12 with C6 = 0."""
    return [(float(c), 0.0) for c in C6] + [(0.0, float(c)) for c in C12]


def synth_generate(catalog: CassetteCatalog, devices: Sequence[str], treatments: Sequence[tuple[float, float]],
                   truth: SyntheticTruth, noise: float | Mapping[str, float], T: int = 50, seed: int = 0,
                   t_end: float = 24.0, substeps: int = 8) -> Dataset:
    """Simulate every (device, treatment) pair and add Gaussian noise.

    ``noise`` is either a fraction of each signal's noiseless maximum over the
    whole design, or a mapping from signal name to an absolute std.  Per
    instance ground truth is stored in ``dataset.truth``.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, float(t_end), int(T))
    records = []
    for device in devices:
        g = encode_device(device, catalog)
        group = truth.group_values(device, catalog)
        for j, (c6, c12) in enumerate(treatments):
            ind = {k: float(med * math.exp(sd * rng.standard_normal())) for k, (med, sd) in truth.individual.items()}
            c0 = float(rng.uniform(*truth.c0))
            params = {**truth.population, **group, **ind}
            records.append({"id": f"{device}_{j:02d}", "device": device, "g": g, "u": (c6, c12),
                            "params": params, "c0": c0})
    clean = []
    if records:
        M = simulate_noiseless(_stack_params([r["params"] for r in records]),
                               np.array([r["u"] for r in records]).T,
                               times, np.array([r["c0"] for r in records]), substeps)
        clean = [M[..., i] for i in range(len(records))]

    if isinstance(noise, Mapping):
        missing = [s for s in SIGNALS if s not in noise]
        if missing:
            raise ValueError(f"noise std missing for signals {missing}")
        sigma = np.array([float(noise[s]) for s in SIGNALS])
    else:
        peak = np.max([np.abs(Y).max(axis=1) for Y in clean], axis=0) if clean else np.ones(len(SIGNALS))
        sigma = float(noise) * peak
    if np.any(sigma < 0):
        raise ValueError("noise std must be non-negative")

    instances = []
    for rec, Y in zip(records, clean):
        noisy = Y + sigma[:, None] * rng.standard_normal(Y.shape)
        instances.append(Instance(rec["id"], rec["device"], rec["g"], rec["u"], times, noisy))

    sidecar = {
        "seed": int(seed),
        "substeps": int(substeps),
        "noise_std": {s: float(v) for s, v in zip(SIGNALS, sigma)},
        "truth": truth.to_dict(),
        "devices": {d: truth.group_values(d, catalog) for d in devices},
        "instances": {r["id"]: {"c0": r["c0"], **{k: r["params"][k] for k in truth.individual}} for r in records},
    }
    return Dataset(instances, catalog, truth=sidecar)


def resimulate(dataset: Dataset) -> np.ndarray:
    """Noiseless signals (N, 4, T) of a synthetic dataset from its stored ground truth."""
    side = dataset.truth
    if side is None:
        raise DataError("dataset carries no ground truth")
    if not dataset.instances:
        return np.zeros((0, len(SIGNALS), 0))
    records = []
    for inst in dataset.instances:
        rec = side["instances"][inst.id]
        params = {**side["truth"]["population"], **side["devices"][inst.device]}
        params.update({k: v for k, v in rec.items() if k != "c0"})
        records.append(params)
    c0 = np.array([side["instances"][inst.id]["c0"] for inst in dataset.instances])
    u = np.array([inst.u for inst in dataset.instances]).T
    M = simulate_noiseless(_stack_params(records), u, dataset.instances[0].times, c0, side["substeps"])
    return M.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# serialisation


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the long-format CSV (one row per instance and time point)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for inst in dataset.instances:
            for t in range(inst.times.size):
                w.writerow([inst.id, inst.device, _fmt(inst.u[0]), _fmt(inst.u[1]), _fmt(inst.times[t]),
                            *(_fmt(v) for v in inst.Y[:, t])])


def save_truth(dataset: Dataset, path: str | Path) -> None:
    if dataset.truth is None:
        raise DataError("dataset carries no ground truth")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataset.truth, indent=2, sort_keys=True) + "\n")


def load_truth(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def load_dataset(path: str | Path, catalog: CassetteCatalog | None = None) -> Dataset:
    """Read the long-format CSV; errors name the offending line and column."""
    catalog = catalog or CassetteCatalog()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    rows: dict[str, dict] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise DataError(f"{path}: line 1: header must be {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise DataError(f"{path}: line {lineno}: expected {len(CSV_COLUMNS)} columns, got {len(row)}")
            iid, device = row[0].strip(), row[1].strip()
            if not iid:
                raise DataError(f"{path}: line {lineno}, column instance_id: empty")
            try:
                encode_device(device, catalog)
            except ValueError as err:
                raise DataError(f"{path}: line {lineno}, column device: {err}") from None
            nums = []
            for col, text in zip(CSV_COLUMNS[2:], row[2:]):
                try:
                    val = float(text)
                except ValueError:
                    raise DataError(f"{path}: line {lineno}, column {col}: not a number: {text!r}") from None
                if not math.isfinite(val):
                    raise DataError(f"{path}: line {lineno}, column {col}: non-finite value")
                nums.append(val)
            c6, c12, t, *y = nums
            if c6 < 0 or c12 < 0:
                raise DataError(f"{path}: line {lineno}, column {'C6' if c6 < 0 else 'C12'}: negative concentration")
            rec = rows.setdefault(iid, {"device": device, "u": (c6, c12), "times": [], "Y": [], "line": lineno})
            if rec["device"] != device:
                raise DataError(f"{path}: line {lineno}, column device: instance {iid} changes device")
            if rec["u"] != (c6, c12):
                raise DataError(f"{path}: line {lineno}, column C6/C12: instance {iid} changes treatment")
            if rec["times"] and t <= rec["times"][-1]:
                raise DataError(f"{path}: line {lineno}, column time: times of instance {iid} must increase")
            rec["times"].append(t)
            rec["Y"].append(y)
    instances = [
        Instance(iid, r["device"], encode_device(r["device"], catalog), r["u"], r["times"], np.array(r["Y"]).T)
        for iid, r in rows.items()
    ]
    return Dataset(instances, catalog)


# ---------------------------------------------------------------------------
# folds


def assign_folds(dataset: Dataset, n_folds: int = 4, mode: str = "crossval", seed: int = 0,
                 device: str | None = None) -> Dataset:
    """Return a copy of ``dataset`` with fold labels.

    ``crossval``: instances of each device are shuffled and dealt round-robin,
    continuing across devices, so folds are balanced and stratified.
    ``holdout``: instances of ``device`` get fold 1 (test), all others fold 0.
    """
    n = len(dataset)
    if mode == "crossval":
        if n_folds < 2:
            raise ValueError(f"n_folds must be >= 2, got {n_folds}")
        if n < n_folds:
            raise ValueError(f"cannot split {n} instances into {n_folds} folds")
        rng = np.random.default_rng(seed)
        folds = np.empty(n, dtype=np.int64)
        pos = 0
        for dev in dataset.devices:
            idx = np.array([i for i, inst in enumerate(dataset.instances) if inst.device == dev])
            for i in rng.permutation(idx):
                folds[i] = pos % n_folds
                pos += 1
        label = "crossval"
    elif mode == "holdout":
        if device is None:
            raise ValueError("holdout mode needs a device name")
        check_holdout(dataset, device)
        folds = np.array([1 if inst.device == device else 0 for inst in dataset.instances], dtype=np.int64)
        label = f"holdout:{device}"
    else:
        raise ValueError(f"unknown fold mode {mode!r}")
    return Dataset(dataset.instances, dataset.catalog, folds, label, dataset.truth)


def check_holdout(dataset: Dataset, device: str) -> None:
    """Every component of the held-out device must appear in some training device."""
    comps = parse_device(device, dataset.catalog)
    encode_device(comps, dataset.catalog)
    if device not in dataset.devices:
        raise ValueError(f"device {device} has no instances in the dataset")
    training = [parse_device(d, dataset.catalog) for d in dataset.devices if d != device]
    if not training:
        raise ValueError("holding out the only device leaves nothing to train on")
    for slot, (bname, comp) in enumerate(zip(dataset.catalog.block_names, comps)):
        if not any(t[slot] == comp for t in training):
            raise ValueError(
                f"cannot hold out {device}: component {comp} of block {bname} never appears in a training device, "
                "so its contribution is not identifiable"
            )
