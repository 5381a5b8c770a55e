"""Adam training loop, checkpoints, evaluation, cross-validation and held-out devices."""

from __future__ import annotations

import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, config_from_dict
from .data import Batch, CassetteCatalog, Dataset, Instance, assign_folds, signal_scales
from .dynamics import SIGNALS
from .models import HierarchicalModel, build_model
from .objective import instance_objective, normalized_weights
from .solver import SolverError

log = logging.getLogger("hds.training")

# independent RNG streams derived from the run seed
STREAM_TRAIN, STREAM_EVAL, STREAM_FOLD, STREAM_HOLDOUT = 0, 1, 10, 100


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or an exploding gradient."""


class LeakageError(RuntimeError):
    """A test-set instance was about to contribute a gradient."""


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], moments, t: int,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update minimising the loss whose gradient is ``grads``.

    ``moments`` is ``(m, v)``, two dicts keyed like ``params``.  Returns new
    ``(params, (m, v))``; inputs are not modified.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m_old, v_old = moments
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * m_old[name] + (1.0 - beta1) * g
        v = beta2 * v_old[name] + (1.0 - beta2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, (new_m, new_v)


def zero_moments(params: Mapping[str, np.ndarray]):
    return ({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    epoch: int
    rng_state: dict
    config: dict
    config_hash: str
    scales: np.ndarray
    n_times: int
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def experiment(self) -> ExperimentConfig:
        return config_from_dict(self.config)

    def model(self) -> HierarchicalModel:
        cfg = self.experiment()
        return build_model(cfg.model, cfg.catalog, self.n_times, self.scales, cfg.encoder, cfg.prior)

    def save(self, path: str | Path) -> None:
        """Single self-describing ``.npz``: arrays plus a JSON ``meta`` entry."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for prefix, d in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for k, v in d.items():
                arrays[f"{prefix}/{k}"] = np.asarray(v)
        arrays["scales"] = np.asarray(self.scales)
        meta = {
            "format": "hds-checkpoint-1", "step": self.step, "epoch": self.epoch, "rng_state": self.rng_state,
            "config": self.config, "config_hash": self.config_hash, "n_times": self.n_times,
            "train_ids": list(self.train_ids), "test_ids": list(self.test_ids),
        }
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != "hds-checkpoint-1":
                raise ValueError(f"{path}: not an hds checkpoint")
            parts = {"param": {}, "adam_m": {}, "adam_v": {}}
            for key in z.files:
                if "/" in key:
                    prefix, name = key.split("/", 1)
                    parts[prefix][name] = z[key].copy()
            scales = z["scales"].copy()
        return cls(parts["param"], parts["adam_m"], parts["adam_v"], meta["step"], meta["epoch"],
                   meta["rng_state"], meta["config"], meta["config_hash"], scales, meta["n_times"],
                   meta["train_ids"], meta["test_ids"])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]


class MetricLog:
    """Newline-delimited JSON records; optional file sink."""

    def __init__(self, path: str | Path | None = None, append: bool = False):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _param_norms(params) -> dict[str, float]:
    return {k: float(np.linalg.norm(v)) for k, v in params.items()}


def _audit(batch_ids: Sequence[str], forbidden: set[str]) -> None:
    leaked = [i for i in batch_ids if i in forbidden]
    if leaked:
        raise LeakageError(f"test instances in a training batch: {leaked[:5]}")


def make_model(cfg: ExperimentConfig, instances: Sequence[Instance], catalog: CassetteCatalog) -> HierarchicalModel:
    if not instances:
        raise ValueError("training split is empty")
    return build_model(cfg.model, catalog, instances[0].times.size, signal_scales(instances), cfg.encoder, cfg.prior)


def train(cfg: ExperimentConfig, dataset: Dataset, train_idx, test_idx=(), *, stream: int = STREAM_TRAIN,
          resume: Checkpoint | None = None, log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None, checkpoint_every: int = 0) -> TrainResult:
    """Optimise the DReG (or IWAE) surrogate with Adam on ``train_idx``.

    Every minibatch is audited against ``test_idx``.  With ``resume`` the run
    continues from the stored epoch, parameters, moments and RNG state.
    """
    tc = cfg.training
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    train_set = dataset.subset(train_idx)
    forbidden = {dataset.instances[i].id for i in test_idx}
    _audit([inst.id for inst in train_set], forbidden)

    if resume is None:
        model = make_model(cfg, train_set, dataset.catalog)
        rng = stream_rng(tc.seed, stream)
        params = model.init_params(rng)
        m, v = zero_moments(params)
        step, start = 0, 0
    else:
        if resume.config_hash != cfg.hash():
            raise ValueError("checkpoint was produced by a different configuration")
        model = resume.model()
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        params = {k: v.copy() for k, v in resume.params.items()}
        m, v = dict(resume.adam_m), dict(resume.adam_v)
        step, start = resume.step, resume.epoch

    metrics = MetricLog(log_path, append=resume is not None)
    ids = [inst.id for inst in train_set]

    def snapshot(epoch):
        return Checkpoint(params, m, v, step, epoch, rng.bit_generator.state, cfg.to_dict(), cfg.hash(),
                          model.scales, model.n_times, ids, sorted(forbidden))

    for epoch in range(start + 1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx.size)
        total, rejected = 0.0, 0
        for b, lo in enumerate(range(0, order.size, tc.batch_size)):
            members = [train_set[i] for i in order[lo:lo + tc.batch_size]]
            batch = Batch.from_instances(members)
            _audit(batch.ids, forbidden)
            tape = ad.Tape()
            try:
                with tape:
                    nodes = {k: tape.param(k, val) for k, val in params.items()}
                    res = instance_objective(model, nodes, batch, tc.K_train, rng, tc.estimator, cfg.encoder.l2)
                value = float(res.surrogate.value)
                if not math.isfinite(value):
                    raise FloatingPointError("non-finite objective")
                grads = tape.backward(res.surrogate)
            except (SolverError, FloatingPointError) as err:
                raise NumericalError(f"epoch {epoch}, batch {b}: {err}; parameter norms {_param_norms(params)}") from err
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not math.isfinite(gnorm) or gnorm > tc.grad_abort:
                raise NumericalError(f"epoch {epoch}, batch {b}: gradient norm {gnorm:.3g} exceeds "
                                     f"{tc.grad_abort:.3g}; parameter norms {_param_norms(params)}")
            step += 1
            params, (m, v) = adam_step(params, {k: -g for k, g in grads.items()}, (m, v), step,
                                       tc.lr, tc.beta1, tc.beta2, tc.eps)
            total += float(np.sum(res.bounds))
            rejected += res.n_rejected
        record = {"epoch": epoch, "split": "train", "bound": total / train_idx.size, "rejected": rejected,
                  "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3)}
        metrics.write(record)
        log.info("epoch %d bound %.3f, %d rejected samples (%.0f ms)", epoch, record["bound"], rejected,
                 record["wall_ms"])
        if checkpoint_path and checkpoint_every and epoch % checkpoint_every == 0:
            snapshot(epoch).save(checkpoint_path)

    ckpt = snapshot(max(start, tc.epochs))
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    return TrainResult(ckpt, metrics.records)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    ids: list[str]
    devices: list[str]
    bounds: np.ndarray       # (n,)
    pred_mean: np.ndarray    # (n, 4, T)
    pred_std: np.ndarray     # (n, 4, T)
    times: np.ndarray        # (T,)
    weight_sums: np.ndarray  # (n,) self-normalised weights, 1 up to rounding

    @property
    def mean_bound(self) -> float:
        return float(np.mean(self.bounds)) if self.bounds.size else float("nan")


def predictive_summary(means: np.ndarray, variances: np.ndarray, logw: np.ndarray):
    """Self-normalised predictive mean and std per instance.

    ``means`` is (4, T, B, K), ``variances`` broadcasts to it, ``logw`` is
    (B, K).  The std includes observation noise.
    """
    w = normalized_weights(logw, axis=1)
    var = np.broadcast_to(variances, means.shape)
    mu = np.einsum("stbk,bk->bst", means, w)
    second = np.einsum("stbk,bk->bst", means ** 2 + var, w)
    return mu, np.sqrt(np.maximum(second - mu ** 2, 0.0)), w.sum(axis=1)


def evaluate(checkpoint: Checkpoint, instances: Sequence[Instance], K_eval: int | None = None,
             seed: int | None = None, model: HierarchicalModel | None = None) -> EvalResult:
    """Per-instance IWAE bounds and posterior-predictive summaries (no tape)."""
    cfg = checkpoint.experiment()
    K = int(K_eval or cfg.training.K_eval)
    model = model or checkpoint.model()
    rng = stream_rng(cfg.training.seed if seed is None else seed, STREAM_EVAL)
    chunk = max(1, cfg.training.eval_chunk // K)
    bounds, mus, sds, sums = [], [], [], []
    for lo in range(0, len(instances), chunk):
        batch = Batch.from_instances(instances[lo:lo + chunk])
        res = instance_objective(model, checkpoint.params, batch, K, rng, "iwae")
        mu, sd, ws = predictive_summary(res.means, res.variances, res.samples.logw)
        bounds.append(res.bounds)
        mus.append(mu)
        sds.append(sd)
        sums.append(ws)
    T = instances[0].times.size if instances else 0
    empty = np.zeros((0, len(SIGNALS), T))
    return EvalResult(
        [i.id for i in instances], [i.device for i in instances],
        np.concatenate(bounds) if bounds else np.zeros(0),
        np.concatenate(mus) if mus else empty, np.concatenate(sds) if sds else empty,
        instances[0].times if instances else np.zeros(0),
        np.concatenate(sums) if sums else np.zeros(0),
    )


def rmse_by_signal(result: EvalResult, instances: Sequence[Instance]) -> np.ndarray:
    """RMSE of the predictive mean against observations, one value per signal."""
    Y = np.stack([inst.Y for inst in instances])
    return np.sqrt(np.mean((result.pred_mean - Y) ** 2, axis=(0, 2)))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    checkpoint: Checkpoint
    metrics: list[dict]
    evaluation: EvalResult

    @property
    def mean_bound(self) -> float:
        return self.evaluation.mean_bound


@dataclass
class CrossvalResult:
    folds: list[FoldResult]
    assignment: np.ndarray

    @property
    def fold_means(self) -> list[float]:
        return [f.mean_bound for f in self.folds]

    @property
    def fold_sizes(self) -> list[int]:
        return [len(f.evaluation.ids) for f in self.folds]

    @property
    def pooled_mean(self) -> float:
        sizes = np.array(self.fold_sizes, dtype=np.float64)
        return float(np.sum(sizes * np.array(self.fold_means)) / sizes.sum())

    def summary(self) -> dict:
        return {"fold_means": self.fold_means, "fold_sizes": self.fold_sizes, "pooled_mean": self.pooled_mean}


def _run_fold(cfg: ExperimentConfig, dataset: Dataset, fold: int, out_dir: str | None) -> FoldResult:
    train_idx, test_idx = dataset.split(fold)
    sub = Path(out_dir) / f"fold{fold}" if out_dir else None
    res = train(cfg, dataset, train_idx, test_idx, stream=STREAM_FOLD + fold,
                log_path=sub / "metrics.ndjson" if sub else None,
                checkpoint_path=sub / "checkpoint.npz" if sub else None)
    ev = evaluate(res.checkpoint, dataset.subset(test_idx))
    return FoldResult(fold, res.checkpoint, res.metrics, ev)


def crossvalidate(cfg: ExperimentConfig, dataset: Dataset, n_folds: int | None = None,
                  out_dir: str | Path | None = None, workers: int = 1) -> CrossvalResult:
    """Train on each fold complement and evaluate on the fold.

    Folds are independent jobs; with ``workers > 1`` they run in separate
    processes.  Results do not depend on ``workers``.
    """
    n_folds = n_folds or cfg.training.n_folds
    if dataset.folds is None or dataset.fold_mode != "crossval":
        dataset = assign_folds(dataset, n_folds, "crossval", cfg.training.seed)
    out = str(out_dir) if out_dir else None
    if workers > 1 and n_folds > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_folds)) as pool:
            futures = [pool.submit(_run_fold, cfg, dataset, k, out) for k in range(n_folds)]
            folds = [f.result() for f in futures]
    else:
        folds = [_run_fold(cfg, dataset, k, out) for k in range(n_folds)]
    return CrossvalResult(folds, dataset.folds)


# ---------------------------------------------------------------------------
# held-out devices


@dataclass
class HoldoutResult:
    device: str
    checkpoint: Checkpoint
    metrics: list[dict]
    evaluation: EvalResult
    instances: list[Instance]
    rmse: dict[str, float]
    composition: dict[str, dict[str, float]]
    group_summary: dict[str, dict[str, float]]

    def response_curves(self) -> list[dict]:
        """Final-time predictive mean and 2-std band against concentration."""
        rows = []
        ev = self.evaluation
        for i, inst in enumerate(self.instances):
            c6, c12 = inst.u
            if c6 > 0 and c12 == 0:
                series, conc = "C6", c6
            elif c12 > 0 and c6 == 0:
                series, conc = "C12", c12
            elif c6 == 0 and c12 == 0:
                series, conc = "control", 0.0
            else:
                series, conc = "mixed", c6 + c12
            for s, name in enumerate(SIGNALS):
                mu, sd = ev.pred_mean[i, s, -1], ev.pred_std[i, s, -1]
                rows.append({"instance_id": inst.id, "device": inst.device, "signal": name, "series": series,
                             "concentration": float(conc), "observed": float(inst.Y[s, -1]),
                             "mean": float(mu), "lower": float(mu - 2 * sd), "upper": float(mu + 2 * sd)})
        return rows


def composed_group_means(checkpoint: Checkpoint, device: str, catalog: CassetteCatalog) -> dict[str, dict[str, float]]:
    """Group posterior mean of a device two ways: ``g @ nu`` and the sum of its cassette entries."""
    from .data import encode_device, parse_device

    g = encode_device(device, catalog)
    nu = np.asarray(checkpoint.params["phi.group.mean"])
    layout = checkpoint.model().layout
    rows = [catalog.offsets()[s] + catalog.blocks[s].index(c) for s, c in enumerate(parse_device(device, catalog))]
    out = {}
    for j, spec in enumerate(layout.block("G")):
        composed = float((g @ nu)[j])
        cassette_sum = 0.0
        for r in rows:
            cassette_sum += float(nu[r, j])
        out[spec.name] = {"composed": composed, "cassette_sum": cassette_sum}
    return out


def heldout_eval(cfg: ExperimentConfig, dataset: Dataset, device: str, out_dir: str | Path | None = None) -> HoldoutResult:
    """Train without ``device`` and predict it from cassette-composed group parameters."""
    ds = assign_folds(dataset, mode="holdout", device=device)
    train_idx, test_idx = ds.split(1)
    sub = Path(out_dir) if out_dir else None
    res = train(cfg, ds, train_idx, test_idx, stream=STREAM_HOLDOUT,
                log_path=sub / "metrics.ndjson" if sub else None,
                checkpoint_path=sub / "checkpoint.npz" if sub else None)
    test = ds.subset(test_idx)
    ev = evaluate(res.checkpoint, test)
    rmse = dict(zip(SIGNALS, (float(x) for x in rmse_by_signal(ev, test))))
    model = res.checkpoint.model()
    summary = model.group_summary(res.checkpoint.params, test[0].g)
    return HoldoutResult(device, res.checkpoint, res.metrics, ev, test, rmse,
                         composed_group_means(res.checkpoint, device, ds.catalog), summary)
