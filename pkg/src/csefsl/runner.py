"""Experiment orchestration: JSON config -> simulation -> CSV/summary outputs."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from . import nn
from .errors import ConfigError, NumericError, UsageError
from .ledger import storage_of
from .metrics import ConvergenceTrace, client_grad_sq, server_grad_sq, weighted_grad_average
from .protocol import DEFAULT_CLIP, Simulation, Strategy
from .seeding import substream
from .zoo import SplitModelSpec, toy_spec

log = logging.getLogger("csefsl")

METRICS_COLUMNS = ("round", "epoch", "comm_rounds", "uplink_bytes", "downlink_bytes",
                   "train_loss", "test_top1", "grad_norm_client", "grad_norm_server",
                   "gamma_T", "weighted_avg_client", "weighted_avg_server")
COMPARE_COLUMNS = ("strategy", "h", "round", "epoch", "comm_rounds", "uplink_bytes",
                   "downlink_bytes", "total_bytes", "test_top1")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 1, 2, 3

_DATASET_KEYS = {
    "blobs": {"kind": None, "n": 6000, "classes": 3, "dim": 8, "sep": 10.0, "n_test": 1500},
    "idx": {"kind": None, "train_images": None, "train_labels": None,
            "test_images": None, "test_labels": None, "num_classes": None},
    "csv": {"kind": None, "train": None, "test": None, "num_classes": None},
}
_TOP_DEFAULTS = {
    "dataset": None, "model": {"preset": "toy", "hidden": 32},
    "partition": {"mode": "iid"}, "strategy": None,
    "n_clients": 5, "fraction": 1.0, "batch_size": 32, "eta0": 0.1, "rounds": 100,
    "aggregation_period": 1, "aggregation_unit": "epoch", "arrival": "ordered",
    "seeds": [0], "output_dir": "out", "bytes_per_element": 4, "label_bytes": 1,
    "probe_size": 512,
}
_STRATEGY_KEYS = {"name": None, "h": 1, "clip_threshold": None, "upload_point": "window_last"}


def _closed(d: Any, defaults: dict, path: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(d) - set(defaults))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    out = {}
    for k, default in defaults.items():
        if k in d:
            out[k] = d[k]
        elif default is None and k in ("kind", "name", "dataset", "strategy"):
            raise ConfigError(f"{path}.{k}: required")
        else:
            out[k] = copy.deepcopy(default)
    return out


def _require(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


@dataclass
class ExperimentConfig:
    """A validated experiment description. Build with :meth:`from_dict`."""
    dataset: dict
    model: dict
    partition: dict
    strategy: dict
    n_clients: int
    fraction: float
    batch_size: int
    eta0: float
    rounds: int
    aggregation_period: int
    aggregation_unit: str
    arrival: str
    seeds: List[int]
    output_dir: str
    bytes_per_element: int
    label_bytes: int
    probe_size: int

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        d = _closed(raw, _TOP_DEFAULTS, "config")
        ds = d["dataset"]
        _require(isinstance(ds, dict) and ds.get("kind") in _DATASET_KEYS, "config.dataset.kind",
                 f"must be one of {sorted(_DATASET_KEYS)}")
        ds = _closed(ds, _DATASET_KEYS[ds["kind"]], "config.dataset")
        if ds["kind"] == "blobs":
            for k in ("n", "classes", "dim", "n_test"):
                _require(isinstance(ds[k], int) and ds[k] >= 1, f"config.dataset.{k}",
                         "must be a positive integer")
            _require(ds["sep"] > 0, "config.dataset.sep", "must be positive")
        elif ds["kind"] == "idx":
            for k in ("train_images", "train_labels", "test_images", "test_labels"):
                _require(isinstance(ds[k], str), f"config.dataset.{k}", "path required")
        else:
            for k in ("train", "test"):
                _require(isinstance(ds[k], str), f"config.dataset.{k}", "path required")
        d["dataset"] = ds

        m = d["model"]
        _require(isinstance(m, dict), "config.model", "expected an object")
        if "preset" in m:
            m = _closed(m, {"preset": "toy", "hidden": 32, "aux": True}, "config.model")
            _require(m["preset"] == "toy", "config.model.preset", "only 'toy' is available")
            _require(isinstance(m["hidden"], int) and m["hidden"] >= 1, "config.model.hidden",
                     "must be a positive integer")
        else:
            m = _closed(m, {"input_shape": None, "client": None, "server": None, "aux": None,
                            "num_classes": None}, "config.model")
            for k in ("input_shape", "client", "server", "num_classes"):
                _require(m[k] is not None, f"config.model.{k}", "required")
            try:
                SplitModelSpec.from_dict(m)
            except ConfigError as e:
                raise ConfigError(f"config.model: {e}") from None
        d["model"] = m

        p = _closed(d["partition"], {"mode": "iid", "classes_per_client": None}, "config.partition")
        _require(p["mode"] in ("iid", "label_skew"), "config.partition.mode",
                 "must be 'iid' or 'label_skew'")
        if p["mode"] == "label_skew":
            _require(isinstance(p["classes_per_client"], int) and p["classes_per_client"] >= 1,
                     "config.partition.classes_per_client", "must be a positive integer")
        d["partition"] = p

        s = _closed(d["strategy"], _STRATEGY_KEYS, "config.strategy")
        try:
            strat = Strategy(s["name"], s["h"], s["clip_threshold"], s["upload_point"])
        except ConfigError as e:
            raise ConfigError(f"config.strategy: {e}") from None
        if strat.uses_aux:
            aux_ok = bool(d["model"].get("aux"))
            _require(aux_ok, "config.model.aux", f"{strat.variant} needs an auxiliary head")
        d["strategy"] = s

        for k in ("n_clients", "batch_size", "rounds", "aggregation_period", "bytes_per_element",
                  "label_bytes", "probe_size"):
            _require(isinstance(d[k], int) and not isinstance(d[k], bool) and d[k] >= 1,
                     f"config.{k}", "must be a positive integer")
        _require(isinstance(d["fraction"], (int, float)) and 0 < d["fraction"] <= 1,
                 "config.fraction", "must lie in (0, 1]")
        _require(isinstance(d["eta0"], (int, float)) and d["eta0"] > 0, "config.eta0",
                 "must be positive")
        _require(d["aggregation_unit"] in ("epoch", "window"), "config.aggregation_unit",
                 "must be 'epoch' or 'window'")
        _require(d["arrival"] in ("ordered", "shuffled"), "config.arrival",
                 "must be 'ordered' or 'shuffled'")
        _require(isinstance(d["seeds"], list) and d["seeds"] and
                 all(isinstance(x, int) for x in d["seeds"]), "config.seeds",
                 "must be a non-empty list of integers")
        _require(isinstance(d["output_dir"], str), "config.output_dir", "must be a string")
        if ds["kind"] == "blobs":
            _require(d["n_clients"] <= ds["n"], "config.n_clients", "more clients than examples")
            if p["mode"] == "label_skew":
                _require(d["n_clients"] * p["classes_per_client"] >= ds["classes"],
                         "config.partition.classes_per_client",
                         "n_clients * classes_per_client must cover every class")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from None
        cfg = cls.from_dict(raw)
        base = Path(path).resolve().parent
        for k in ("train_images", "train_labels", "test_images", "test_labels", "train", "test"):
            v = cfg.dataset.get(k)
            if isinstance(v, str) and not os.path.isabs(v):
                cfg.dataset[k] = str(base / v)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def strategy_obj(self) -> Strategy:
        s = self.strategy
        return Strategy(s["name"], s["h"], s["clip_threshold"], s["upload_point"])


def load_data(cfg: ExperimentConfig, seed: int) -> Tuple[D.Dataset, D.Dataset]:
    ds = cfg.dataset
    if ds["kind"] == "blobs":
        full = D.gen_gaussian_blobs(ds["n"] + ds["n_test"], ds["classes"], ds["dim"], ds["sep"], seed)
        return full.subset(np.arange(ds["n"])), full.subset(np.arange(ds["n"], len(full)))
    if ds["kind"] == "idx":
        train = D.load_idx(ds["train_images"], ds["train_labels"], ds["num_classes"])
        test = D.load_idx(ds["test_images"], ds["test_labels"], train.num_classes)
        return train, test
    train = D.load_csv(ds["train"], ds["num_classes"])
    return train, D.load_csv(ds["test"], train.num_classes)


def model_spec(cfg: ExperimentConfig, train: D.Dataset) -> SplitModelSpec:
    m = cfg.model
    if "preset" in m:
        shape = train.example_shape
        if len(shape) != 1:
            raise ConfigError("config.model: the toy preset needs flat feature vectors")
        return toy_spec(shape[0], train.num_classes, m["hidden"], with_aux=bool(m["aux"]))
    spec = SplitModelSpec.from_dict(m)
    if spec.input_shape != train.example_shape:
        raise ConfigError(f"config.model.input_shape: {spec.input_shape} does not match "
                          f"data {train.example_shape}")
    return spec


@dataclass
class Experiment:
    """Everything needed to run one seed of a config."""
    cfg: ExperimentConfig
    seed: int
    spec: SplitModelSpec
    train: D.Dataset
    test: D.Dataset
    probe: D.Dataset
    sim: Simulation
    trace: ConvergenceTrace = field(default_factory=ConvergenceTrace)
    rows: List[dict] = field(default_factory=list)


def prepare(cfg: ExperimentConfig, seed: int) -> Experiment:
    train, test = load_data(cfg, seed)
    spec = model_spec(cfg, train)
    strategy = cfg.strategy_obj()
    if strategy.variant == "FSL_OC" and strategy.clip_threshold is None:
        log.info("FSL_OC clip_threshold unset; using default %s", DEFAULT_CLIP)
    p = cfg.partition
    if p["mode"] == "iid":
        part = D.partition_iid(train, cfg.n_clients, seed)
    else:
        part = D.partition_label_skew(train, cfg.n_clients, p["classes_per_client"], seed)
    probe_idx = substream(seed, "probe").permutation(len(train))[:cfg.probe_size]
    probe = train.subset(np.sort(probe_idx))
    sim = Simulation(spec, strategy, train, part, batch_size=cfg.batch_size, eta0=cfg.eta0,
                     seed=seed, fraction=cfg.fraction, aggregation_period=cfg.aggregation_period,
                     aggregation_unit=cfg.aggregation_unit, arrival=cfg.arrival,
                     bytes_per_element=cfg.bytes_per_element, label_bytes=cfg.label_bytes)
    return Experiment(cfg, seed, spec, train, test, probe, sim)


def _grad_sqs(exp: Experiment) -> Tuple[float, float]:
    sim = exp.sim
    srv = sim.server
    models = srv.server_models
    c = client_grad_sq(exp.spec, srv.x_c, srv.a_c, models[0], exp.probe)
    s = math.fsum(server_grad_sq(exp.spec, srv.x_c, xs, exp.probe) for xs in models) / len(models)
    return c, s


def _epochs_done(sim: Simulation) -> float:
    if sim.unit == "epoch":
        return float(sim.t * sim.period)
    done = []
    for c, (epoch, pos) in sim._cursor.items():
        cached = sim._plan_cache.get(c)
        n = len(cached[1]) if cached and cached[0] == epoch else 1
        done.append(epoch + pos / n)
    return float(np.mean(done))


def step(exp: Experiment) -> dict:
    """Run one round and append its metrics row."""
    sim = exp.sim
    eta = sim.lr()
    gc, gs = _grad_sqs(exp)
    exp.trace.record(eta, gc, gs)
    rep = sim.run_round()
    if not math.isfinite(rep.train_loss) and rep.server_losses:
        raise NumericError(f"non-finite training loss in round {rep.t}")
    acc, _ = sim.evaluate(exp.test)
    T = len(exp.trace)
    row = {"round": rep.t, "epoch": _epochs_done(sim), "comm_rounds": sim.ledger.comm_rounds,
           "uplink_bytes": sim.ledger.uplink, "downlink_bytes": sim.ledger.downlink,
           "train_loss": rep.train_loss, "test_top1": acc,
           "grad_norm_client": gc, "grad_norm_server": gs, "gamma_T": exp.trace.gamma(),
           "weighted_avg_client": weighted_grad_average(exp.trace, "client", T),
           "weighted_avg_server": weighted_grad_average(exp.trace, "server", T)}
    exp.rows.append(row)
    return row


def train(exp: Experiment, rounds: Optional[int] = None) -> Experiment:
    for _ in range(exp.cfg.rounds if rounds is None else rounds):
        try:
            step(exp)
        except NumericError as e:
            raise NumericError(f"round {exp.sim.t}: {e}") from None
    return exp


def storage_count(exp: Experiment) -> int:
    xc, ac, xs = exp.spec.param_counts()
    strategy = exp.sim.strategy
    return storage_of(strategy.variant, exp.sim.n_clients, xc, ac if strategy.uses_aux else 0, xs)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def summary(exp: Experiment) -> dict:
    led = exp.sim.ledger
    s = exp.cfg.strategy
    return {"strategy": s["name"], "h": s["h"], "seed": exp.seed, "rounds": len(exp.rows),
            "final_test_top1": exp.rows[-1]["test_top1"] if exp.rows else float("nan"),
            "total_load_bytes": led.total, "uplink_bytes": led.uplink,
            "downlink_bytes": led.downlink, "comm_rounds": led.comm_rounds,
            "storage_params": storage_count(exp)}


def write_outputs(exp: Experiment, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, exp.rows)
    exp.sim.ledger.to_csv(out / "ledger.csv")
    summ = summary(exp)
    with open(out / "summary.txt", "w") as f:
        for k, v in summ.items():
            f.write(f"{k}: {v}\n")
    return summ


def run_seed(cfg: ExperimentConfig, seed: int, out_dir=None) -> dict:
    exp = train(prepare(cfg, seed))
    if out_dir is None:
        return summary(exp)
    return write_outputs(exp, out_dir)


def _run_seed_job(args):
    cfg_dict, seed, out_dir = args
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed, out_dir)


def run(cfg: ExperimentConfig, threads: int = 1) -> List[dict]:
    """Run every seed of ``cfg`` and write per-seed outputs plus a cross-seed summary."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        f.write(cfg.to_json())
    jobs = [(cfg.to_dict(), s, str(out / f"seed_{s}")) for s in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [run_seed(cfg, s, o) for _, s, o in jobs]
    with open(out / "summary.txt", "w") as f:
        f.write(f"seeds: {cfg.seeds}\n")
        for key in ("final_test_top1", "total_load_bytes", "storage_params"):
            vals = [float(r[key]) for r in results]
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            f.write(f"{key}: {statistics.fmean(vals)!r} +- {sd!r}\n")
    return results


# -- gradient check -------------------------------------------------------------

def gradcheck_cases() -> List[Tuple[str, list, Tuple[int, ...]]]:
    """Small stacks (<= 64 parameters) exercising every layer kind."""
    return [
        ("dense", [nn.dense(4, 3)], (4,)),
        ("relu", [nn.dense(4, 5), nn.relu(), nn.dense(5, 3)], (4,)),
        ("flatten", [nn.flatten(), nn.dense(6, 3)], (2, 3)),
        ("conv2d", [nn.conv2d(1, 2, 3), nn.relu(), nn.flatten(), nn.dense(8, 3)], (1, 4, 4)),
        ("conv2d_stride2", [nn.conv2d(1, 2, 3, stride=2), nn.flatten(), nn.dense(8, 3)], (1, 5, 5)),
    ]


def gradcheck(seed: int = 0, epsilon: float = 1e-5, tol: float = 1e-4,
              batch: int = 3) -> List[dict]:
    """Compare backward() with central differences for each case; one report row per case."""
    report = []
    for name, stack, shape in gradcheck_cases():
        rng = substream(seed, "gradcheck", len(report))
        params = nn.init_params(stack, rng)
        for k in params:
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
        x = rng.standard_normal((batch,) + shape)
        y = rng.integers(0, 3, size=batch)
        out, trace = nn.forward(stack, params, x)
        _, d = nn.softmax_cross_entropy(out, y)
        grads, dx = nn.backward(stack, params, trace, d)
        fd = nn.finite_diff_grad(stack, params, x, y, epsilon)
        err = max(nn.relative_error(grads[k], fd[k]) for k in params)

        def loss_of_x(p):
            return nn.softmax_cross_entropy(nn.forward(stack, params, p["x"])[0], y)[0]
        fdx = nn.central_difference(loss_of_x, {"x": x}, epsilon)["x"]
        err_x = nn.relative_error(dx, fdx)
        report.append({"layer": name, "params": nn.size(params)[0], "max_rel_err": err,
                       "max_rel_err_input": err_x, "ok": max(err, err_x) < tol})
    return report


# -- strategy comparison --------------------------------------------------------

def compare(cfgs: Sequence[ExperimentConfig], threads: int = 1) -> List[dict]:
    """Run the first seed of each config; rows keyed by (strategy, h) with the three x-axes."""
    if len(cfgs) < 2:
        raise UsageError("compare needs at least two configs")
    ref = cfgs[0]
    for c in cfgs[1:]:
        if c.dataset != ref.dataset or c.model != ref.model:
            raise UsageError("compared configs must share dataset and model")
    rows = []
    for c in cfgs:
        exp = train(prepare(c, c.seeds[0]))
        s = c.strategy
        for r in exp.rows:
            rows.append({"strategy": s["name"], "h": s["h"], "round": r["round"],
                         "epoch": r["epoch"], "comm_rounds": r["comm_rounds"],
                         "uplink_bytes": r["uplink_bytes"], "downlink_bytes": r["downlink_bytes"],
                         "total_bytes": r["uplink_bytes"] + r["downlink_bytes"],
                         "test_top1": r["test_top1"]})
    return rows
