"""Training loop, run configuration, metrics logging and schedule sweeps."""

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Graph
from .controller import ControllerState, ScheduleSpec, schedule_value
from .data import BatchIterator, Dataset, gen_synthetic, load_idx
from .errors import ConfigError, NumericError
from .nets import Net, NetSpec, build_net, count_params

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "epoch", "raw_loss", "filtered_loss", "grad_diff", "s", "lr", "train_err", "test_err"]

BASELINE_SCHEDULES = ("shake_shake", "shakedrop")


@dataclass
class RunConfig:
    # network
    topology: str = "res2"
    depth: int = 4
    width: int = 16
    widening: str = "pyramid"
    width_step: int = 16
    growth_rate: int = 8
    granularity: str = "batch"
    # data
    dataset: str = "spirals"
    n_per_class: int = 200
    test_per_class: int = 500
    classes: int = 3
    noise: float = 0.1
    data_seed: int = 0
    hflip: bool = False
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # optimization
    epochs: int = 10
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # regularization
    schedule: str = "dynamic"
    delta_s: float = 0.0003
    filter_length: int = 501
    sigma: float = 0.4
    A: float = 0.5
    s0: float = 0.0
    p_L: float = 0.5
    uniform_R: Optional[float] = None
    clamp: bool = False
    # bookkeeping
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        for name in ("epochs", "batch_size", "lr0", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.delta_s < 0 or self.s0 < 0:
            raise ConfigError("weight_decay, delta_s and s0 must be non-negative")
        if self.filter_length != 1 and (self.filter_length < 3 or self.filter_length % 2 == 0):
            raise ConfigError("filter_length must be 1 (no smoothing) or an odd number >= 3")
        self.schedule_spec()
        self.net_spec((2,), 2).validate()
        return self

    def schedule_spec(self, total_iterations=None) -> Optional[ScheduleSpec]:
        """None for the shake baselines, whose scales do not depend on ``s``."""
        if self.schedule in BASELINE_SCHEDULES:
            return None
        return ScheduleSpec.parse(self.schedule, total_iterations)

    def reg_mode(self) -> str:
        if self.schedule in BASELINE_SCHEDULES:
            return self.schedule
        kind = ScheduleSpec.parse(self.schedule).kind
        # the "none" schedule is the deterministic network with branch scale A
        return "none" if kind == "none" else kind

    def net_spec(self, input_shape, num_classes) -> NetSpec:
        reg_mode = self.reg_mode()
        return NetSpec(
            topology=self.topology, depth=self.depth, width=self.width, widening=self.widening,
            width_step=self.width_step, growth_rate=self.growth_rate, num_classes=num_classes,
            input_shape=tuple(input_shape), reg_mode=reg_mode, granularity=self.granularity,
            A=self.A, p_L=self.p_L, uniform_R=self.uniform_R, clamp=self.clamp,
            literal_scale=self.A if reg_mode == "none" else None,
            delta_s=self.delta_s, filter_length=self.filter_length, sigma=self.sigma, seed=self.seed,
        )


def _coerce(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if "Optional" in str(f.type) or typ.startswith("Optional"):
            return None if raw.lower() in ("", "none") else float(raw)
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
    return raw


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(known[key], raw)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={'' if v is None else v}")
    return "\n".join(lines) + "\n"


# -- optimizer pieces --------------------------------------------------------------


def cosine_lr(lr0: float, t: int, T: int) -> float:
    if T <= 0 or not 0 <= t <= T:
        raise ValueError(f"cosine_lr: need 0 <= t <= T, got t={t}, T={T}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
             lr: float, momentum: float, weight_decay: float):
    """Heavy-ball SGD with L2 decay folded into the gradient. Returns new arrays."""
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if not p.shape == g.shape == v.shape:
            raise ValueError(f"sgd_step: shape mismatch param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v + g + weight_decay * p
        new_params.append(p - lr * v)
        new_velocity.append(v)
    return new_params, new_velocity


# -- training ------------------------------------------------------------------------


@dataclass
class MetricsRow:
    iteration: int
    epoch: int
    raw_loss: float
    filtered_loss: float
    grad_diff: Optional[float]
    s: float
    lr: float
    train_err: float
    test_err: Optional[float] = None
    s_used: float = 0.0

    def cells(self):
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.iteration), str(self.epoch), fmt(self.raw_loss), fmt(self.filtered_loss),
                fmt(self.grad_diff), fmt(self.s), fmt(self.lr), fmt(self.train_err), fmt(self.test_err)]


class Trainer:
    """Owns a net, its optimizer state and the strength controller for one run."""

    def __init__(self, net: Net, config: RunConfig, total_iterations: int):
        self.net = net
        self.config = config
        self.total = total_iterations
        self.schedule = config.schedule_spec(total_iterations)
        # the dynamic net carries its own controller; other schedules get one for monitoring
        self.controller = net.controller or ControllerState.create(
            config.delta_s, config.filter_length, config.sigma, config.s0)
        if net.controller is not None:
            net.controller.s = config.s0
        self.velocity = [np.zeros_like(p.data) for p in net.params]
        self.iteration = 0

    def current_s(self) -> float:
        if self.schedule is None:
            return 0.0
        return schedule_value(self.schedule, self.controller, self.iteration)

    def train_step(self, x, y, epoch: int = 0) -> MetricsRow:
        net, cfg = self.net, self.config
        if not net.training:
            raise RuntimeError("train_step needs the net in train mode")
        s = self.current_s()
        lr = cosine_lr(cfg.lr0, self.iteration, self.total)
        g = Graph()
        logits, loss = net.forward(g, x, y, s)
        raw_loss = float(g.value(loss))
        if not math.isfinite(raw_loss):
            raise NumericError(f"non-finite loss {raw_loss} at iteration {self.iteration}", self.iteration)
        grads = g.backward(loss)
        by_param = {id(g.nodes[nid].param): grads[nid] for nid in g.parameters}
        params = net.params
        new_p, self.velocity = sgd_step([p.data for p in params], [by_param[id(p)] for p in params],
                                        self.velocity, lr, cfg.momentum, cfg.weight_decay)
        for p, v in zip(params, new_p):
            p.data = v
        # raw cross-entropy only; weight decay never reaches the controller
        self.controller.step(raw_loss)
        train_err = 100.0 * float(np.mean(np.argmax(g.value(logits), axis=1) != y))
        if self.schedule is None:
            s_next = 0.0
        elif self.schedule.kind == "dynamic":
            s_next = self.controller.s
        else:
            s_next = schedule_value(self.schedule, None, min(self.iteration + 1, self.total))
        row = MetricsRow(self.iteration, epoch, raw_loss, self.controller.last_filtered,
                         self.controller.last_diff, s_next, lr, train_err, s_used=s)
        self.iteration += 1
        return row


def train_step(trainer: Trainer, batch, epoch: int = 0) -> MetricsRow:
    x, y = batch
    return trainer.train_step(x, y, epoch)


def evaluate(net: Net, dataset: Dataset, batch_size: int = 512) -> float:
    """Top-1 error in percent, computed in eval mode."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    was_training = net.training
    net.set_mode("eval")
    try:
        logits = net.predict(dataset.x, batch_size)
    finally:
        if was_training:
            net.set_mode("train")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) != dataset.y))


def load_datasets(cfg: RunConfig):
    if cfg.dataset in ("spirals", "gaussians"):
        train = gen_synthetic(cfg.dataset, cfg.n_per_class, cfg.classes, cfg.noise, cfg.data_seed)
        test = gen_synthetic(cfg.dataset, cfg.test_per_class, cfg.classes, cfg.noise,
                             cfg.data_seed + 10_000, split="test")
        return train, test
    if cfg.dataset == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels)
        test = load_idx(cfg.test_images, cfg.test_labels, train.normalization, split="test")
        return train, test
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


@dataclass
class RunResult:
    summary: Dict
    rows: List[MetricsRow] = field(repr=False, default_factory=list)


def run_experiment(config: RunConfig, datasets=None, write: bool = True, keep_rows: bool = False) -> RunResult:
    """Train for ``config.epochs`` epochs, evaluating after each, and log metrics.

    Writes ``metrics.csv`` and ``summary.json`` into ``config.out_dir`` when
    ``write`` is set.
    """
    config.validate()
    train, test = datasets or load_datasets(config)
    net = build_net(config.net_spec(train.input_shape, train.num_classes))
    batches = BatchIterator(train, config.batch_size, seed=config.seed, hflip=config.hflip)
    total = config.epochs * len(batches)
    trainer = Trainer(net, config, total)
    rows: List[MetricsRow] = []
    started = time.perf_counter()

    writer = fh = None
    if write:
        path = os.path.join(config.out_dir, "metrics.csv")
        try:
            os.makedirs(config.out_dir, exist_ok=True)
            fh = open(path, "w", newline="")
        except OSError as exc:
            raise OSError(exc.errno, f"cannot write metrics to {path}: {exc.strerror}", path) from exc
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        test_err = None
        for epoch in range(config.epochs):
            net.set_mode("train")
            epoch_rows = [trainer.train_step(x, y, epoch) for x, y in batches.epoch_batches(epoch)]
            test_err = evaluate(net, test)
            epoch_rows[-1].test_err = test_err
            log.info("epoch %d  loss %.4f  s %.4f  test_err %.2f", epoch, epoch_rows[-1].raw_loss,
                     epoch_rows[-1].s, test_err)
            if writer:
                writer.writerows(r.cells() for r in epoch_rows)
            if keep_rows:
                rows.extend(epoch_rows)
            last = epoch_rows[-1]
    finally:
        if fh:
            fh.close()

    summary = {
        "schedule": config.schedule,
        "seed": config.seed,
        "iterations": total,
        "final_s": last.s,
        "final_train_err": evaluate(net, train),
        "final_test_err": test_err,
        "param_count": count_params(net),
        "seconds": round(time.perf_counter() - started, 3),
    }
    if write:
        path = os.path.join(config.out_dir, "summary.json")
        try:
            with open(path, "w") as out:
                json.dump({k: v for k, v in summary.items() if k != "seconds"}, out, indent=2, sort_keys=True)
        except OSError as exc:
            raise OSError(exc.errno, f"cannot write summary to {path}: {exc.strerror}", path) from exc
    return RunResult(summary, rows)


def _run_quiet(config):
    return run_experiment(config, write=False).summary


def sweep_schedules(base: RunConfig, schedules: Sequence[str], seeds: Sequence[int] = (0,),
                    jobs: int = 1, out_path: Optional[str] = None) -> List[Dict]:
    """Run every schedule under every seed on shared data; one row per schedule.

    Rows carry the mean final test error across seeds, labelled like the
    Fix-x / Linear-x / Dynamic / Baseline comparison.
    """
    if len(schedules) < 2:
        raise ConfigError("sweep needs at least two schedules")
    configs = []
    for sched in schedules:
        for seed in seeds:
            cfg = dataclasses.replace(base, schedule=sched.strip(), seed=seed,
                                      out_dir=os.path.join(base.out_dir, f"{sched.strip().replace(':', '-')}_s{seed}"))
            configs.append(cfg.validate())
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_run_quiet, configs))
    else:
        summaries = [_run_quiet(c) for c in configs]

    table = []
    per = len(seeds)
    for i, sched in enumerate(schedules):
        chunk = summaries[i * per:(i + 1) * per]
        errs = [c["final_test_err"] for c in chunk]
        spec = ScheduleSpec.parse(sched) if sched not in BASELINE_SCHEDULES else None
        table.append({
            "schedule": sched.strip(),
            "label": spec.label if spec else sched.strip(),
            "params": chunk[0]["param_count"],
            "seeds": per,
            "mean_test_err": float(np.mean(errs)),
            "std_test_err": float(np.std(errs)),
            "mean_train_err": float(np.mean([c["final_train_err"] for c in chunk])),
            "mean_final_s": float(np.mean([c["final_s"] for c in chunk])),
            "test_errs": errs,
        })
    if out_path:
        write_sweep_table(out_path, table)
    return table


SWEEP_HEADER = ["label", "schedule", "params", "seeds", "mean_test_err", "std_test_err",
                "mean_train_err", "mean_final_s"]


def write_sweep_table(path, table):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for row in table:
            w.writerow([row[k] for k in SWEEP_HEADER])


def format_sweep_table(table) -> str:
    lines = [f"{'Schedule':<12}{'Params':>8}{'Test err %':>12}{'± std':>8}{'Train err %':>13}{'final s':>9}"]
    for r in table:
        lines.append(f"{r['label']:<12}{r['params']:>8}{r['mean_test_err']:>12.2f}{r['std_test_err']:>8.2f}"
                     f"{r['mean_train_err']:>13.2f}{r['mean_final_s']:>9.4f}")
    return "\n".join(lines)
