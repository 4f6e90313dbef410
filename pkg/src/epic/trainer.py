"""Training loop, efficiency ledger, ablation and sweep harnesses."""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import TEXT, VISION, FrozenBackbone
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, generate_dataset
from .gradcheck import GradCheckReport, grad_check
from .model import MODES, PromptedModel
from .objective import ClassTextBank, loss_multi, loss_uni, metrics
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_HEADER = ("run_id", "mode", "similarity", "layers", "seed", "epoch", "split",
                 "metric", "value")


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros(p.shape)
            else:
                g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ assembly


@dataclass
class Experiment:
    config: ExperimentConfig
    backbone: FrozenBackbone
    model: PromptedModel
    data: dict[str, Dataset]
    features: dict[str, tuple[np.ndarray, np.ndarray]]


def class_bank_tokens(cfg: ExperimentConfig, n_classes: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.backbone_seed, 0xC1A55]))
    return rng.integers(0, cfg.vocab_size, size=(n_classes, cfg.text_len))


def build_experiment(cfg: ExperimentConfig, backbone: FrozenBackbone | None = None,
                     with_features: bool = True) -> Experiment:
    backbone = backbone or FrozenBackbone.build(cfg.backbone)
    data = generate_dataset(cfg.task_spec, cfg.backbone)
    k = data["train"].n_classes
    bank = ClassTextBank.build(backbone, class_bank_tokens(cfg, k))
    model = PromptedModel(backbone, cfg.mode, cfg.schedule, cfg.prompt_len,
                          cfg.similarity_config, bank, cfg.tau, cfg.tau_trainable, cfg.seed)
    features = {}
    if with_features:
        features = {s: model.prefix(d.images, d.tokens) for s, d in data.items()}
    return Experiment(cfg, backbone, model, data, features)


def batch_loss(model: PromptedModel, u_v: np.ndarray, u_t: np.ndarray, labels: np.ndarray,
               task: str, literal: bool) -> Tensor:
    probs = model.probabilities(u_v, u_t, task)
    if task == "multi":
        return loss_multi(probs, labels, literal=literal)
    return loss_uni(probs, labels, literal=literal)


def evaluate(model: PromptedModel, u_v: np.ndarray, u_t: np.ndarray, labels: np.ndarray,
             task: str) -> dict[str, float]:
    with T.no_grad():
        probs = model.probabilities(u_v, u_t, task)
    probs = probs if isinstance(probs, Tensor) else probs.probs
    return metrics(probs.data, labels, "multi" if task == "multi" else "uni")


def check_gradients(cfg: ExperimentConfig, n_samples: int = 2, h: float = 1e-5,
                    tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of the full training loss on the first train samples."""
    exp = build_experiment(cfg)
    u_v, u_t = exp.features["train"]
    labels = exp.data["train"].labels
    idx = np.arange(min(n_samples, len(labels)))

    def f():
        return batch_loss(exp.model, u_v[idx], u_t[idx], labels[idx], cfg.task,
                          cfg.literal_losses)

    return grad_check(f, exp.model.trainable_parameters(), h=h, tol=tol)


# -------------------------------------------------------------------- ledger


@dataclass
class EfficiencyLedger:
    trainable_param_count: int
    frozen_param_count: int
    activation_floats_saved_for_backward: int = 0
    full_finetune_activation_floats: int = 0
    epoch_wall_times: list[float] = field(default_factory=list)
    analytic_trainable_count: int | None = None

    @property
    def trainable_ratio(self) -> float:
        return self.trainable_param_count / max(self.frozen_param_count, 1)

    def to_text(self, include_times: bool = True) -> str:
        lines = [
            f"trainable_param_count = {self.trainable_param_count}",
            f"frozen_param_count = {self.frozen_param_count}",
            f"trainable_to_frozen_ratio = {self.trainable_ratio:.6f}",
        ]
        if self.full_finetune_activation_floats:  # zero means "not measured"
            lines += [
                f"activation_floats_saved_for_backward = "
                f"{self.activation_floats_saved_for_backward}",
                f"full_finetune_activation_floats = {self.full_finetune_activation_floats}",
            ]
        if self.analytic_trainable_count is not None:
            lines.append(f"analytic_trainable_count = {self.analytic_trainable_count}")
        lines.append("note = hub parameters are shared by every interaction layer")
        if include_times:
            lines.append("epoch_wall_times = "
                         + ", ".join(f"{t:.3f}" for t in self.epoch_wall_times))
        return "\n".join(lines) + "\n"


def _mlp_count(d_in: int, hidden: int, d_out: int) -> int:
    return d_in * hidden + hidden + hidden * d_out + d_out


def analytic_trainable_count(cfg: ExperimentConfig) -> int:
    """Closed-form trainable parameter count; no dependence on the layer schedule."""
    if cfg.mode == "baseline":
        return 1 if cfg.tau_trainable else 0
    dv, dt, p = cfg.d_vision, cfg.d_text, cfg.prompt_len
    n = p * dt + dt * dv + dv
    if cfg.mode == "epic":
        n += _mlp_count(dv, dv // 2, dv) + _mlp_count(dt, dt // 2, dt)
        hidden = (dv + dt) // 2
        n += _mlp_count(dt, hidden, dv) + _mlp_count(dv, hidden, dt)
    elif cfg.mode == "linear":
        n += (dv + dt) ** 2 + (dv + dt)
    return n + (1 if cfg.tau_trainable else 0)


def analytic_frozen_count(cfg: ExperimentConfig) -> int:
    def layer(d):
        h = cfg.mlp_ratio * d
        return 4 * (d * d + d) + 4 * d + d * h + h + h * d + d

    patch_dim = cfg.channels * cfg.patch_size ** 2
    n_patches = (cfg.image_size // cfg.patch_size) ** 2
    n = patch_dim * cfg.d_vision + cfg.d_vision + n_patches * cfg.d_vision
    n += cfg.vocab_size * cfg.d_text + cfg.text_len * cfg.d_text
    n += 2 * cfg.d_vision + 2 * cfg.d_text
    if cfg.d_vision != cfg.d_text:
        n += cfg.d_text * cfg.d_vision
    return n + cfg.n_layers * (layer(cfg.d_vision) + layer(cfg.d_text))


def count_params(cfg: ExperimentConfig) -> EfficiencyLedger:
    """Analytic counts only, without building or training anything."""
    n = analytic_trainable_count(cfg)
    return EfficiencyLedger(n, analytic_frozen_count(cfg), analytic_trainable_count=n)


def activation_floats(exp: Experiment, full_finetune: bool = False) -> int:
    """Floats held for backward by one training step on one batch."""
    cfg, model = exp.config, exp.model
    d = exp.data["train"]
    idx = np.arange(min(cfg.batch_size, len(d)))
    bb = exp.backbone
    if full_finetune:
        bb.set_trainable(True)
    try:
        u_v = bb.run_layers(VISION, bb.embed_images(d.images[idx]), 0, model.schedule.first)
        u_t = bb.run_layers(TEXT, bb.embed_tokens(d.tokens[idx]), 0,
                            min(model.schedule.first, bb.cfg.n_layers))
        loss = batch_loss(model, u_v, u_t, d.labels[idx], cfg.task, cfg.literal_losses)
        return T.saved_activation_floats(loss)
    finally:
        if full_finetune:
            bb.set_trainable(False)


def build_ledger(exp: Experiment) -> EfficiencyLedger:
    return EfficiencyLedger(
        trainable_param_count=exp.model.n_trainable(),
        frozen_param_count=exp.backbone.n_params(),
        activation_floats_saved_for_backward=activation_floats(exp),
        full_finetune_activation_floats=activation_floats(exp, full_finetune=True),
        analytic_trainable_count=analytic_trainable_count(exp.config),
    )


# --------------------------------------------------------------------- train


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[tuple]
    ledger: EfficiencyLedger
    checksum_before: str
    checksum_after: str
    final: dict[str, float]
    run_dir: Path | None = None

    def metrics_csv(self) -> str:
        return rows_to_csv(METRIC_HEADER, self.rows)


def rows_to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None,
          backbone: FrozenBackbone | None = None, zero_prompt_grads: bool = False,
          save: bool = True) -> RunResult:
    """Optimise the trainable leaves of ``cfg.mode`` and log per-epoch metrics.

    ``zero_prompt_grads`` discards every gradient before the update (negative
    control: nothing may change).
    """
    exp = build_experiment(cfg, backbone)
    model, bb = exp.model, exp.backbone
    checksum_before = bb.checksum()
    params = model.trainable_parameters()
    opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    task = cfg.task
    layers = "-".join(str(l) for l in model.schedule.interaction_layers) or "none"
    ident = (cfg.run_id, cfg.mode, cfg.similarity, layers, cfg.seed)
    rows: list[tuple] = []
    ledger = build_ledger(exp)

    def log_eval(epoch: int) -> dict[str, float]:
        last = {}
        for split in ("val", "test"):
            u_v, u_t = exp.features[split]
            res = evaluate(model, u_v, u_t, exp.data[split].labels, task)
            for name, value in res.items():
                rows.append(ident + (epoch, split, name, _fmt(value)))
                last[f"{split}_{name}"] = value
        return last

    final = log_eval(0)
    train_set = exp.data["train"]
    u_v_all, u_t_all = exp.features["train"]
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = batch_loss(model, u_v_all[idx], u_t_all[idx], train_set.labels[idx], task,
                              cfg.literal_losses)
            value = loss.item()
            if not np.isfinite(value):
                bad = T.first_nonfinite(loss)
                where = bad.op if bad is not None else "input"
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}; first non-finite op: {where}")
            losses.append(value)
            if not params:
                continue
            opt.zero_grad()
            loss.backward()
            if zero_prompt_grads:
                opt.zero_grad()
            opt.step()
        rows.append(ident + (epoch, "train", "loss", _fmt(np.mean(losses))))
        final = log_eval(epoch)
        ledger.epoch_wall_times.append(time.perf_counter() - start)
        log.debug("%s epoch %d loss %.4f %s", cfg.run_id, epoch, np.mean(losses), final)

    result = RunResult(cfg, rows, ledger, checksum_before, bb.checksum(), final)
    if save and out_dir is not None:
        result.run_dir = write_run(result, exp, Path(out_dir))
    return result


def write_run(result: RunResult, exp: Experiment, out_dir: Path) -> Path:
    run_dir = out_dir / result.config.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    result.config.save(run_dir / "config.txt")
    save_checkpoint(run_dir / "checkpoint.npz", exp.backbone.named_parameters(),
                    exp.model.named_trainable())
    (run_dir / "metrics.csv").write_text(result.metrics_csv())
    (run_dir / "ledger.txt").write_text(result.ledger.to_text())
    return run_dir


def evaluate_checkpoint(cfg: ExperimentConfig, path: str | Path) -> list[tuple]:
    """Metric rows (split, metric, value) for a saved run, on val and test."""
    exp = build_experiment(cfg)
    _, arrays = load_checkpoint(path)
    frozen = exp.backbone.named_parameters()
    for name, t in frozen:
        if name not in arrays or not np.array_equal(arrays[name], t.data):
            raise ValueError(f"checkpoint backbone differs from config at {name}")
    restore(exp.model.named_trainable(), arrays)
    rows = []
    for split in ("val", "test"):
        u_v, u_t = exp.features[split]
        res = evaluate(exp.model, u_v, u_t, exp.data[split].labels, cfg.task)
        rows += [(split, k, _fmt(v)) for k, v in res.items()]
    return rows


# ------------------------------------------------------------ multi-run jobs


def _primary_metric(task: str) -> str:
    return "f1_micro" if task == "multi" else "accuracy"


def _run_job(cfg: ExperimentConfig) -> RunResult:
    return train(cfg, save=False)


def run_many(configs: Sequence[ExperimentConfig], workers: int = 1) -> list[RunResult]:
    """Independent runs; result order follows ``configs`` for any worker count."""
    if workers <= 1 or len(configs) <= 1:
        return [_run_job(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, configs))


def pooled_std(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.var(a, ddof=1) if len(a) > 1 else 0.0
    vb = np.var(b, ddof=1) if len(b) > 1 else 0.0
    return float(np.sqrt((va + vb) / 2.0))


ABLATION_HEADER = ("mode", "metric", "n_seeds", "mean", "std", "trainable_params",
                   "activation_floats")


@dataclass
class AblationTable:
    metric: str
    scores: dict[str, list[float]]  # mode -> per-seed test metric
    seeds: list[int]
    trainable: dict[str, int] = field(default_factory=dict)
    activations: dict[str, int] = field(default_factory=dict)

    def mean(self, mode: str) -> float:
        return float(np.mean(self.scores[mode]))

    def std(self, mode: str) -> float:
        s = self.scores[mode]
        return float(np.std(s, ddof=1)) if len(s) > 1 else 0.0

    def rows(self) -> list[tuple]:
        return [(mode, self.metric, len(s), _fmt(self.mean(mode)), _fmt(self.std(mode)),
                 self.trainable.get(mode, ""), self.activations.get(mode, ""))
                for mode, s in self.scores.items()]

    def per_seed_csv(self) -> str:
        rows = [(mode, seed, self.metric, _fmt(v))
                for mode, s in self.scores.items() for seed, v in zip(self.seeds, s)]
        return rows_to_csv(("mode", "seed", "metric", "value"), rows)

    def summary_csv(self) -> str:
        return rows_to_csv(ABLATION_HEADER, self.rows())

    def markdown(self) -> str:
        names = {"baseline": "Baseline", "ptuning": "P-tuning",
                 "linear": "Interaction (linear)", "epic": "EPIC"}
        marks = {"baseline": ("", "", ""), "ptuning": ("x", "", ""),
                 "linear": ("x", "x", ""), "epic": ("x", "x", "x")}
        out = [f"| | Tmp. prompt | P. interaction | Sim. strategy | {self.metric} (mean ± std) |",
               "|---|:-:|:-:|:-:|---|"]
        for mode in self.scores:
            a, b, c = marks[mode]
            out.append(f"| {names[mode]} | {a} | {b} | {c} | "
                       f"{100 * self.mean(mode):.2f} ± {100 * self.std(mode):.2f} |")
        return "\n".join(out) + "\n"


def ablate(base: ExperimentConfig, modes: Sequence[str] = MODES,
           seeds: Sequence[int] = range(5), workers: int = 1,
           out_dir: str | Path | None = None) -> AblationTable:
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    jobs = [base.replace(mode=m, seed=s) for m in modes for s in seeds]
    results = run_many(jobs, workers)
    metric = _primary_metric(base.task)
    scores = {m: [] for m in modes}
    table = AblationTable(metric, scores, seeds)
    for job, res in zip(jobs, results):
        scores[job.mode].append(res.final[f"test_{metric}"])
        table.trainable[job.mode] = res.ledger.trainable_param_count
        table.activations[job.mode] = res.ledger.activation_floats_saved_for_backward
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_runs.csv").write_text(table.per_seed_csv())
        (out / "ablation.csv").write_text(table.summary_csv())
        (out / "ablation.md").write_text(table.markdown())
    return table


SWEEP_HEADER = ("layers", "interval", "similarity", "mean", "std")


def layer_interval(layers: Sequence[int]) -> int:
    """Common spacing of an interaction-layer set; 0 for a single layer."""
    layers = sorted(layers)
    gaps = {b - a for a, b in zip(layers, layers[1:])}
    if not gaps:
        return 0
    if len(gaps) != 1:
        raise ValueError(f"layers {layers} are not evenly spaced")
    return gaps.pop()


def sweep(base: ExperimentConfig, layer_sets: Sequence[Sequence[int]],
          similarities: Sequence[str], seeds: Sequence[int] = range(5), workers: int = 1,
          out_dir: str | Path | None = None) -> list[tuple]:
    if not layer_sets or not similarities:
        raise ValueError("sweep grid is empty")
    for layers in layer_sets:
        if layer_interval(layers) not in (0, 1, 2):
            raise ValueError(f"interval of {list(layers)} must be 1 or 2")
    seeds = list(seeds)
    cells = [(tuple(layers), sim) for layers in layer_sets for sim in similarities]
    jobs = [base.replace(mode="epic", interaction_layers=layers, similarity=sim, seed=s)
            for layers, sim in cells for s in seeds]
    results = run_many(jobs, workers)
    metric = _primary_metric(base.task)
    rows = []
    for i, (layers, sim) in enumerate(cells):
        vals = [r.final[f"test_{metric}"] for r in results[i * len(seeds):(i + 1) * len(seeds)]]
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        rows.append(("-".join(str(l) for l in layers), layer_interval(layers), sim,
                     _fmt(np.mean(vals)), _fmt(std)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(rows_to_csv(SWEEP_HEADER, rows))
    return rows
