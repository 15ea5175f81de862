"""Joint optimisation of prediction and orthogonality losses, evaluation,
ablation comparisons and wall-clock overhead measurement."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, FeatureSchema, Splits, batch_iter
from .metrics import mean_auc, per_scenario
from .model import ModelConfig, OptMSM
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

ABLATIONS = ("no_priors", "no_constraint", "no_hypernetwork")
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray] | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    l2_weight: float = 1e-6
    dropout_rate: float = 0.0
    batch_size: int = 256
    lam: float = 0.1
    epochs: int = 20
    patience: int = 3
    seed: int = 0
    transfer_variant: str = "fcn"
    ablations: tuple[str, ...] = ()
    mode: str = "optmsm"

    def __post_init__(self):
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablations {sorted(bad)}; expected {ABLATIONS}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.learning_rate <= 0 or self.l2_weight < 0:
            raise ValueError("learning_rate must be > 0 and l2_weight >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("patience and batch_size must be >= 1, epochs >= 0")

    @property
    def effective_lambda(self) -> float:
        if self.mode != "optmsm" or "no_constraint" in self.ablations:
            return 0.0
        return self.lam

    def model_config(self, base: ModelConfig = ModelConfig()) -> ModelConfig:
        return replace(base, mode=self.mode, transfer=self.transfer_variant,
                       use_priors="no_priors" not in self.ablations,
                       use_hypernet="no_hypernetwork" not in self.ablations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d


# ---------------------------------------------------------------- losses / optimiser


def bce_loss(prob: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-12, 1 - 1e-12]."""
    return T.binary_cross_entropy(prob, np.asarray(labels, dtype=np.float64))


def adam_state(params: Mapping[str, np.ndarray]) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict,
              lr: float, l2_weight: float, t: int) -> None:
    """One bias-corrected Adam update in place, with ``l2_weight * theta`` added to each gradient."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(
                f"non-finite gradient in {name!r} at step {t} "
                f"(max |g| {np.nanmax(np.abs(np.where(np.isfinite(g), g, 0.0))):.3g})")
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, theta in params.items():
        g = grads[name]
        if l2_weight:
            g = g + l2_weight * theta
        m, v = state["m"][name], state["v"][name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def flat_views(params: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Copy parameters into one contiguous buffer; returns named views and the buffer."""
    flat = np.concatenate([v.ravel() for v in params.values()])
    views, offset = {}, 0
    for k, v in params.items():
        views[k] = flat[offset:offset + v.size].reshape(v.shape)
        offset += v.size
    return views, flat


# ---------------------------------------------------------------- one step


@dataclass
class StepResult:
    l_msm: float
    l_orth: float
    loss: float
    grads: dict[str, np.ndarray]


def loss_and_grads(model: OptMSM, params: Mapping[str, np.ndarray], batch: Dataset, lam: float,
                   dropout: float = 0.0, rng: np.random.Generator | None = None) -> StepResult:
    """Forward, L = L_msm + lam * L_orth, backward.  Gradients are zero where unreachable."""
    order = np.argsort(batch.scenario, kind="stable")
    batch = batch.subset(order)  # contiguous scenario blocks; the mean loss is order-free
    leaves = {k: T.parameter(v, name=k) for k, v in params.items()}
    with Tape() as tape:
        out = model.forward(leaves, batch, dropout=dropout, rng=rng, orth_grad=lam > 0)
        l_msm = bce_loss(out.prob, batch.labels)
        loss = T.add(l_msm, T.scale(out.orth, lam)) if lam > 0 else l_msm
        grads = T.backward(tape, loss, leaves.values())
    lm, lo = l_msm.item(), out.orth.item()
    return StepResult(lm, lo, lm + lam * lo, grads)


# ---------------------------------------------------------------- evaluation


def evaluate(model: OptMSM, params: Mapping[str, np.ndarray], data: Dataset) -> dict[int, dict]:
    probs = model.predict(params, data)
    return per_scenario(probs, data.labels, data.scenario, model.M)


def _records(epoch, split, report, extra) -> list[dict]:
    return [{"epoch": epoch, "split": split, "scenario": m, **rec, **extra}
            for m, rec in report.items()]


@dataclass
class TrainResult:
    model: OptMSM
    params: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int
    epoch_seconds: list[float] = field(default_factory=list)


def train(splits: Splits, schema: FeatureSchema, config: TrainConfig,
          model_config: ModelConfig = ModelConfig(), metrics_path: str | Path | None = None,
          evaluate_each_epoch: bool = True) -> TrainResult:
    """Adam on L = L_msm + lambda * L_orth with early stopping on mean validation AUC.

    Returns the parameters of the best validation epoch (epoch 0 is the
    initialisation).  Metrics records go to ``metrics_path`` as JSON lines.
    """
    model = OptMSM(schema, config.model_config(model_config))
    params, flat = flat_views(model.init_params(config.seed))
    state = adam_state({"flat": flat})
    lam = config.effective_lambda
    drop_rng = np.random.default_rng([config.seed, 1])
    history: list[dict] = []
    base = {"lambda": lam}

    report = evaluate(model, params, splits.valid)
    history += _records(0, "valid", report, {**base, "l_msm": None, "l_orth": None,
                                             "loss": None, "seconds": 0.0})
    best_score, best_epoch = mean_auc(report), 0
    best = {k: v.copy() for k, v in params.items()}
    if math.isnan(best_score):
        best_score = -math.inf
    stale, t = 0, 0
    epoch_seconds = []

    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        n = 0
        start = time.perf_counter()
        for batch in batch_iter(splits.train, config.batch_size, shuffle_seed=config.seed * 1000 + epoch):
            step = loss_and_grads(model, params, batch, lam, config.dropout_rate, drop_rng)
            if not math.isfinite(step.loss):
                raise TrainingDivergedError(f"loss became {step.loss} in epoch {epoch}", best)
            t += 1
            grad = np.concatenate([step.grads[k].ravel() for k in params])
            if not np.isfinite(grad).all():
                bad = [k for k in params if not np.isfinite(step.grads[k]).all()]
                raise TrainingDivergedError(
                    f"non-finite gradient in {', '.join(bad)} at step {t} (epoch {epoch})", best)
            adam_step({"flat": flat}, {"flat": grad}, state, config.learning_rate,
                      config.l2_weight, t)
            w = len(batch)
            sums += w * np.array([step.l_msm, step.l_orth, step.loss])
            n += w
        seconds = time.perf_counter() - start
        epoch_seconds.append(seconds)
        l_msm, l_orth, loss = (sums / max(n, 1)).tolist()
        extra = {**base, "l_msm": l_msm, "l_orth": l_orth, "loss": loss, "seconds": seconds}
        if not evaluate_each_epoch:
            history.append({"epoch": epoch, "split": "train", "scenario": None, **extra})
            best, best_epoch = params, epoch
            continue
        report = evaluate(model, params, splits.valid)
        history += _records(epoch, "valid", report, extra)
        score = mean_auc(report)
        logger.info("epoch %d loss %.5f (msm %.5f orth %.3f) valid mean AUC %.4f (%.1fs)",
                    epoch, loss, l_msm, l_orth, score, seconds)
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break

    if evaluate_each_epoch:
        for split in ("train", "valid", "test"):
            history += _records("final", split, evaluate(model, best, splits[split]),
                                {**base, "best_epoch": best_epoch})
    if metrics_path is not None:
        write_metrics(metrics_path, history)
    return TrainResult(model, best, history, best_epoch, epoch_seconds)


VOLATILE = ("seconds",)  # wall-clock fields, kept out of the metrics file so it is reproducible


def timing_path(metrics_path: str | Path) -> Path:
    p = Path(metrics_path)
    return p.with_name(p.stem + ".timing.jsonl")


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_metrics(path: str | Path, history: Sequence[dict]) -> None:
    """Metrics as JSON lines; per-epoch wall-clock goes to a sibling ``*.timing.jsonl``."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            clean = {k: _clean(v) for k, v in rec.items() if k not in VOLATILE}
            fh.write(json.dumps(clean, sort_keys=True) + "\n")
    timed = [{"epoch": r["epoch"], "seconds": r["seconds"]} for r in history
             if r.get("seconds") is not None and r.get("scenario") in (1, None)]
    with open(timing_path(path), "w", encoding="utf-8") as fh:
        for rec in timed:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def final_metrics(history: Sequence[dict], split: str = "test") -> dict[int, dict]:
    return {r["scenario"]: {"auc": r["auc"], "logloss": r["logloss"], "n": r["n"]}
            for r in history if r["epoch"] == "final" and r["split"] == split}


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonRow:
    label: str
    scenario: int
    auc_mean: float
    auc_std: float
    logloss_mean: float
    logloss_std: float
    decrement_pct: float  # relative AUC change vs the first configuration
    aucs: list[float]


def _stat(vals: Sequence[float | None]) -> tuple[float, float]:
    v = np.array([x for x in vals if x is not None], dtype=np.float64)
    if not len(v):
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def compare(splits: Splits, schema: FeatureSchema,
            configs: Sequence[tuple[str, TrainConfig, ModelConfig]],
            seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> list[ComparisonRow]:
    """Train every (config, seed) cell and summarise test metrics per scenario."""
    if not seeds:
        raise ValueError("compare needs at least one seed")
    cells: dict[str, dict[int, list[dict]]] = {}
    for label, tcfg, mcfg in configs:
        per = cells.setdefault(label, {m: [] for m in range(1, schema.scenario_count + 1)})
        for seed in seeds:
            res = train(splits, schema, replace(tcfg, seed=seed), mcfg)
            for m, rec in final_metrics(res.history, "test").items():
                per[m].append(rec)
    rows = []
    first = configs[0][0]
    for label, _, _ in configs:
        for m, recs in cells[label].items():
            a_mean, a_std = _stat([r["auc"] for r in recs])
            l_mean, l_std = _stat([r["logloss"] for r in recs])
            ref, _ = _stat([r["auc"] for r in cells[first][m]])
            rows.append(ComparisonRow(label, m, a_mean, a_std, l_mean, l_std,
                                      100.0 * (a_mean - ref) / ref, [r["auc"] for r in recs]))
    return rows


def write_comparison(path: str | Path, rows: Sequence[ComparisonRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "scenario", "auc_mean", "auc_std", "logloss_mean", "logloss_std",
                    "decrement", "aucs"])
        for r in rows:
            w.writerow([r.label, r.scenario, f"{r.auc_mean:.6f}", f"{r.auc_std:.6f}",
                        f"{r.logloss_mean:.6f}", f"{r.logloss_std:.6f}",
                        f"({r.decrement_pct:+.2f}%)", " ".join(f"{a:.6f}" for a in r.aucs)])


# ---------------------------------------------------------------- overhead


def measure_overhead(splits: Splits, schema: FeatureSchema, base: tuple[TrainConfig, ModelConfig],
                     optmsm: tuple[TrainConfig, ModelConfig], epochs: int = 1,
                     repeats: int = 3) -> dict:
    """Relative extra training wall-clock per epoch: (t_optmsm - t_base) / t_base, medians of runs."""
    if base[0].batch_size != optmsm[0].batch_size:
        raise ValueError("overhead needs identical batch sizes")
    times = {"base": [], "optmsm": []}
    for _ in range(repeats):
        for key, (tcfg, mcfg) in (("base", base), ("optmsm", optmsm)):
            res = train(splits, schema, replace(tcfg, epochs=epochs), mcfg, evaluate_each_epoch=False)
            times[key].append(float(np.sum(res.epoch_seconds)) / epochs)
    tb, to = float(np.median(times["base"])), float(np.median(times["optmsm"]))
    return {"base_seconds": tb, "optmsm_seconds": to, "ratio": (to - tb) / tb, "runs": times}
