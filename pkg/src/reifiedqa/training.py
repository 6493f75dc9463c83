"""Joint training: multi-label BCE, Adam with gradient accumulation, early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, ResolutionError, TrainingError
from .model import VARIANTS, ModelParams, QAExample, QAModel, check_variant

logger = logging.getLogger(__name__)

CLAMP = 1e-7
LOG_HEADER = ("step", "train_loss", "dev_hits1", "lr", "wall_seconds")


def bce_loss(y_hat, y) -> tuple[float, np.ndarray]:
    """Mean negative binary cross-entropy over all entities and its gradient.

    ``y_hat`` is clamped to ``[1e-7, 1 - 1e-7]`` inside the logs; the
    gradient is zero wherever the clamp is active.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y_hat.size
    p = np.clip(y_hat, CLAMP, 1.0 - CLAMP)
    loss = -float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p))) / n
    grad = -(y / p - (1.0 - y) / (1.0 - p)) / n
    grad[(y_hat < CLAMP) | (y_hat > 1.0 - CLAMP)] = 0.0
    return loss, grad


def k_hot(ids: Sequence[int], n: int) -> np.ndarray:
    y = np.zeros(n)
    y[list(ids)] = 1.0
    return y


@dataclass
class TrainConfig:
    batch_size: int = 32
    grad_accumulation: int = 8
    max_steps: int = 20000
    learning_rate: float = 1e-4
    t_max: int = 1
    patience: int = 5
    eval_every: int = 200
    variant: str = "e2e"
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "grad_accumulation", "max_steps", "t_max", "patience", "eval_every"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be nonnegative, got {self.learning_rate!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @classmethod
    def simple_questions(cls, **overrides) -> "TrainConfig":
        """Hyperparameters used for the single-hop dataset."""
        base = dict(batch_size=32, grad_accumulation=8, max_steps=20000, learning_rate=1e-4, t_max=1)
        return cls(**{**base, **overrides})

    @classmethod
    def webqsp(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=6, grad_accumulation=32, max_steps=30000, learning_rate=1e-4, t_max=3)
        return cls(**{**base, **overrides})

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


class Adam:
    def __init__(self, params: ModelParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(params.named(), grads.named(), self.m.named(), self.v.named()):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr:
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class StepResult:
    loss: float
    n_used: int
    n_skipped: int


def example_loss_and_grad(model: QAModel, params: ModelParams, example: QAExample, variant: str, out: ModelParams | None = None, scale: float = 1.0) -> float:
    """Loss of one example; adds ``scale * dloss/dparams`` into ``out`` when given."""
    fwd = model.forward(params, example, variant)
    loss, g = bce_loss(fwd.y_hat, k_hot(example.answers, model.n_entities))
    if out is not None:
        model.backward(params, fwd, g * scale, out)
    return loss


def train_step(model: QAModel, params: ModelParams, optimizer: Adam, micro_batches: Sequence[Sequence[QAExample]], config: TrainConfig) -> StepResult:
    """Accumulate batch-mean gradients over ``micro_batches`` then take one Adam step.

    Skipped examples (no candidates / no gold span) are left out of both the
    loss and the gradient.  A non-finite loss aborts the step with params
    untouched.
    """
    grads = params.zeros_like()
    total, used, skipped = 0.0, 0, 0
    n_micro = len(micro_batches)
    for batch in micro_batches:
        fwds = []
        for ex in batch:
            try:
                fwds.append(model.forward(params, ex, config.variant))
            except ResolutionError:
                skipped += 1
        if not fwds:
            continue
        scale = 1.0 / (len(fwds) * n_micro)
        for fwd in fwds:
            loss, g = bce_loss(fwd.y_hat, k_hot(fwd.example.answers, model.n_entities))
            if not math.isfinite(loss):
                raise TrainingError(
                    "non-finite loss; step aborted",
                    {"question": fwd.example.question, "loss": loss, "params_finite": params.all_finite()},
                )
            model.backward(params, fwd, g * scale, grads)
            total += loss * scale
            used += 1
    if not grads.all_finite():
        raise TrainingError("non-finite gradient; step aborted", {"params_finite": params.all_finite()})
    if used:
        optimizer.step(params, grads, config.learning_rate)
    return StepResult(total if used else float("nan"), used, skipped)


class BatchStream:
    """Endless reshuffled micro-batches over a training split."""

    def __init__(self, examples: Sequence[QAExample], batch_size: int, rng):
        if not examples:
            raise ValueError("training split is empty")
        self.examples = list(examples)
        self.batch_size = batch_size
        self.rng = rng
        self._order: list[int] = []

    def next_batch(self) -> list[QAExample]:
        batch = []
        while len(batch) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(len(self.examples)).tolist()
            batch.append(self.examples[self._order.pop()])
        return batch

    def __iter__(self) -> Iterator[list[QAExample]]:
        while True:
            yield self.next_batch()


def hits_at_1(model: QAModel, params: ModelParams, examples: Sequence[QAExample], variant: str) -> float:
    if not examples:
        return 0.0
    hits = 0
    for ex in examples:
        top = model.predict_one(params, ex, variant)
        hits += top is not None and top in ex.answers
    return hits / len(examples)


@dataclass
class TrainResult:
    params: ModelParams
    best_step: int
    best_dev: float
    steps_run: int
    log: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


class TrainLog:
    """Append-only TSV training log."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("\t".join(LOG_HEADER) + "\n")

    def append(self, **row) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write("\t".join(_fmt(row.get(k)) for k in LOG_HEADER) + "\n")


def train(
    model: QAModel,
    params: ModelParams,
    train_split: Sequence[QAExample],
    dev_split: Sequence[QAExample],
    config: TrainConfig,
    log_path=None,
    log_wall_time: bool = False,
    evaluate: Callable[[ModelParams], float] | None = None,
) -> TrainResult:
    """Train up to ``max_steps`` optimizer steps with dev-based early stopping.

    Dev Hits@1 is measured every ``eval_every`` steps and after the last
    step; the best-scoring parameters (earliest on ties) are returned.
    """
    check_variant(config.variant)
    if not dev_split:
        raise ValueError("dev split is empty")
    rng = np.random.default_rng(config.seed)
    stream = BatchStream(train_split, config.batch_size, rng)
    optimizer = Adam(params)
    log = TrainLog(log_path)
    if evaluate is None:
        def evaluate(p):
            return hits_at_1(model, p, dev_split, config.variant)

    start = time.perf_counter()
    best, best_step, best_dev = params.copy(), 0, -1.0
    bad_evals = 0
    losses: list[float] = []
    stopped = False
    step = 0
    for step in range(1, config.max_steps + 1):
        micro = [stream.next_batch() for _ in range(config.grad_accumulation)]
        res = train_step(model, params, optimizer, micro, config)
        if res.n_used:
            losses.append(res.loss)
        if step % config.eval_every == 0 or step == config.max_steps:
            dev = evaluate(params)
            train_loss = float(np.mean(losses)) if losses else float("nan")
            losses = []
            wall = round(time.perf_counter() - start, 3) if log_wall_time else None
            log.append(step=step, train_loss=train_loss, dev_hits1=dev, lr=config.learning_rate, wall_seconds=wall)
            logger.info("step %d loss %.6g dev hits@1 %.4f", step, train_loss, dev)
            if dev > best_dev:
                best, best_step, best_dev = params.copy(), step, dev
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= config.patience:
                    stopped = True
                    break
    return TrainResult(best, best_step, best_dev, step, log.rows, stopped)


# --- gradient audit ---------------------------------------------------------


@dataclass
class TensorAudit:
    name: str
    n_checked: int
    n_compared: int
    max_rel_error: float


@dataclass
class AuditReport:
    tensors: list[TensorAudit]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_rel_error": self.max_rel_error,
            "tensors": [asdict(t) for t in self.tensors],
        }


def analytic_grads(model: QAModel, params: ModelParams, example: QAExample, variant: str) -> ModelParams:
    grads = params.zeros_like()
    example_loss_and_grad(model, params, example, variant, out=grads)
    return grads


def bce_loss_delta(y_up, y_down, y) -> float:
    """``bce_loss(y_up, y)[0] - bce_loss(y_down, y)[0]`` without cancellation.

    Each entity's log terms are differenced as a log-ratio, so tiny finite
    difference signals survive rounding.
    """
    up = np.clip(np.asarray(y_up, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    down = np.clip(np.asarray(y_down, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    y = np.asarray(y, dtype=np.float64)
    pos = np.log1p((up - down) / down)
    neg = np.log1p((down - up) / (1.0 - down))
    return -math.fsum(y * pos + (1.0 - y) * neg) / up.size


def grad_audit(
    model: QAModel,
    params: ModelParams,
    example: QAExample,
    variant: str = "e2e",
    tolerance: float = 1e-4,
    max_coords: int = 500,
    eps: float = 1e-5,
    floor: float = 1e-8,
    rng=0,
    grad_fn: Callable[[QAModel, ModelParams, QAExample, str], ModelParams] = analytic_grads,
) -> AuditReport:
    """Compare analytic gradients with central finite differences.

    Up to ``max_coords`` coordinates per tensor are sampled.  Relative error is
    ``|a - n| / max(|a|, |n|)``; coordinates where both magnitudes are below
    ``floor`` are not compared.
    """
    rng = np.random.default_rng(rng)
    grads = grad_fn(model, params, example, variant)
    work = params.copy()
    target = k_hot(example.answers, model.n_entities)
    report = []
    for (name, p), (_, g) in zip(work.named(), grads.named()):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        n = flat_p.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        worst, compared = 0.0, 0
        for c in coords.tolist():
            orig = flat_p[c]
            flat_p[c] = orig + eps
            up = model.forward(work, example, variant).y_hat
            flat_p[c] = orig - eps
            down = model.forward(work, example, variant).y_hat
            flat_p[c] = orig
            num = bce_loss_delta(up, down, target) / (2 * eps)
            ana = flat_g[c]
            scale = max(abs(ana), abs(num))
            if scale < floor:
                continue
            compared += 1
            worst = max(worst, abs(ana - num) / scale)
        report.append(TensorAudit(name, int(coords.size), compared, worst))
    return AuditReport(report, tolerance)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(out_dir, params: ModelParams, config: dict | None = None, extra: dict | None = None) -> Path:
    """One little-endian float64 file per tensor plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in params.named():
        fname = f"{name}.bin"
        (out / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": "<f8"})
    manifest = {"tensors": entries, "config": config or {}}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, dict]:
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text(encoding="utf-8"))
    tensors = {}
    for entry in manifest["tensors"]:
        raw = np.fromfile(ckpt / entry["file"], dtype=entry["dtype"])
        tensors[entry["name"]] = raw.astype(np.float64).reshape(entry["shape"])
    return ModelParams.from_named(tensors), manifest
