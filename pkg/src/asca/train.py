"""AdamW + BCE training with cosine annealing, balanced sampling, mixup,
masking, stochastic depth and optional transient weight noise."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import AugmentConfig, example_rng, mixup_batch, spec_mask
from .data import stratified_split
from .io import save_checkpoint
from .metrics import EvalResult, evaluate_scores
from .model import ArchSpec, ModelWeights, init_weights, model_forward
from .tensor import (
    ConfigError,
    NonFiniteError,
    Tape,
    Tensor,
    sigmoid_np,
    backward,
    bce_with_logits,
    no_grad,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    lr0: float = 5e-5
    lr_min: float = 0.0
    epochs: int = 30
    schedule: str = "cosine"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    drop_path: float = 0.2  # drop probability of the deepest block
    weight_noise_std: float = 0.0
    seed: int = 0
    balanced: bool = True
    val_fraction: float = 0.1
    eval_every: int = 1
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.drop_path < 1:
            raise ConfigError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# schedule and optimizer


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr0
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str, param: Tensor) -> bool:
    """Norm affine parameters, biases and relative-position tables skip weight decay."""
    return not (name.endswith((".gamma", ".beta", ".bias", ".rel_bias")) or param.ndim <= 1)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW update with bias correction and decoupled decay."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        if cfg.weight_decay and decays(name, p):
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


# ---------------------------------------------------------------------------
# sampling


def class_members(targets: np.ndarray) -> list[np.ndarray]:
    return [np.flatnonzero(targets[:, k] > 0) for k in range(targets.shape[1])]


def balanced_sampler(targets: np.ndarray, rng: np.random.Generator, length: int | None = None) -> np.ndarray:
    """Pick a class uniformly, then one of its examples uniformly (with
    replacement). Classes without examples are an error."""
    members = class_members(targets)
    empty = [k for k, m in enumerate(members) if len(m) == 0]
    if empty:
        raise ConfigError(f"balanced sampling needs every class populated; empty: {empty}")
    n = len(targets) if length is None else length
    ks = rng.integers(0, len(members), size=n)
    return np.array([members[k][rng.integers(len(members[k]))] for k in ks], dtype=int)


# ---------------------------------------------------------------------------
# evaluation


def predict_logits(spec: ArchSpec, weights: ModelWeights, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    dtype = next(iter(weights.params.values())).dtype
    with no_grad():
        for s in range(0, len(inputs), batch_size):
            x = Tensor(np.asarray(inputs[s:s + batch_size], dtype=dtype))
            out.append(model_forward(x, spec, weights, train=False).data)
    return np.concatenate(out) if out else np.zeros((0, spec.num_classes))


def dataset_inputs(dataset) -> np.ndarray:
    return np.stack([dataset.example(i) for i in range(len(dataset))])


def evaluate(spec: ArchSpec, weights: ModelWeights, dataset, batch_size: int = 32) -> EvalResult:
    logits = predict_logits(spec, weights, dataset_inputs(dataset), batch_size)
    return evaluate_scores(sigmoid_np(logits.astype(np.float64)), dataset.targets)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    spec: ArchSpec
    weights: ModelWeights
    best_weights: ModelWeights
    history: list[dict]
    best_map: float
    checkpoint: Path | None = None

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.history if r["kind"] == "step"]

    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.history if r["kind"] == "step"]

    def epochs(self) -> list[dict]:
        return [r for r in self.history if r["kind"] == "epoch"]


def snapshot(w: ModelWeights) -> ModelWeights:
    from .tensor import BatchNormState

    return ModelWeights(
        {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in w.params.items()},
        {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum) for k, s in w.bn.items()},
    )


def make_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [b for b in batches if len(b) >= 2]


def train(dataset, spec: ArchSpec, cfg: TrainConfig | None = None, aug: AugmentConfig | None = None,
          out_dir=None, weights: ModelWeights | None = None, max_steps: int | None = None,
          on_step: Callable[[dict], None] | None = None, meta: dict | None = None) -> TrainResult:
    """Run the epoch loop; returns final and best weights plus the log.

    With ``out_dir`` the JSON-lines log goes to ``metrics.jsonl`` and the
    best-mAP weights to ``best.ckpt``. ``val_fraction=0`` evaluates on the
    training examples themselves. ``on_step`` sees every log record; a true
    return value ends training after that record.
    """
    cfg = cfg or TrainConfig()
    aug = aug or AugmentConfig()
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    if dataset.targets.shape[1] != spec.num_classes:
        raise ConfigError(f"dataset has {dataset.targets.shape[1]} classes, model {spec.num_classes}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fp = open(out_dir / "metrics.jsonl", "w") if out_dir is not None else None

    w = weights if weights is not None else init_weights(spec, cfg.seed)
    params = w.params
    opt = OptimizerState()
    train_idx, val_idx = stratified_split(dataset.targets, cfg.val_fraction, cfg.seed)
    train_set = dataset.subset(train_idx)
    eval_set = dataset.subset(val_idx) if len(val_idx) else train_set
    targets = train_set.targets
    steps_per_epoch = len(make_batches(np.arange(len(train_set)), cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    last = max(total - 1, 1)
    history: list[dict] = []
    best_key, best_map, best = (-1.0, -1.0), -1.0, snapshot(w)
    ckpt_path = out_dir / "best.ckpt" if out_dir is not None else None

    stop = False

    def emit(rec):
        nonlocal stop
        history.append(rec)
        if log_fp is not None:
            log_fp.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fp.flush()
        if on_step is not None and on_step(rec):
            stop = True

    step = 0
    try:
        for epoch in range(cfg.epochs):
            if step >= total or stop:
                break
            order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch]))
            order = balanced_sampler(targets, order_rng) if cfg.balanced else order_rng.permutation(len(targets))
            for bi, batch in enumerate(make_batches(order, cfg.batch_size)):
                if step >= total or stop:
                    break
                xs = []
                for pos, i in enumerate(batch):
                    erng = example_rng(cfg.seed, epoch, bi * cfg.batch_size + pos)
                    x = train_set.example(int(i), erng, aug, train=True)
                    if aug.mask:
                        x = spec_mask(x, aug, erng)
                    xs.append(x)
                x = np.stack(xs)
                y = targets[batch]
                step_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, step]))
                if aug.mixup:
                    x, y = mixup_batch(x, y, aug.mixup_alpha, step_rng)
                lr = cosine_lr(step, last, cfg.lr0, cfg.lr_min) if cfg.schedule == "cosine" else cfg.lr0
                loss = _step(x, y, spec, w, cfg, lr, step_rng, opt, step, batch, out_dir)
                emit({"kind": "step", "step": step, "epoch": epoch, "lr": lr, "loss": loss})
                step += 1
            if (epoch + 1) % cfg.eval_every == 0 or step >= total or stop or epoch == cfg.epochs - 1:
                res = evaluate(spec, w, eval_set, cfg.eval_batch_size)
                emit({"kind": "epoch", "epoch": epoch, "step": step, "mAP": res.map,
                      "acc": res.top1_accuracy, "lr": lr, "loss": loss})
                if (res.map, res.top1_accuracy) > best_key:  # accuracy breaks mAP ties
                    best_key, best_map, best = (res.map, res.top1_accuracy), res.map, snapshot(w)
                    if ckpt_path is not None:
                        save_checkpoint(ckpt_path, spec, w, meta)
    finally:
        if log_fp is not None:
            log_fp.close()
    return TrainResult(spec, w, best, history, best_map, ckpt_path)


def _step(x, y, spec, w, cfg, lr, rng, opt, step, batch, out_dir) -> float:
    params = w.params
    saved = None
    if cfg.weight_noise_std > 0:
        saved = {k: p.data.copy() for k, p in params.items()}
        std = cfg.weight_noise_std * lr
        for p in params.values():
            p.data += (std * rng.standard_normal(p.shape)).astype(p.dtype)
    try:
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            dtype = next(iter(params.values())).dtype
            logits = model_forward(Tensor(x.astype(dtype)), spec, w, train=True, rng=rng,
                                   drop_path=cfg.drop_path)
            loss = bce_with_logits(logits, y.astype(logits.dtype))
        backward(loss, tape, params.values())
    except NonFiniteError as e:
        if out_dir is not None:
            np.savez(Path(out_dir) / f"diverged_step{step}.npz", x=x, y=y, batch=np.asarray(batch))
        raise TrainingDiverged(f"step {step}: {e} (batch example ids {list(map(int, batch))})") from e
    finally:
        if saved is not None:
            for k, p in params.items():
                p.data[...] = saved[k]
    adamw_step(params, {k: p.grad for k, p in params.items()}, opt, lr, cfg)
    return float(loss.data)
