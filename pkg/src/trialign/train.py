"""Optimization loop: SGD/Adam, LR schedules, eval hooks, run logging.

The loop is single-threaded and fully deterministic given its seeds: batch
shuffles take a per-epoch child seed of ``rng_seed``, the matching-loss
negative plans take a per-step child seed, and all arithmetic is float64
numpy. Two runs with the same configs produce bitwise-identical run logs
and parameters.

A non-finite loss or gradient aborts the run with a ``NumericalAbort``
carrying the offending step and components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TriModalDataset, make_batches
from .errors import NumericalAbort
from .losses import LossConfig, sample_negative_captions, total_loss
from .nn import EncoderStack, Mlp, ParamView

_OPTIMIZERS = ("sgd", "adam")
_SCHEDULES = ("constant", "linear")


@dataclass
class OptimConfig:
    """Optimizer family, schedule, and budget.

    Exactly one of ``steps`` / ``epochs`` sets the budget (steps wins if
    both are given). ``total_steps`` scopes the linear decay and defaults
    to the budget. A budget of 0 steps is a no-op run: the model comes
    back untouched.
    """

    optimizer: str = "adam"
    lr0: float = 1e-4
    schedule: str = "linear"
    total_steps: int | None = None
    steps: int | None = None
    epochs: int | None = None
    batch_size: int = 128
    eval_every: int = 50
    rng_seed: int = 0
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in _SCHEDULES:
            raise ValueError(f"schedule must be one of {_SCHEDULES}, got {self.schedule!r}")
        if not (np.isfinite(self.lr0) and self.lr0 > 0.0):
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.steps is None and self.epochs is None:
            raise ValueError("set a budget: steps or epochs")
        if self.steps is not None and self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")


def lr_at(cfg: OptimConfig, step: int, total_steps: int | None = None) -> float:
    """Learning rate at a step: constant, or linear decay floored at 0."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.schedule == "constant":
        return cfg.lr0
    total = total_steps if total_steps is not None else cfg.total_steps
    if total is None or total < 1:
        raise ValueError("linear decay needs total_steps")
    return cfg.lr0 * max(0.0, 1.0 - step / total)


def step_sgd(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    return params - lr * grads


class Adam:
    """Standard Adam with bias correction; moments persist across steps."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale grads so the global L2 norm is at most max_norm."""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads, norm


@dataclass
class RunLog:
    """Per-step and per-eval records, serialized one JSON object per line."""

    records: list = field(default_factory=list)

    def add(self, record: dict) -> None:
        self.records.append(record)

    def steps(self) -> list:
        return [r for r in self.records if r["kind"] == "step"]

    def evals(self) -> list:
        return [r for r in self.records if r["kind"] == "eval"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, path) -> "RunLog":
        lines = Path(path).read_text().splitlines()
        return cls(records=[json.loads(line) for line in lines if line.strip()])


@dataclass
class TrainResult:
    stack: EncoderStack
    matcher: Mlp | None
    log: RunLog
    best_step: int | None = None
    best_metric: float | None = None
    best_stack: EncoderStack | None = None


def _child_seed(base: int, stream: int, index: int) -> int:
    state = np.random.SeedSequence([int(base), int(stream), int(index)]).generate_state(1)
    return int(state[0])


def train(stack: EncoderStack, matcher: Mlp | None, train_ds: TriModalDataset,
          loss_cfg: LossConfig, optim_cfg: OptimConfig, eval_fn=None) -> TrainResult:
    """Run the budget, applying total-loss gradients to stack (+ matcher).

    ``eval_fn(stack) -> dict`` is called before the first step, every
    ``eval_every`` steps, and at the end; its dict lands in the run log and
    its "r1" key drives best-checkpoint selection (earliest step wins ties).
    Mutates ``stack``/``matcher`` in place and also returns them.
    """
    if train_ds.size < 1:
        raise ValueError("training dataset is empty")
    use_matcher = loss_cfg.dtm_weight > 0.0
    if use_matcher and matcher is None:
        raise ValueError("dtm_weight > 0 requires a matcher")
    modules = list(stack.encoders()) + ([matcher] if use_matcher else [])
    view = ParamView(modules)
    params = view.get_flat()

    batches_per_epoch = train_ds.size // optim_cfg.batch_size
    if optim_cfg.steps is not None:
        budget = optim_cfg.steps
    else:
        budget = optim_cfg.epochs * batches_per_epoch
    if budget > 0 and batches_per_epoch == 0:
        raise ValueError(
            f"batch_size {optim_cfg.batch_size} exceeds training set size {train_ds.size}")
    total_for_decay = optim_cfg.total_steps if optim_cfg.total_steps is not None else max(budget, 1)

    adam = Adam(view.total, optim_cfg.beta1, optim_cfg.beta2, optim_cfg.adam_eps) \
        if optim_cfg.optimizer == "adam" else None

    log = RunLog()
    best_step: int | None = None
    best_metric: float | None = None
    best_stack: EncoderStack | None = None

    def run_eval(step: int):
        nonlocal best_step, best_metric, best_stack
        metrics = eval_fn(stack)
        log.add({"kind": "eval", "step": step, **metrics})
        r1 = metrics.get("r1")
        if r1 is not None and (best_metric is None or r1 > best_metric):
            best_metric = float(r1)
            best_step = step
            best_stack = stack.clone()

    if eval_fn is not None:
        run_eval(0)

    step = 0
    epoch = 0
    while step < budget:
        epoch_seed = _child_seed(optim_cfg.rng_seed, 1, epoch)
        for batch in make_batches(train_ds, optim_cfg.batch_size, epoch_seed, drop_last=True):
            if step >= budget:
                break
            lr = lr_at(optim_cfg, step, total_for_decay)
            t_emb, v_emb, a_emb, tapes = stack.embed(
                batch.text_inputs, batch.video_inputs, batch.audio_inputs)
            plan = None
            if use_matcher and batch.size >= 2:
                plan_rng = np.random.default_rng(_child_seed(optim_cfg.rng_seed, 2, step))
                plan = sample_negative_captions(batch.size, plan_rng)
            out = total_loss(t_emb, v_emb, a_emb, loss_cfg, matcher, plan)
            if not np.isfinite(out.value):
                raise NumericalAbort(step, {"loss": out.value, **out.components})

            _, g_text = stack.text.backward(tapes[0], out.d_text)
            _, g_video = stack.video.backward(tapes[1], out.d_video)
            _, g_audio = stack.audio.backward(tapes[2], out.d_audio)
            module_grads = [g_text, g_video, g_audio]
            if use_matcher:
                module_grads.append(out.matcher_grads)
            flat_grads = view.flatten_grads(module_grads)
            if not np.all(np.isfinite(flat_grads)):
                raise NumericalAbort(step, {"loss": out.value, "gradient": float("nan")})
            flat_grads, grad_norm = clip_global_norm(flat_grads, optim_cfg.clip_norm)

            if adam is not None:
                params = adam.step(params, flat_grads, lr)
            else:
                params = step_sgd(params, flat_grads, lr)
            view.set_flat(params)

            record = {"kind": "step", "step": step, "lr": lr, "loss": out.value,
                      "grad_norm": grad_norm}
            record.update(out.components)
            log.add(record)
            step += 1
            if eval_fn is not None and (step % optim_cfg.eval_every == 0 or step == budget):
                run_eval(step)
        epoch += 1

    return TrainResult(stack=stack, matcher=matcher, log=log,
                       best_step=best_step, best_metric=best_metric,
                       best_stack=best_stack)
