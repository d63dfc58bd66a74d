"""Adam, warmup+cosine schedule, freezing policies and the uptraining loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .model import Model, forward_parallel, recurrent_logits

FREEZE_POLICIES = ("none", "base_frozen", "staged")


class NumericAbort(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass
class TrainPlan:
    total_steps: int = 500
    warmup_steps: int = 50
    lr_start: float = 3e-4
    lr_end: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_tokens: int = 8192
    freeze: str = "none"
    stage_boundary: int = 0
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.freeze not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze policy {self.freeze!r}")
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need total_steps >= 1 and 0 <= warmup_steps <= total_steps")


def lr_at(plan: TrainPlan, step: int) -> float:
    """Linear warmup 0 -> lr_start, then cosine lr_start -> lr_end at total_steps."""
    if not 0 <= step <= plan.total_steps:
        raise ValueError(f"step {step} outside [0, {plan.total_steps}]")
    if step < plan.warmup_steps:
        return plan.lr_start * step / plan.warmup_steps
    span = plan.total_steps - plan.warmup_steps
    if span == 0:
        return plan.lr_end if step == plan.total_steps and plan.warmup_steps == 0 else plan.lr_start
    progress = (step - plan.warmup_steps) / span
    return plan.lr_end + 0.5 * (plan.lr_start - plan.lr_end) * (1.0 + math.cos(math.pi * progress))


def scheduled_lr(plan: TrainPlan, step: int) -> float:
    """lr for update ``step`` (1-based). A staged plan restarts warmup+cosine at the boundary."""
    b = plan.stage_boundary
    if plan.freeze != "staged" or b <= 0 or b >= plan.total_steps:
        return lr_at(plan, step)
    if step <= b:
        return lr_at(replace(plan, freeze="none", total_steps=b, warmup_steps=min(plan.warmup_steps, b)), step)
    rest = plan.total_steps - b
    return lr_at(replace(plan, freeze="none", total_steps=rest, warmup_steps=min(plan.warmup_steps, rest)), step - b)


class Adam:
    """Adam with bias correction; weight decay is decoupled (AdamW style) when nonzero."""

    def __init__(self, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place update of ``param``."""
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        if self.weight_decay:
            param -= lr * self.weight_decay * param
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def trainable_names(model: Model, plan: TrainPlan, step: int) -> list[str]:
    names = sorted(model.params)
    if plan.freeze == "none" or (plan.freeze == "staged" and step >= plan.stage_boundary):
        return names
    return [n for n in names if n in model.new_params]


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def without_time(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "millis"} for r in self.steps]

    def final_loss(self, window: int = 20) -> float:
        return float(np.mean([r["loss"] for r in self.steps[-window:]]))


def _step_loss(model: Model, batch: np.ndarray) -> T.Tensor:
    logits = forward_parallel(model, batch[:, :-1])
    return T.cross_entropy(logits, batch[:, 1:])


def train(model: Model, plan: TrainPlan, data, val: np.ndarray | None = None,
          log_path: str | Path | None = None, on_step: Callable[[dict], None] | None = None):
    """Run ``plan.total_steps`` Adam updates on batches from ``data`` (a PackedDataset).

    Returns (model, TrainLog). The model is updated in place.
    """
    seq = data.max_seq
    batch_size = max(1, plan.batch_tokens // seq)
    batches = data.batches(batch_size, plan.seed)
    opt = Adam(plan.beta1, plan.beta2, plan.eps, plan.weight_decay)
    log = TrainLog()
    tokens = 0
    fh = open(log_path, "a") if log_path else None
    try:
        for step in range(plan.total_steps):
            t0 = time.perf_counter()
            lr = scheduled_lr(plan, step + 1)
            names = trainable_names(model, plan, step)
            batch = next(batches)
            model.zero_grad()
            try:
                with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are caught below
                    loss = _step_loss(model, batch)
                    loss.backward()
            except (T.NonFiniteError, FloatingPointError) as e:
                raise NumericAbort(step + 1, f"non-finite value in forward/backward ({e})") from e
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericAbort(step + 1, f"loss is {lv}")
            grads = {n: model.params[n].grad for n in names if model.params[n].grad is not None}
            gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if not math.isfinite(gnorm):
                raise NumericAbort(step + 1, "non-finite gradient norm")
            clip = plan.grad_clip / gnorm if plan.grad_clip and gnorm > plan.grad_clip else 1.0
            for n, g in grads.items():
                opt.update(n, model.params[n].data, g * clip if clip != 1.0 else g, lr)
            tokens += batch[:, 1:].size
            rec = {"step": step + 1, "lr": lr, "loss": lv, "tokens": tokens,
                   "millis": round(1000 * (time.perf_counter() - t0), 3)}
            log.steps.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if plan.eval_every and val is not None and (step + 1) % plan.eval_every == 0:
                log.evals.append({"step": step + 1, "val_ppl": evaluate_perplexity(model, val)})
    finally:
        if fh:
            fh.close()
        model.zero_grad()
    return model, log


def _chunk_nll(logits: np.ndarray, targets: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return math.fsum(lse - z[np.arange(len(targets)), targets])


def evaluate_perplexity(model: Model, chunks: np.ndarray, mode: str = "parallel", batch_size: int = 16) -> float:
    """exp(mean next-token cross-entropy) over every chunk, teacher-forced."""
    chunks = np.asarray(chunks, dtype=np.int64)
    if chunks.ndim == 1:
        chunks = chunks[None]
    if len(chunks) == 0 or chunks.shape[1] < 2:
        raise ValueError("need at least one chunk of two or more tokens")
    nll = []
    with T.no_grad():
        if mode == "parallel":
            for i in range(0, len(chunks), batch_size):
                b = chunks[i:i + batch_size]
                lg = forward_parallel(model, b[:, :-1]).data
                nll.extend(_chunk_nll(lg[j], b[j, 1:]) for j in range(len(b)))
        elif mode == "recurrent":
            for c in chunks:
                nll.append(_chunk_nll(recurrent_logits(model, c[:-1]), c[1:]))
        else:
            raise ValueError(f"unknown eval mode {mode!r}")
    count = chunks.shape[0] * (chunks.shape[1] - 1)
    return math.exp(math.fsum(nll) / count)


def plan_dict(plan: TrainPlan) -> dict:
    return asdict(plan)
