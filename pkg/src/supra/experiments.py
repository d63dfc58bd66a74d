"""Desk-scale uptraining ablation and attention-comparison runs.

Shared by ``scripts/``, the CLI and the acceptance suite so every consumer runs
the same recipe.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import compare, extract_attention
from .attention import preset
from .checkpoint import Checkpoint, supra_convert
from .data import PackedDataset, load_corpus
from .model import Model, ModelConfig, init_model
from .train import TrainPlan, evaluate_perplexity, train

log = logging.getLogger(__name__)


@dataclass
class AblationSetup:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    seq: int = 65  # chunk length; the model sees seq - 1 inputs per chunk
    batch_seqs: int = 16
    pretrain_steps: int = 1000
    pretrain_lr: tuple[float, float] = (1e-3, 1e-4)
    pretrain_warmup: int = 50
    uptrain_steps: int = 500
    uptrain_lr: tuple[float, float] = (3e-4, 1e-5)
    val_chunks: int = 64
    seed: int = 0
    dtype: str = "f32"

    def plan(self, steps: int, lr: tuple[float, float], **kw) -> TrainPlan:
        return TrainPlan(total_steps=steps, warmup_steps=max(1, steps // 10), lr_start=lr[0], lr_end=lr[1],
                         batch_tokens=self.batch_seqs * self.seq, seed=self.seed + 1, **kw)


@dataclass
class AblationResult:
    base_ppl: float
    converted_ppl: float
    ppl: dict[str, float] = field(default_factory=dict)
    models: dict[str, Model] = field(default_factory=dict)
    base: Model | None = None


def pretrain_base(setup: AblationSetup, data: PackedDataset) -> Model:
    dtype = np.float32 if setup.dtype == "f32" else np.float64
    cfg = ModelConfig(d_model=setup.d_model, n_heads=setup.n_heads, n_layers=setup.n_layers, d_ff=setup.d_ff,
                      attention=preset("softmax", setup.d_model, setup.n_heads), max_seq=setup.seq)
    model = init_model(cfg, seed=setup.seed, dtype=dtype)
    plan = replace(setup.plan(setup.pretrain_steps, setup.pretrain_lr),
                   warmup_steps=min(setup.pretrain_warmup, setup.pretrain_steps), seed=setup.seed)
    train(model, plan, data)
    return model


def uptrain_variant(setup: AblationSetup, base: Checkpoint, data: PackedDataset, variant: str) -> Model:
    """Convert ``base`` and uptrain one ablation variant.

    supra      all weights, N steps
    new_only   only surgery-added weights, N steps
    t2r        relu-MLP kernel with sum normalisation, no decay or rope, N steps
    staged     N steps on new weights, then N steps on all weights, each with its own schedule
    """
    n = setup.uptrain_steps
    kind = "t2r" if variant == "t2r" else "supra"
    ckpt, _ = supra_convert(base, preset(kind, setup.d_model, setup.n_heads))
    model = ckpt.to_model()
    if variant in ("supra", "t2r"):
        plan = setup.plan(n, setup.uptrain_lr)
    elif variant == "new_only":
        plan = setup.plan(n, setup.uptrain_lr, freeze="base_frozen")
    elif variant == "staged":
        plan = setup.plan(2 * n, setup.uptrain_lr, freeze="staged", stage_boundary=n)
        plan = replace(plan, warmup_steps=max(1, n // 10))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    train(model, plan, data)
    return model


def run_ablation(setup: AblationSetup | None = None, variants=("supra", "new_only", "t2r", "staged"),
                 corpus=None) -> AblationResult:
    setup = setup or AblationSetup()
    data = load_corpus(corpus, max_seq=setup.seq, seed=setup.seed)
    val = data.val[:setup.val_chunks]
    base = pretrain_base(setup, data)
    base_ck = Checkpoint.from_model(base)
    converted = supra_convert(base_ck, preset("supra", setup.d_model, setup.n_heads))[0].to_model()
    res = AblationResult(evaluate_perplexity(base, val), evaluate_perplexity(converted, val), base=base)
    log.info("base ppl %.4f, converted (no uptraining) ppl %.4f", res.base_ppl, res.converted_ppl)
    for v in variants:
        m = uptrain_variant(setup, base_ck, data, v)
        res.models[v] = m
        res.ppl[v] = evaluate_perplexity(m, val)
        log.info("%s ppl %.4f", v, res.ppl[v])
    return res


def attention_similarity(base: Model, other: Model, tokens) -> dict[str, np.ndarray]:
    """All four grids: cosine / SV distance, raw and row-normalized."""
    a = extract_attention(base, tokens, "base")
    b = extract_attention(other, tokens, "other")
    out = {}
    for metric in ("cosine", "singular_value_distance"):
        for norm in (False, True):
            out[f"{metric}{'_normalized' if norm else ''}"] = compare(a, b, metric, norm).values
    return out
