"""Decoder-only toy transformer with pre-LayerNorm blocks and an untied LM head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, KVCache, RecurrentState, attention_param_shapes, init_state,
                        multihead_attention_block, softmax_config)
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 259
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    attention: AttentionConfig = field(default_factory=softmax_config)
    max_seq: int = 256
    rope_base: float = 1e4

    def __post_init__(self):
        if self.max_seq < 1 or self.vocab < 2 or self.d_ff < self.d_model:
            raise ValueError("need max_seq >= 1, vocab >= 2, d_ff >= d_model")
        att = self.attention
        if (att.d_model, att.n_heads) != (self.d_model, self.n_heads):
            raise ValueError(f"attention geometry {att.d_model}/{att.n_heads} does not match model "
                             f"{self.d_model}/{self.n_heads}")
        if att.rope_base is not None and att.rope_base != self.rope_base:
            object.__setattr__(self, "attention", replace(att, rope_base=self.rope_base))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["attention"] = self.attention.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["attention"] = AttentionConfig.from_dict(d["attention"])
        return cls(**d)

    def with_attention(self, att: AttentionConfig) -> ModelConfig:
        return replace(self, attention=att)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (cfg.vocab, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.weight"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for name, shp in attention_param_shapes(cfg.attention).items():
            shapes[p + "attn." + name] = shp
        shapes[p + "ln2.weight"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.w1"] = (d, f)
        shapes[p + "mlp.b1"] = (f,)
        shapes[p + "mlp.w2"] = (f, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["lm_head"] = (d, cfg.vocab)
    return shapes


def _init_value(name: str, shape, rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
    if name.endswith(("ln1.weight", "ln2.weight", "ln_f.weight", "gn.weight")):
        return np.ones(shape)
    if name.endswith(("bias", ".b1", ".b2")):
        return np.zeros(shape)
    if name.endswith("kernel.weight"):
        return np.broadcast_to(np.eye(shape[-1]), shape).copy()
    std = 0.02
    if name.endswith(("attn.wo", "mlp.w2")):
        std = 0.02 / np.sqrt(2 * cfg.n_layers)
    if name == "tok_emb":
        std = 0.1
    return rng.normal(0.0, std, size=shape)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor]
    new_params: frozenset[str] = frozenset()  # names added by conversion surgery
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def layer_params(self, i: int, group: str) -> dict[str, Tensor]:
        pre = f"layers.{i}.{group}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float64, zero_head: bool = False) -> Model:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        val = _init_value(name, shape, rng, cfg)
        if zero_head and name == "lm_head":
            val = np.zeros(shape)
        params[name] = Tensor(val.astype(dtype), requires_grad=True, name=name)
    return Model(cfg, params)


def _bias_add(x: Tensor, b: Tensor) -> Tensor:
    return T.add(x, T.expand(b, x.shape))


def _mlp(p: dict, x: Tensor) -> Tensor:
    h = T.gelu(_bias_add(T.matmul(x, p["w1"]), p["b1"]))
    return _bias_add(T.matmul(h, p["w2"]), p["b2"])


def _check_tokens(model: Model, tokens: np.ndarray) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab):
        raise IndexError(f"token id out of range for vocab {model.cfg.vocab}")


def _trunk(model: Model, x: Tensor, mode: str, states=None, start_pos: int = 0, chunk: int = 16,
           capture: list | None = None, pre_output: list | None = None):
    cfg, p = model.cfg, model.params
    new_states = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = T.layer_norm(x, p[pre + "ln1.weight"], p[pre + "ln1.bias"])
        cap = [] if capture is not None else None
        po = [] if pre_output is not None else None
        a, st = multihead_attention_block(cfg.attention, model.layer_params(i, "attn"), h, mode,
                                          None if states is None else states[i], start_pos, chunk, cap, po)
        if capture is not None:
            capture.append(cap[0] if cap else None)
        if pre_output is not None:
            pre_output.append(po[0])
        new_states.append(st)
        x = T.add(x, a)
        h = T.layer_norm(x, p[pre + "ln2.weight"], p[pre + "ln2.bias"])
        x = T.add(x, _mlp(model.layer_params(i, "mlp"), h))
    x = T.layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])
    return T.matmul(x, p["lm_head"]), new_states


def forward_parallel(model: Model, tokens, mode: str = "parallel", chunk: int = 16, start_pos: int = 0,
                     capture: list | None = None, pre_output: list | None = None) -> Tensor:
    """Next-token logits for (S,) or (B, S) token ids; causal."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] > model.cfg.max_seq:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq {model.cfg.max_seq}")
    _check_tokens(model, tokens)
    x = T.embedding(model.params["tok_emb"], tokens)
    logits, _ = _trunk(model, x, mode, start_pos=start_pos, chunk=chunk, capture=capture, pre_output=pre_output)
    return logits


@dataclass
class ModelState:
    """Per-layer RecurrentState (linear configs) or KVCache (softmax)."""

    layers: list
    pos: int = 0

    def numel(self) -> int:
        return sum(s.numel() for s in self.layers)


def init_model_state(model: Model) -> ModelState:
    return ModelState([init_state(model.cfg.attention, model.dtype) for _ in range(model.cfg.n_layers)], 0)


def forward_recurrent(model: Model, state: ModelState, token: int) -> tuple[np.ndarray, ModelState]:
    """Logits for one token given the state of everything before it."""
    tok = np.asarray([int(token)], dtype=np.int64)
    _check_tokens(model, tok)
    with T.no_grad():
        x = T.embedding(model.params["tok_emb"], tok)
        logits, layers = _trunk(model, x, "recurrent", states=state.layers)
    return logits.data[0], ModelState(layers, state.pos + 1)


def recurrent_logits(model: Model, tokens) -> np.ndarray:
    """Run a whole sequence token-by-token; (S, V) logits."""
    state = init_model_state(model)
    out = []
    for t in np.asarray(tokens).reshape(-1):
        lg, state = forward_recurrent(model, state, int(t))
        out.append(lg)
    return np.stack(out)


def _pick(logits: np.ndarray, sampler, rng: np.random.Generator | None) -> int:
    if sampler == "greedy":
        return int(np.argmax(logits))
    temp = sampler[1]
    if temp <= 0:
        return int(np.argmax(logits))
    z = logits / temp
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def parse_sampler(spec: str):
    """'greedy' or 'temperature:T:SEED' -> sampler tuple."""
    if spec == "greedy":
        return "greedy"
    parts = spec.split(":")
    if parts[0] != "temperature" or len(parts) not in (2, 3):
        raise ValueError(f"bad sampler {spec!r}")
    return ("temperature", float(parts[1]), int(parts[2]) if len(parts) == 3 else 0)


def generate(model: Model, prompt, n_new: int, sampler="greedy", mode: str = "recurrent") -> list[int]:
    """Autoregressive continuation; returns prompt + new tokens."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be nonempty")
    rng = np.random.default_rng(sampler[2] if isinstance(sampler, tuple) and len(sampler) > 2 else None)
    toks = list(prompt)
    if mode == "recurrent":
        state = init_model_state(model)
        for t in toks:
            logits, state = forward_recurrent(model, state, t)
        for _ in range(n_new):
            nxt = _pick(logits, sampler, rng)
            toks.append(nxt)
            logits, state = forward_recurrent(model, state, nxt)
    elif mode == "parallel":
        with T.no_grad():
            for _ in range(n_new):
                ctx = toks[-model.cfg.max_seq:]
                start = len(toks) - len(ctx)
                logits = forward_parallel(model, ctx, start_pos=start).data[-1]
                toks.append(_pick(logits, sampler, rng))
    else:
        raise ValueError(f"unknown generation mode {mode!r}")
    return toks


def state_numel(state: ModelState) -> int:
    return state.numel()


__all__ = ["ModelConfig", "Model", "ModelState", "init_model", "forward_parallel", "forward_recurrent",
           "generate", "init_model_state", "recurrent_logits", "param_shapes", "KVCache", "RecurrentState"]
