"""Softmax and kernelized linear attention in parallel, chunked and recurrent form.

Head tensors are laid out as ``(..., H, S, d_head)``. Every function also
accepts a single head as ``(S, d_head)`` together with a ``head`` index, which
selects that head's decay rate and kernel weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

KERNELS = ("softmax", "elu1", "relu_mlp", "identity")
NORMALIZERS = ("softmax_rows", "sum_clamp", "group_norm")
DECAYS = ("none", "lightning", "retnet")


class AttentionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    kernel: str = "softmax"
    normalizer: str = "softmax_rows"
    decay: str = "none"
    rope_base: float | None = 1e4  # None disables rotary positions
    qk_scale: float | None = None  # None -> d_head ** -0.5
    clamp_min: float = 1e-6
    gn_eps: float = 1e-5

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise AttentionConfigError(f"unknown kernel {self.kernel!r}")
        if self.normalizer not in NORMALIZERS:
            raise AttentionConfigError(f"unknown normalizer {self.normalizer!r}")
        if self.decay not in DECAYS:
            raise AttentionConfigError(f"unknown decay {self.decay!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise AttentionConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.kernel == "softmax") != (self.normalizer == "softmax_rows"):
            raise AttentionConfigError("softmax kernel and softmax_rows normalizer go together")
        if self.kernel == "softmax" and self.decay != "none":
            raise AttentionConfigError("decay requires a linear kernel")
        if self.rope_base is not None and (self.rope_base <= 0 or self.d_head % 2):
            raise AttentionConfigError("rope needs a positive base and an even d_head")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scale(self) -> float:
        return self.d_head ** -0.5 if self.qk_scale is None else self.qk_scale

    @property
    def is_linear(self) -> bool:
        return self.kernel != "softmax"

    def gammas(self) -> np.ndarray:
        return decay_schedule(self.decay, self.n_heads)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> AttentionConfig:
        return cls(**d)


def softmax_config(d_model=64, n_heads=4, rope_base=1e4) -> AttentionConfig:
    return AttentionConfig(d_model, n_heads, "softmax", "softmax_rows", "none", rope_base)


def supra_config(d_model=64, n_heads=4, rope_base=1e4, decay="lightning") -> AttentionConfig:
    return AttentionConfig(d_model, n_heads, "relu_mlp", "group_norm", decay, rope_base)


def t2r_config(d_model=64, n_heads=4) -> AttentionConfig:
    return AttentionConfig(d_model, n_heads, "relu_mlp", "sum_clamp", "none", None)


def elu1_config(d_model=64, n_heads=4, rope_base=None) -> AttentionConfig:
    return AttentionConfig(d_model, n_heads, "elu1", "sum_clamp", "none", rope_base)


PRESETS = {"softmax": softmax_config, "supra": supra_config, "t2r": t2r_config, "elu1": elu1_config}


def preset(name: str, d_model: int, n_heads: int, rope_base: float = 1e4, **overrides) -> AttentionConfig:
    if name not in PRESETS:
        raise AttentionConfigError(f"unknown attention preset {name!r}")
    if name == "t2r":
        cfg = t2r_config(d_model, n_heads)
    elif name == "elu1":
        cfg = elu1_config(d_model, n_heads)
    else:
        cfg = PRESETS[name](d_model, n_heads, rope_base)
    return replace(cfg, **overrides) if overrides else cfg


# -- decay ----------------------------------------------------------------

def decay_schedule(kind: str, n_heads: int) -> np.ndarray:
    """Per-head decay rates; ones for ``none``."""
    i = np.arange(1, n_heads + 1, dtype=np.float64)
    if kind == "none":
        return np.ones(n_heads)
    if kind == "lightning":
        return np.exp(-(2.0 ** (-8.0 * i / n_heads)))
    if kind == "retnet":
        return 1.0 - 2.0 ** (-5.0 - (i - 1))
    raise AttentionConfigError(f"unknown decay {kind!r}")


def decay_mask(gammas: np.ndarray, seq: int) -> np.ndarray:
    """(H, S, S) causal matrix with gamma^(i-j) on and below the diagonal."""
    idx = np.arange(seq)
    age = idx[:, None] - idx[None, :]
    causal = age >= 0
    ages = np.where(causal, age, 0).astype(np.float64)
    return np.where(causal, np.power(gammas[:, None, None], ages), 0.0)


# -- kernel feature maps --------------------------------------------------

@dataclass
class KernelMLP:
    """phi(x) = relu(W x + b), one (W, b) per head, shared by queries and keys."""

    weight: Tensor  # (H, d_head, d_head)
    bias: Tensor  # (H, d_head)

    @classmethod
    def identity(cls, n_heads: int, d_head: int, dtype=np.float64) -> KernelMLP:
        w = np.broadcast_to(np.eye(d_head, dtype=dtype), (n_heads, d_head, d_head)).copy()
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros((n_heads, d_head), dtype=dtype), requires_grad=True))


def _head_view(x: Tensor, head: int | None):
    """Return (x as (..., H, S, d), heads selector or None, squeeze flag)."""
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), [0 if head is None else head], True
    return x, None, False


def _select_heads(arr: np.ndarray, heads):
    return arr if heads is None else arr[heads]


def _kernel_heads(cfg: AttentionConfig, xh: Tensor, kmlp: KernelMLP | None, heads) -> Tensor:
    if cfg.kernel == "softmax":
        raise AttentionConfigError("softmax has no feature map")
    if cfg.kernel == "elu1":
        return T.add(T.elu(xh), 1.0)
    if cfg.kernel == "identity":
        return xh
    if kmlp is None:
        raise AttentionConfigError("relu_mlp kernel needs KernelMLP weights")
    w, b = kmlp.weight, kmlp.bias
    if heads is not None:
        w, b = T.getitem(w, heads), T.getitem(b, heads)
    h, d = xh.shape[-3], xh.shape[-1]
    wt = T.expand(T.transpose(w), xh.shape[:-2] + (d, d))
    bb = T.expand(T.reshape(b, (h, 1, d)), xh.shape)
    return T.relu(T.add(T.matmul(xh, wt), bb))


def apply_kernel(cfg: AttentionConfig, x: Tensor, kmlp: KernelMLP | None = None, head: int | None = None) -> Tensor:
    """elu1 -> elu(x)+1, relu_mlp -> relu(W x + b), identity -> x."""
    xh, heads, squeeze = _head_view(x, head)
    out = _kernel_heads(cfg, xh, kmlp, heads)
    return T.reshape(out, x.shape) if squeeze else out


# -- rotary positions -----------------------------------------------------

def rope_angles(positions: np.ndarray, d_head: int, base: float) -> np.ndarray:
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rope(x: Tensor, start_pos: int = 0, base: float = 1e4) -> Tensor:
    """Rotate feature pairs (2m, 2m+1) of token p by p * base^(-2m/d)."""
    d = x.shape[-1]
    if d % 2:
        raise AttentionConfigError(f"rope needs an even feature width, got {d}")
    if base <= 0:
        raise AttentionConfigError("rope base must be positive")
    s = x.shape[-2]
    ang = rope_angles(np.arange(start_pos, start_pos + s), d, base)
    cos, sin = np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype)

    def rotate(a, sign):
        ev, od = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = ev * cos - sign * od * sin
        out[..., 1::2] = sign * ev * sin + od * cos
        return out

    return T.record(rotate(x.data, 1.0), (x,), lambda g: (rotate(g, -1.0),))


def features(cfg: AttentionConfig, xh: Tensor, kmlp: KernelMLP | None, heads, start_pos: int) -> Tensor:
    """Kernel map followed by rotary positions (RoPE sits outside phi)."""
    f = _kernel_heads(cfg, xh, kmlp, heads)
    if cfg.rope_base is not None:
        f = rope(f, start_pos, cfg.rope_base)
    return f


# -- softmax --------------------------------------------------------------

def softmax_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True, scale: float | None = None,
                      capture: list | None = None) -> Tensor:
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise T.ShapeError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    s, d = q.shape[-2], q.shape[-1]
    sc = d ** -0.5 if scale is None else scale
    scores = T.scale(T.matmul(q, T.transpose(k)), sc)
    mask = np.tril(np.ones((s, s), dtype=bool)) if causal else None
    w = T.softmax_rows(scores, mask)
    if capture is not None:
        capture.append(w.data.copy())
    return T.matmul(w, v)


# -- linear attention -----------------------------------------------------

def _gammas_for(cfg: AttentionConfig, heads) -> np.ndarray:
    return _select_heads(cfg.gammas(), heads)


def _normalize(cfg: AttentionConfig, num: Tensor, den: Tensor) -> Tensor:
    den = T.clamp_min(den, cfg.clamp_min)
    return T.div(num, T.expand(den, num.shape))


def linear_attention_parallel(cfg: AttentionConfig, q: Tensor, k: Tensor, v: Tensor,
                              kmlp: KernelMLP | None = None, head: int | None = None,
                              start_pos: int = 0, capture: list | None = None) -> Tensor:
    """o_i = sum_{j<=i} gamma^(i-j) sim(q_i, k_j) v_j, optionally sum-normalized."""
    if not cfg.is_linear:
        raise AttentionConfigError("linear attention called with the softmax kernel")
    (qh, heads, squeeze), kh, vh = _head_view(q, head), _head_view(k, head)[0], _head_view(v, head)[0]
    qf = features(cfg, qh, kmlp, heads, start_pos)
    kf = T.scale(features(cfg, kh, kmlp, heads, start_pos), cfg.scale)
    seq = qh.shape[-2]
    scores = T.matmul(qf, T.transpose(kf))
    a = T.mul(scores, decay_mask(_gammas_for(cfg, heads), seq).astype(q.dtype))
    if capture is not None:
        capture.append(a.data.copy())
    out = T.matmul(a, vh)
    if cfg.normalizer == "sum_clamp":
        out = _normalize(cfg, out, T.tsum(a, axis=-1, keepdims=True))
    return T.reshape(out, v.shape) if squeeze else out


def linear_attention_chunked(cfg: AttentionConfig, q: Tensor, k: Tensor, v: Tensor,
                             kmlp: KernelMLP | None = None, head: int | None = None,
                             start_pos: int = 0, chunk: int = 16) -> Tensor:
    """Blockwise form: quadratic inside each chunk, carried (s, z) state across chunks."""
    if not cfg.is_linear:
        raise AttentionConfigError("linear attention called with the softmax kernel")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    (qh, heads, squeeze), kh, vh = _head_view(q, head), _head_view(k, head)[0], _head_view(v, head)[0]
    qf = features(cfg, qh, kmlp, heads, start_pos)
    kf = T.scale(features(cfg, kh, kmlp, heads, start_pos), cfg.scale)
    g = _gammas_for(cfg, heads).astype(q.dtype)
    seq = qh.shape[-2]
    lead = (slice(None),) * (qh.ndim - 2)
    use_z = cfg.normalizer == "sum_clamp"

    s_state = z_state = None
    outs = []
    for t0 in range(0, seq, chunk):
        t1 = min(seq, t0 + chunk)
        n = t1 - t0
        sl = lead + (slice(t0, t1), slice(None))
        qc, kc, vc = T.getitem(qf, sl), T.getitem(kf, sl), T.getitem(vh, sl)
        a = T.mul(T.matmul(qc, T.transpose(kc)), decay_mask(g, n).astype(q.dtype))
        num = T.matmul(a, vc)
        den = T.tsum(a, axis=-1, keepdims=True) if use_z else None
        if s_state is not None:
            q_in = T.mul(qc, np.power(g[:, None, None], np.arange(1, n + 1)[None, :, None]))
            num = T.add(num, T.matmul(q_in, s_state))
            if use_z:
                zcol = T.reshape(z_state, z_state.shape + (1,))
                den = T.add(den, T.matmul(q_in, zcol))
        outs.append(_normalize(cfg, num, den) if use_z else num)

        if t1 < seq:
            k_out = T.mul(kc, np.power(g[:, None, None], np.arange(n - 1, -1, -1)[None, :, None]))
            upd = T.matmul(T.transpose(k_out), vc)
            zupd = T.tsum(k_out, axis=-2) if use_z else None
            if s_state is None:
                s_state, z_state = upd, zupd
            else:
                carry = np.power(g, n)
                s_state = T.add(T.mul(s_state, carry[:, None, None]), upd)
                if use_z:
                    z_state = T.add(T.mul(z_state, carry[:, None]), zupd)
    out = outs[0] if len(outs) == 1 else T.concat(outs, axis=-2)
    return T.reshape(out, v.shape) if squeeze else out


# -- recurrent form -------------------------------------------------------

@dataclass
class RecurrentState:
    """Constant-size attention memory for one layer: s (H, d, d), z (H, d)."""

    s: np.ndarray
    z: np.ndarray | None
    pos: int = 0

    @classmethod
    def zeros(cls, cfg: AttentionConfig, n_heads: int | None = None, dtype=np.float64) -> RecurrentState:
        h = cfg.n_heads if n_heads is None else n_heads
        d = cfg.d_head
        z = np.zeros((h, d), dtype=dtype) if cfg.normalizer == "sum_clamp" else None
        return cls(np.zeros((h, d, d), dtype=dtype), z, 0)

    def numel(self) -> int:
        return self.s.size + (0 if self.z is None else self.z.size)


@dataclass
class KVCache:
    """Growing key/value store for softmax attention (rotated keys)."""

    k: np.ndarray  # (H, T, d)
    v: np.ndarray
    pos: int = 0

    @classmethod
    def empty(cls, cfg: AttentionConfig, dtype=np.float64) -> KVCache:
        shape = (cfg.n_heads, 0, cfg.d_head)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), 0)

    def numel(self) -> int:
        return self.k.size + self.v.size


def recurrent_step(cfg: AttentionConfig, state: RecurrentState, q_t, k_t, v_t,
                   kmlp: KernelMLP | None = None, head: int | None = None):
    """Absorb one token. q_t/k_t/v_t are (H, d) or (d,) with ``head``.

    Returns (output, new_state); the input state is left untouched.
    """
    q_t, k_t, v_t = (np.asarray(getattr(a, "data", a)) for a in (q_t, k_t, v_t))
    single = q_t.ndim == 1
    if single:
        q_t, k_t, v_t = q_t[None], k_t[None], v_t[None]
        heads = [0 if head is None else head]
    else:
        heads = None
    pos = state.pos
    with T.no_grad():
        qf = features(cfg, Tensor(q_t[:, None, :]), kmlp, heads, pos).data[:, 0, :]
        kf = features(cfg, Tensor(k_t[:, None, :]), kmlp, heads, pos).data[:, 0, :] * cfg.scale
    g = _gammas_for(cfg, heads).astype(q_t.dtype)
    s = g[:, None, None] * state.s + kf[:, :, None] * v_t[:, None, :]
    out = np.einsum("hd,hde->he", qf, s)
    z = None
    if cfg.normalizer == "sum_clamp":
        z = g[:, None] * state.z + kf
        den = np.maximum(np.einsum("hd,hd->h", qf, z), cfg.clamp_min)
        out = out / den[:, None]
    if not np.all(np.isfinite(out)):
        raise T.NonFiniteError("non-finite recurrent output")
    new = RecurrentState(s, z, pos + 1)
    return (out[0] if single else out), new


def linear_attention_recurrent(cfg: AttentionConfig, q: Tensor, k: Tensor, v: Tensor,
                               kmlp: KernelMLP | None = None, head: int | None = None,
                               state: RecurrentState | None = None):
    """Run recurrent_step over a (H, S, d) or (S, d) sequence. Returns (out, state)."""
    qd, kd, vd = q.data, k.data, v.data
    single = qd.ndim == 2
    if state is None:
        state = RecurrentState.zeros(cfg, 1 if single else qd.shape[-3], qd.dtype)
    outs = []
    for t in range(qd.shape[-2]):
        o, state = recurrent_step(cfg, state, qd[..., t, :], kd[..., t, :], vd[..., t, :], kmlp, head)
        outs.append(o)
    return Tensor(np.stack(outs, axis=-2)), state


def softmax_step(cfg: AttentionConfig, cache: KVCache, q_t: np.ndarray, k_t: np.ndarray, v_t: np.ndarray):
    """Softmax decoding step with a KV cache; q_t/k_t/v_t are (H, d) pre-rope."""
    pos = cache.pos
    if cfg.rope_base is not None:
        with T.no_grad():
            q_t = rope(Tensor(q_t[:, None, :]), pos, cfg.rope_base).data[:, 0, :]
            k_t = rope(Tensor(k_t[:, None, :]), pos, cfg.rope_base).data[:, 0, :]
    k = np.concatenate([cache.k, k_t[:, None, :]], axis=1)
    v = np.concatenate([cache.v, v_t[:, None, :]], axis=1)
    sc = np.einsum("hd,htd->ht", q_t, k) * cfg.scale
    w = np.exp(sc - sc.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    out = np.einsum("ht,htd->hd", w, v)
    return out, KVCache(k, v, pos + 1)


# -- multi-head block -----------------------------------------------------

def kernel_from_params(params: dict) -> KernelMLP | None:
    if "kernel.weight" not in params:
        return None
    return KernelMLP(params["kernel.weight"], params["kernel.bias"])


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, s, d = x.shape
    return T.permute(T.reshape(x, (b, s, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, d = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, s, h * d))


def multihead_attention_block(cfg: AttentionConfig, params: dict, x: Tensor, mode: str = "parallel",
                              state=None, start_pos: int = 0, chunk: int = 16,
                              capture: list | None = None, pre_output: list | None = None):
    """Project, attend per head, concatenate, GroupNorm (if configured), project out.

    ``x`` is (S, D) or (B, S, D). Returns ``(out, state)``; state is only
    meaningful in recurrent mode, where it must be supplied (a RecurrentState
    for linear configs, a KVCache for softmax).
    """
    if mode not in ("parallel", "chunked", "recurrent"):
        raise ValueError(f"unknown attention mode {mode!r}")
    unbatched = x.ndim == 2
    if unbatched:
        x = T.reshape(x, (1,) + x.shape)
    h = cfg.n_heads
    q = _split_heads(T.matmul(x, params["wq"]), h)
    k = _split_heads(T.matmul(x, params["wk"]), h)
    v = _split_heads(T.matmul(x, params["wv"]), h)
    kmlp = kernel_from_params(params)

    if mode == "recurrent":
        if state is None:
            raise ValueError("recurrent mode needs a state")
        if x.shape[0] != 1:
            raise ValueError("recurrent mode runs one stream at a time")
        o, state = _recurrent_heads(cfg, q, k, v, kmlp, state)
    elif not cfg.is_linear:
        if cfg.rope_base is not None:
            q, k = rope(q, start_pos, cfg.rope_base), rope(k, start_pos, cfg.rope_base)
        o = softmax_attention(q, k, v, scale=cfg.scale, capture=capture)
    elif mode == "parallel":
        o = linear_attention_parallel(cfg, q, k, v, kmlp, start_pos=start_pos, capture=capture)
    else:
        o = linear_attention_chunked(cfg, q, k, v, kmlp, start_pos=start_pos, chunk=chunk)

    o = _merge_heads(o)
    if cfg.normalizer == "group_norm":
        o = T.group_norm(o, h, params.get("gn.weight"), params.get("gn.bias"), cfg.gn_eps)
    if pre_output is not None:
        pre_output.append(o.data.copy())
    out = T.matmul(o, params["wo"])
    if unbatched:
        out = T.reshape(out, out.shape[1:])
    return out, state


def _recurrent_heads(cfg, q, k, v, kmlp, state):
    qd, kd, vd = q.data[0], k.data[0], v.data[0]  # (H, S, d)
    outs = []
    for t in range(qd.shape[1]):
        if cfg.is_linear:
            o, state = recurrent_step(cfg, state, qd[:, t], kd[:, t], vd[:, t], kmlp)
        else:
            o, state = softmax_step(cfg, state, qd[:, t], kd[:, t], vd[:, t])
        outs.append(o)
    return Tensor(np.stack(outs, axis=1)[None]), state


def init_state(cfg: AttentionConfig, dtype=np.float64):
    return RecurrentState.zeros(cfg, dtype=dtype) if cfg.is_linear else KVCache.empty(cfg, dtype)


def attention_param_shapes(cfg: AttentionConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d)}
    if cfg.kernel == "relu_mlp":
        shapes["kernel.weight"] = (h, dh, dh)
        shapes["kernel.bias"] = (h, dh)
    if cfg.normalizer == "group_norm":
        shapes["gn.weight"] = (d,)
        shapes["gn.bias"] = (d,)
    return shapes
