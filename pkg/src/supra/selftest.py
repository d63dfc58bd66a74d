"""Quick invariant suite behind ``supra selftest``.

``FAULTS`` are deliberate breakages used to prove the suite notices them; they
are only activated through ``run_selftest(fault=...)``.
"""

from __future__ import annotations

import contextlib
import math
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from unittest import mock

import numpy as np

from . import attention as A
from . import tensor as T
from .analysis import singular_values
from .checkpoint import Checkpoint, load, save
from .gradcheck import check_tensors
from .model import ModelConfig, forward_parallel, init_model, init_model_state, forward_recurrent
from .train import Adam, TrainPlan, lr_at


def _rand_kmlp(rng, h, d):
    return A.KernelMLP(T.Tensor(np.eye(d) + 0.3 * rng.normal(size=(h, d, d))), T.Tensor(0.1 * rng.normal(size=(h, d))))


def check_equivalence(seeds=20) -> tuple[bool, str]:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        for dh in (4, 8):
            h = 2
            for cfg in (A.supra_config(h * dh, h), A.t2r_config(h * dh, h), A.elu1_config(h * dh, h)):
                for seq in (1, 2, 17, 64):
                    q, k, v = (T.Tensor(rng.normal(size=(h, seq, dh))) for _ in range(3))
                    km = _rand_kmlp(rng, h, dh)
                    p = A.linear_attention_parallel(cfg, q, k, v, km, start_pos=3).data
                    c = A.linear_attention_chunked(cfg, q, k, v, km, start_pos=3, chunk=5).data
                    st = replace(A.RecurrentState.zeros(cfg), pos=3)
                    r = A.linear_attention_recurrent(cfg, q, k, v, km, state=st)[0].data
                    worst = max(worst, np.abs(p - c).max(), np.abs(p - r).max())
    return worst <= 1e-8, f"max |parallel - chunked/recurrent| = {worst:.2e} (tol 1e-8)"


def brute_force_softmax(q, k, v, scale):
    out = np.zeros_like(v)
    for i in range(len(q)):
        w = np.array([math.exp(float(q[i] @ k[j]) * scale) for j in range(i + 1)])
        out[i] = sum(w[j] * v[j] for j in range(i + 1)) / w.sum()
    return out


def check_softmax_special_case() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for seq in (1, 5, 16):
        q, k, v = (rng.normal(size=(seq, 4)) for _ in range(3))
        got = A.softmax_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), scale=0.5).data
        worst = max(worst, np.abs(got - brute_force_softmax(q, k, v, 0.5)).max())
    return worst <= 1e-12, f"max diff {worst:.2e} (tol 1e-12)"


def check_gradients(max_entries=24) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for att in (A.softmax_config(16, 2), A.supra_config(16, 2)):
        cfg = ModelConfig(vocab=32, d_model=16, n_heads=2, d_ff=32, attention=att, max_seq=16)
        m = init_model(cfg, seed=1)
        for p in m.params.values():
            p.data += rng.normal(0, 0.1, p.shape)
        toks = rng.integers(0, 32, (2, 9))
        errs = check_tensors(lambda: T.cross_entropy(forward_parallel(m, toks[:, :-1]), toks[:, 1:]),
                             m.params, max_entries=max_entries)
        worst = max(worst, max(errs.values()))
    return worst <= 1e-4, f"max relative error {worst:.2e} (tol 1e-4)"


def check_decay_constant() -> tuple[bool, str]:
    val = A.decay_schedule("lightning", 8).max() ** 2048
    return abs(val - 3.3546e-4) <= 1e-6, f"max(gamma)^2048 = {val:.6e}"


def check_rope_relativity() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    worst = 0.0
    for i, j, d in ((0, 3, 7), (5, 2, 100), (9, 9, 13)):
        a = A.rope(T.Tensor(q), i).data @ A.rope(T.Tensor(k), j).data.T
        b = A.rope(T.Tensor(q), i + d).data @ A.rope(T.Tensor(k), j + d).data.T
        worst = max(worst, abs(float((a - b)[0, 0])))
    return worst <= 1e-9, f"max diff {worst:.2e}"


def reference_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.95, eps=1e-8):
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def check_adam() -> tuple[bool, str]:
    a = np.array([1.0, 2.0, 3.0])

    def grad(x):
        return 2 * a * (x - 1.0)

    x0 = np.array([0.5, -1.0, 2.0])
    ref = reference_adam(x0.copy(), grad, 0.1, 10)
    opt, x = Adam(), x0.copy()
    for _ in range(10):
        opt.update("x", x, grad(x), 0.1)
    return bool(np.array_equal(x, ref)), f"max diff {np.abs(x - ref).max():.1e} (bit-level)"


def check_schedule() -> tuple[bool, str]:
    p = TrainPlan(total_steps=200, warmup_steps=50, lr_start=3e-4, lr_end=1e-5)
    mid = lr_at(p, 125)
    ok = lr_at(p, 0) == 0 and lr_at(p, 50) == 3e-4 and abs(lr_at(p, 200) - 1e-5) <= 1e-12 \
        and abs(mid - (3e-4 + 1e-5) / 2) <= 1e-12
    return ok, f"lr(0)={lr_at(p, 0)}, lr(50)={lr_at(p, 50)}, lr(200)={lr_at(p, 200)}, lr(125)={mid}"


def check_checkpoint() -> tuple[bool, str]:
    cfg = ModelConfig(vocab=32, d_model=16, n_heads=2, d_ff=32, attention=A.supra_config(16, 2), max_seq=16)
    ck = Checkpoint.from_model(init_model(cfg, seed=3))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        save(path, ck)
        back = load(path)
    same = all(back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].dtype == v.dtype
               for k, v in ck.tensors.items())
    return same and set(back.tensors) == set(ck.tensors), "bit-exact round trip" if same else "mismatch"


def check_singular_values() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        m = rng.normal(size=(8, 8))
        oracle = np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(m.T @ m))[::-1], 0, None))
        worst = max(worst, np.abs(singular_values(m) - oracle).max())
    return worst <= 1e-8, f"max diff {worst:.2e} vs eig(M^T M)"


def check_constant_state() -> tuple[bool, str]:
    sizes = {}
    for name, att in (("supra", A.supra_config(16, 2)), ("softmax", A.softmax_config(16, 2))):
        m = init_model(ModelConfig(vocab=32, d_model=16, n_heads=2, d_ff=32, attention=att, max_seq=16), seed=0)
        st = init_model_state(m)
        counts = {}
        for t in range(100):
            _, st = forward_recurrent(m, st, t % 32)
            if t + 1 in (10, 100):
                counts[t + 1] = st.numel()
        sizes[name] = counts
    ok = sizes["supra"][10] == sizes["supra"][100] and sizes["softmax"][100] == 10 * sizes["softmax"][10]
    return ok, f"linear {sizes['supra']}, softmax {sizes['softmax']}"


CHECKS = {
    "formulation-equivalence": check_equivalence,
    "softmax-special-case": check_softmax_special_case,
    "gradient-integrity": check_gradients,
    "decay-constant": check_decay_constant,
    "rope-relativity": check_rope_relativity,
    "adam-reference": check_adam,
    "lr-schedule": check_schedule,
    "checkpoint-roundtrip": check_checkpoint,
    "singular-values": check_singular_values,
    "constant-state": check_constant_state,
}


# -- fault injection ------------------------------------------------------

def _fault_recurrent_no_decay():
    orig = A.recurrent_step

    def broken(cfg, state, *a, **kw):
        return orig(replace(cfg, decay="none"), state, *a, **kw)

    return mock.patch.object(A, "recurrent_step", broken)


def _fault_matmul_grad():
    orig = T.matmul

    def broken(a, b):
        out = orig(a, b)
        if out._backward is not None:
            bw = out._backward
            out._backward = lambda g: tuple(x * 1.01 for x in bw(g))
        return out

    return mock.patch.object(T, "matmul", broken)


def _fault_adam_no_bias_correction():
    def broken(self, name, param, grad, lr):
        m = self.m.setdefault(name, np.zeros_like(param))
        v = self.v.setdefault(name, np.zeros_like(param))
        m[...] = self.beta1 * m + (1 - self.beta1) * grad
        v[...] = self.beta2 * v + (1 - self.beta2) * grad * grad
        param -= lr * m / (np.sqrt(v) + self.eps)

    return mock.patch.object(Adam, "update", broken)


FAULTS = {
    "recurrent-no-decay": _fault_recurrent_no_decay,
    "matmul-grad": _fault_matmul_grad,
    "adam-no-bias-correction": _fault_adam_no_bias_correction,
}


def run_selftest(fault: str | None = None, only=None, echo=print) -> dict[str, bool]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {sorted(FAULTS)}")
    ctx = FAULTS[fault]() if fault else contextlib.nullcontext()
    results = {}
    with ctx:
        for name, fn in CHECKS.items():
            if only and name not in only:
                continue
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as e:  # a crash is a failed invariant, reported by name
                ok, detail = False, f"{type(e).__name__}: {e}"
            results[name] = ok
            echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{time.perf_counter() - t0:.1f}s]")
    return results
