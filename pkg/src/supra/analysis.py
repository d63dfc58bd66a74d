"""Attention-matrix comparison between models, and the state-memory benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import Model, forward_parallel, forward_recurrent, init_model_state

METRICS = ("cosine", "singular_value_distance")


class GeometryError(ValueError):
    pass


@dataclass
class AttnMatrixSet:
    matrices: list[np.ndarray]  # per layer, (H, S, S)
    model_tag: str = ""
    input_tag: str = ""

    @property
    def geometry(self) -> tuple[int, int, int]:
        return len(self.matrices), self.matrices[0].shape[0], self.matrices[0].shape[-1]


@dataclass
class SimilarityGrid:
    metric: str
    normalized: bool
    values: np.ndarray  # (layers, heads)


def extract_attention(model: Model, tokens, model_tag: str = "", input_tag: str = "") -> AttnMatrixSet:
    """Softmax weights, or gamma^(i-j) * sim(q_i, k_j) (pre-normalizer) for linear configs."""
    cap: list = []
    with T.no_grad():
        forward_parallel(model, np.asarray(tokens, dtype=np.int64).reshape(-1), capture=cap)
    return AttnMatrixSet([m[0] for m in cap], model_tag, input_tag)


def row_normalize(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divide each row by |row sum|. Zero-sum rows stay as they are; their mask is returned."""
    m = np.asarray(m, dtype=np.float64)
    sums = m.sum(axis=-1, keepdims=True)
    zero = sums == 0
    out = m / np.where(zero, 1.0, np.abs(sums))
    return out, zero[..., 0]


def singular_values(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """One-sided Jacobi; descending singular values."""
    a = np.array(m, dtype=np.float64)
    if a.shape[0] < a.shape[1]:
        a = a.T
    n = a.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha, beta, gamma = ap @ ap, aq @ aq, ap @ aq
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                with np.errstate(over="ignore"):  # tiny gamma: zeta -> inf, rotation -> identity
                    zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
        if not rotated:
            break
    return np.sort(np.linalg.norm(a, axis=0))[::-1]


def _lower(m: np.ndarray) -> np.ndarray:
    return m[np.tril_indices(m.shape[-1])]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    x, y = _lower(a), _lower(b)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def _sv_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(singular_values(a) - singular_values(b)))


def compare(a: AttnMatrixSet, b: AttnMatrixSet, metric: str = "cosine", normalized: bool = False) -> SimilarityGrid:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if a.geometry != b.geometry:
        raise GeometryError(f"attention geometry {a.geometry} vs {b.geometry}")
    fn = _cosine if metric == "cosine" else _sv_distance
    n_layers, n_heads, _ = a.geometry
    vals = np.zeros((n_layers, n_heads))
    for li in range(n_layers):
        for h in range(n_heads):
            x, y = a.matrices[li][h], b.matrices[li][h]
            if normalized:
                x, y = row_normalize(x)[0], row_normalize(y)[0]
            vals[li, h] = fn(x, y)
    return SimilarityGrid(metric, normalized, vals)


# -- grid artifacts -------------------------------------------------------

def grid_to_text(grid: SimilarityGrid) -> str:
    n_layers, n_heads = grid.values.shape
    lines = [f"{n_layers} {n_heads} {grid.metric} {int(grid.normalized)}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in grid.values]
    return "\n".join(lines) + "\n"


def grid_from_text(text: str) -> SimilarityGrid:
    head, *rows = text.strip().splitlines()
    n_layers, n_heads, metric, norm = head.split()
    vals = np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float64)
    if vals.shape != (int(n_layers), int(n_heads)):
        raise ValueError(f"grid body {vals.shape} does not match header {n_layers}x{n_heads}")
    return SimilarityGrid(metric, bool(int(norm)), vals)


def _intensity(grid: SimilarityGrid) -> np.ndarray:
    v = grid.values
    if grid.metric == "cosine":
        x = (v + 1.0) / 2.0
    else:
        top = v.max()
        x = v / top if top > 0 else np.zeros_like(v)
    return np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)


def emit_grid_image(grid: SimilarityGrid, path: str | Path) -> tuple[Path, Path]:
    """Write a binary PGM (width = heads, height = layers) plus a ``.txt`` sidecar."""
    path = Path(path)
    pix = _intensity(grid)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    side = path.with_suffix(".txt")
    side.write_text(grid_to_text(grid))
    return path, side


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


# -- memory benchmark -----------------------------------------------------

def bench_state_memory(model: Model, context_lengths, prompt_token: int = 257, timing_window: int = 32) -> list[dict]:
    """Decode greedily up to each context length; report state size and decode speed there."""
    lengths = sorted(int(n) for n in context_lengths)
    state = init_model_state(model)
    tok = prompt_token
    rows = []
    done = 0
    for target in lengths:
        t_start, timed = None, 0
        while done < target:
            if t_start is None and target - done <= timing_window:
                t_start = time.perf_counter()
            logits, state = forward_recurrent(model, state, tok)
            tok = int(np.argmax(logits))
            done += 1
            if t_start is not None:
                timed += 1
        elapsed = time.perf_counter() - t_start if t_start is not None else 0.0
        ms = 1000.0 * elapsed / timed if timed else float("nan")
        rows.append({"context": target, "state_elements": state.numel(),
                     "ms_per_token": ms, "tokens_per_sec": 1000.0 / ms if timed and ms > 0 else float("nan")})
    return rows


BENCH_COLUMNS = ("context", "state_elements", "ms_per_token", "tokens_per_sec")


def format_bench(rows: list[dict], machine: bool = True) -> str:
    if machine:
        lines = ["\t".join(BENCH_COLUMNS)]
        lines += ["\t".join(repr(r[c]) for c in BENCH_COLUMNS) for r in rows]
        return "\n".join(lines) + "\n"
    lines = [f"{'context':>8} {'state_elements':>15} {'ms/token':>10} {'tokens/s':>10}"]
    lines += [f"{r['context']:>8} {r['state_elements']:>15} {r['ms_per_token']:>10.3f} {r['tokens_per_sec']:>10.1f}"
              for r in rows]
    return "\n".join(lines) + "\n"


def parse_bench(text: str) -> list[dict]:
    head, *rows = text.strip().splitlines()
    cols = head.split("\t")
    out = []
    for r in rows:
        vals = r.split("\t")
        out.append({c: (int(v) if c in ("context", "state_elements") else float(v)) for c, v in zip(cols, vals)})
    return out
