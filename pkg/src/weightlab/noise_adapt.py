"""Toy-scale Gaussian-noise adaptation.

The fine-tuned weight is ``W' = W + s * dW``, where ``dW`` is frozen
standard normal noise and only the scalar ``s`` is trained. The low-rank
variant is ``W' = (s + 1) W + A B``. Training runs on a noiseless
teacher/student linear regression ``Y = (W + sigma_true * dW) X``. That
problem is convex in ``s`` and has an exact least-squares minimizer to
check against.

Also here: the per-layer std comparison between two sets of deltas and
the layer-depth trend of delta std.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateDesign, Diverged, KeyMismatch, ShapeMismatch, TooFewLayers
from .moments import central_moments
from .rng import STREAM_DELTA, STREAM_TOY, make_rng
from .tensor_io import ModelIndex, is_float_dtype


@dataclass(frozen=True)
class NoiseDelta:
    seed: int
    shape: tuple[int, int]
    values: np.ndarray = field(repr=False)


def make_delta(shape, seed: int) -> NoiseDelta:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f"dimensions must be positive, got {shape}")
    values = make_rng(seed, STREAM_DELTA).standard_normal(shape)
    return NoiseDelta(seed, shape, values)


def _check_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {a.shape} vs {b.shape}")


def apply_scaled_noise(W, delta: NoiseDelta, s: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    _check_shape(W, delta.values, "W vs delta")
    return W + s * delta.values


def apply_lora_ours(W, s: float, A, B) -> np.ndarray:
    W, A, B = (np.asarray(m, dtype=np.float64) for m in (W, A, B))
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0] or (A.shape[0], B.shape[1]) != W.shape:
        raise ShapeMismatch(f"A {A.shape} @ B {B.shape} does not produce W's shape {W.shape}")
    return (s + 1.0) * W + A @ B


def grad_s(upstream, delta: NoiseDelta) -> float:
    """dL/ds for W' = W + s dW, given the upstream gradient dL/dW'."""
    G = np.asarray(upstream, dtype=np.float64)
    _check_shape(G, delta.values, "upstream vs delta")
    return float(np.vdot(G, delta.values))


@dataclass(frozen=True)
class ToyTaskSpec:
    in_dim: int = 16
    out_dim: int = 12
    rank: int = 2
    n_samples: int = 64
    sigma_true: float = 0.3
    seed: int = 0
    learn_lora: bool = False
    learning_rate: float | None = None
    max_steps: int = 500
    tol: float = 1e-3
    delta_seed: int | None = None

    def __post_init__(self):
        if min(self.in_dim, self.out_dim, self.rank) < 1:
            raise ValueError("dimensions and rank must be positive")
        if self.rank > min(self.in_dim, self.out_dim):
            raise ValueError("rank must not exceed min(in_dim, out_dim)")
        if self.n_samples < self.in_dim:
            raise ValueError("n_samples must be >= in_dim")
        if self.sigma_true < 0:
            raise ValueError("sigma_true must be >= 0")

    @property
    def noise_seed(self) -> int:
        return self.seed + 1 if self.delta_seed is None else self.delta_seed


@dataclass
class ToyProblem:
    W: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    delta: NoiseDelta


def build_problem(task: ToyTaskSpec, delta: NoiseDelta | None = None) -> ToyProblem:
    rng = make_rng(task.seed, STREAM_TOY)
    W = rng.standard_normal((task.out_dim, task.in_dim)) / math.sqrt(task.in_dim)
    X = rng.standard_normal((task.in_dim, task.n_samples))
    if delta is None:
        delta = make_delta(W.shape, task.noise_seed)
    Y = apply_scaled_noise(W, delta, task.sigma_true) @ X
    return ToyProblem(W, X, Y, delta)


def least_squares_s(W, dW, X, Y) -> float:
    """argmin_s ||(W + s dW) X - Y||_F^2."""
    P = np.asarray(dW) @ np.asarray(X)
    denom = float(np.vdot(P, P))
    if denom == 0.0:
        raise DegenerateDesign("dW @ X is identically zero")
    return float(np.vdot(P, np.asarray(Y) - np.asarray(W) @ np.asarray(X))) / denom


def closed_form_s(task: ToyTaskSpec, delta: NoiseDelta | None = None) -> float:
    p = build_problem(task, delta)
    return least_squares_s(p.W, p.delta.values, p.X, p.Y)


@dataclass
class AdaptResult:
    s_learned: float
    s_oracle: float
    loss_curve: list[float]
    a_mat: np.ndarray | None = None
    b_mat: np.ndarray | None = None
    converged: bool = False
    step_size: float = 0.0

    def to_dict(self) -> dict:
        d = {
            "s_learned": self.s_learned,
            "s_oracle": self.s_oracle,
            "abs_error": abs(self.s_learned - self.s_oracle),
            "converged": self.converged,
            "steps": len(self.loss_curve) - 1,
            "step_size": self.step_size,
            "final_loss": self.loss_curve[-1],
            "loss_curve": self.loss_curve,
        }
        if self.a_mat is not None:
            d["a_mat"] = self.a_mat.tolist()
            d["b_mat"] = self.b_mat.tolist()
        return d


def _loss(E: np.ndarray) -> float:
    return 0.5 * float(np.vdot(E, E))


def _increased(new: float, old: float) -> bool:
    return new > old + 1e-12 * max(1.0, abs(old))


def toy_train(task: ToyTaskSpec, delta: NoiseDelta | None = None) -> AdaptResult:
    """Gradient descent on ``0.5 * ||W' X - Y||_F^2`` starting from s = 0.

    Scalar mode: the loss is a parabola in s with curvature ``||dW X||_F^2``,
    so any step below ``1 / ||dW X||_F^2`` descends monotonically; the
    default is half of that and a larger ``learning_rate`` is clamped to it.
    LoRA mode: s and B start at zero, A at N(0, 2/in_dim); steps are halved
    until the loss does not increase.
    """
    p = build_problem(task, delta)
    s_oracle = least_squares_s(p.W, p.delta.values, p.X, p.Y)
    if task.learn_lora:
        return _train_lora(task, p, s_oracle)

    P = p.delta.values @ p.X
    bound = 1.0 / float(np.vdot(P, P))
    lr = 0.5 * bound if task.learning_rate is None else min(task.learning_rate, bound)
    s = 0.0
    E = p.W @ p.X - p.Y
    curve = [_loss(E)]
    for step in range(1, task.max_steps + 1):
        g = grad_s(E @ p.X.T, p.delta)
        s_next = s - lr * g
        E = apply_scaled_noise(p.W, p.delta, s_next) @ p.X - p.Y
        loss = _loss(E)
        if _increased(loss, curve[-1]):
            raise Diverged(step, loss)
        curve.append(loss)
        moved = abs(s_next - s)
        s = s_next
        if moved < 1e-3 * task.tol:
            break
    return AdaptResult(s, s_oracle, curve, converged=abs(s - s_oracle) < task.tol, step_size=lr)


def _train_lora(task: ToyTaskSpec, p: ToyProblem, s_oracle: float) -> AdaptResult:
    rng = make_rng(task.seed, STREAM_TOY + 100)
    A = rng.standard_normal((task.out_dim, task.rank)) * math.sqrt(2.0 / task.in_dim)
    B = np.zeros((task.rank, task.in_dim))
    s = 0.0
    WX = p.W @ p.X

    def residual(s, A, B):
        return (s + 1.0) * WX + A @ (B @ p.X) - p.Y

    E = residual(s, A, B)
    curve = [_loss(E)]
    lr = task.learning_rate or 0.5 / float(np.vdot(p.X, p.X))
    converged = False
    for step in range(1, task.max_steps + 1):
        G = E @ p.X.T
        gs, gA, gB = float(np.vdot(G, p.W)), G @ B.T, A.T @ G
        for _ in range(60):
            cand = (s - lr * gs, A - lr * gA, B - lr * gB)
            E_new = residual(*cand)
            loss = _loss(E_new)
            if not _increased(loss, curve[-1]):
                break
            lr *= 0.5
        else:
            raise Diverged(step, loss)
        s, A, B = cand
        E = E_new
        prev = curve[-1]
        curve.append(loss)
        if prev - loss <= task.tol * 1e-3 * max(prev, 1e-300):
            converged = True
            break
    return AdaptResult(s, s_oracle, curve, A, B, converged, lr)


# ---------------------------------------------------------------------------
# delta statistics


def _sigma(x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return math.sqrt(central_moments(x)[1]) if x.size else 0.0


@dataclass
class DeltaSigmaReport:
    per_layer: list[tuple[str, float, float, float]]
    mean_abs_diff: float

    def to_rows(self) -> list[dict]:
        return [
            {"layer": k, "sigma_a": a, "sigma_b": b, "abs_diff": d} for k, a, b, d in self.per_layer
        ]


def delta_sigma_report(deltas_a: Mapping, deltas_b: Mapping) -> DeltaSigmaReport:
    if set(deltas_a) != set(deltas_b):
        diff = sorted(set(deltas_a) ^ set(deltas_b), key=str)
        raise KeyMismatch(f"layer keys differ: {diff}")
    if not deltas_a:
        raise KeyMismatch("no layers to compare")
    rows = []
    for key in deltas_a:
        a, b = _sigma(deltas_a[key]), _sigma(deltas_b[key])
        rows.append((key, a, b, abs(a - b)))
    return DeltaSigmaReport(rows, math.fsum(r[3] for r in rows) / len(rows))


@dataclass
class DepthTrend:
    per_layer_sigma: list[tuple[int, float]]
    spearman_rho: float
    exclude_ends: bool
    included: list[int]
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "per_layer_sigma": [{"layer": i, "sigma": s} for i, s in self.per_layer_sigma],
            "spearman_rho": self.spearman_rho,
            "exclude_ends": self.exclude_ends,
            "included": self.included,
            "degenerate": self.degenerate,
        }


def spearman(x, y) -> tuple[float, bool]:
    """Spearman rank correlation; returns (0.0, True) when a rank vector is constant."""
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return 0.0, True
    return float(rx @ ry) / denom, False


def depth_trend(deltas: Mapping[int, object], exclude_ends: bool = False) -> DepthTrend:
    layers = sorted(deltas)
    sigmas = [(i, _sigma(deltas[i])) for i in layers]
    used = sigmas[1:-1] if exclude_ends else sigmas
    if len(used) < 3:
        raise TooFewLayers(f"need >= 3 layers after exclusion, have {len(used)}")
    rho, degenerate = spearman([i for i, _ in used], [s for _, s in used])
    return DepthTrend(sigmas, rho, exclude_ends, [i for i, _ in used], degenerate)


# ---------------------------------------------------------------------------
# checkpoint helpers used by the CLI


def checkpoint_deltas(base: ModelIndex, tuned: ModelIndex, pattern: str | None = None) -> dict[str, np.ndarray]:
    """Name -> (tuned - base) for every float tensor present in both."""
    rx = re.compile(pattern) if pattern else None
    out = {}
    for name, meta in base.metas.items():
        if rx is not None and not rx.search(name):
            continue
        if not is_float_dtype(meta.dtype) or name not in tuned:
            continue
        b = base.load(name)
        t = tuned.load(name)
        if t.shape != b.shape:
            raise ShapeMismatch(f"tensor {name!r}: {b.shape} vs {t.shape}")
        out[name] = t.values - b.values
    return out


def group_by_layer(deltas: Mapping[str, np.ndarray], layer_regex: str) -> dict[int, np.ndarray]:
    """Pool tensors by the integer captured by the first group of ``layer_regex``."""
    rx = re.compile(layer_regex)
    pooled: dict[int, list[np.ndarray]] = {}
    for name, d in deltas.items():
        m = rx.search(name)
        if m is None:
            continue
        pooled.setdefault(int(m.group(1)), []).append(np.ravel(d))
    return {k: np.concatenate(v) for k, v in sorted(pooled.items())}
