"""Small dense numerical kernels shared by the model, trainer and theory code.

Arrays are plain ``numpy.float64`` arrays; the helpers here add the shape
checks and the numerically careful variants the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "make_rng",
    "matmul",
    "stable_softmax",
    "log_softmax",
    "NadamState",
    "nadam_step",
    "spectral_norm",
]


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; equal seeds replay identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def stable_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` with max-subtraction.

    Works on a single score vector or on any stack of them.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0 or scores.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


@dataclass
class NadamState:
    """Moment accumulators for one parameter array.

    The update is Adam with a Nesterov look-ahead on the first moment
    (Dozat's formulation with a constant momentum coefficient).
    """

    shape: tuple[int, ...]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.shape = tuple(self.shape)
        self.m = np.zeros(self.shape)
        self.v = np.zeros(self.shape)


def nadam_step(state: NadamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Apply one update in place to ``params`` and return it.

    ``state`` is mutated (moments and step counter).
    """
    if params.shape != state.shape or grads.shape != state.shape:
        raise ValueError(
            f"nadam_step shape mismatch: state {state.shape}, params {params.shape}, grads {grads.shape}"
        )
    b1, b2 = state.beta1, state.beta2
    state.step += 1
    t = state.step
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grads)
    m_hat = b1 * state.m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * grads / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def spectral_norm(
    w: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0
) -> float:
    """Largest singular value by power iteration on ``WᵀW``.

    The start vector is drawn from a fixed seed so repeated calls agree
    bit for bit. If the iteration stalls on a vector orthogonal to the top
    singular direction it restarts once from a fresh seeded vector.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"spectral_norm expects a non-empty matrix, got shape {w.shape}")
    if not np.any(w):
        return 0.0
    # iterate on the smaller Gram matrix
    gram = w.T @ w if w.shape[1] <= w.shape[0] else w @ w.T
    dim = gram.shape[0]
    if dim == 1:
        return float(np.sqrt(gram[0, 0]))

    best = 0.0
    for attempt in range(2):
        rng = make_rng(seed + attempt)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            u = gram @ v
            norm_u = np.linalg.norm(u)
            if norm_u == 0.0:
                break
            new_lam = float(v @ u)
            v = u / norm_u
            if abs(new_lam - lam) <= tol * abs(new_lam):
                lam = new_lam
                break
            lam = new_lam
        # Rayleigh quotient on the converged vector
        lam = float(v @ (gram @ v))
        best = max(best, lam)
        if best > 0.0:
            break
    return float(np.sqrt(max(best, 0.0)))
