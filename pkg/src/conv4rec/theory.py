"""Norms, generalization-bound calculators and distribution-recovery tools.

Decoder layers are measured with position-dependent norms:

* dense and conv layers in the interior: spectral norm;
* the expand layer: the largest spectral norm over its ``n`` item slices;
* the last layer: the largest Euclidean norm of a row of ``W``.

With these, the bias-free decoder is Lipschitz from an ``l2`` ball of
embeddings to scores measured entrywise in max-norm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import ObservedDataset, RatingScale
from .model import DecoderSpec, LayerSpec, _glorot, backprop_layers, decode, run_layers
from .numerics import NadamState, log_softmax, make_rng, nadam_step, spectral_norm, stable_softmax

_log = logging.getLogger(__name__)

__all__ = [
    "NORM_KINDS",
    "norm_kind",
    "layer_norm",
    "LayerDistances",
    "distance_to_init",
    "BoundInputs",
    "bound_param_count",
    "bound_norm_based",
    "q_bound",
    "lipschitz_probe",
    "claim1_probe",
    "bayes_optimal_G",
    "population_loss",
    "implicit_loss",
    "kl_divergence",
    "tv_distance",
    "GroundTruth",
    "synth_generate",
    "sample_counts",
    "sample_dataset",
    "TVRow",
    "tv_recovery_experiment",
]

NORM_KINDS = ("interior-dense", "boundary", "interior-conv", "last")


def norm_kind(ell: int, L0: int, L: int) -> str:
    """Norm used at decoder layer ``ell`` (1-based)."""
    if not 1 <= ell <= L:
        raise ValueError(f"layer {ell} outside 1..{L}")
    if ell == L:
        return "last"
    if ell < L0:
        return "interior-dense"
    if ell == L0:
        return "boundary"
    return "interior-conv"


def layer_norm(w: np.ndarray, kind: str, n: int | None = None) -> float:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"layer_norm expects a matrix, got shape {w.shape}")
    if kind in ("interior-dense", "interior-conv"):
        return spectral_norm(w)
    if kind == "last":
        return float(np.sqrt((w**2).sum(axis=1)).max())
    if kind == "boundary":
        if n is None or n < 1 or w.shape[0] % n:
            raise ValueError(f"boundary weight with {w.shape[0]} rows cannot be split into n={n} slices")
        K = w.shape[0] // n
        return max(spectral_norm(w[j * K:(j + 1) * K]) for j in range(n))
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def _kinds(dec: DecoderSpec) -> list[str]:
    return [norm_kind(ell, dec.L0, dec.L) for ell in range(1, dec.L + 1)]


@dataclass
class LayerDistances:
    dist: list[float]
    beta: float
    nu: float
    a: list[float]
    s: list[float]
    init_norms: list[float]


def distance_to_init(dec: DecoderSpec, weights: Sequence[np.ndarray],
                     init: Sequence[np.ndarray] | None) -> LayerDistances:
    """Per-layer distances to the initialization and the norms the bounds need.

    ``a`` holds the sum of row norms of ``W - M`` (Frobenius at the last layer)
    and ``s`` the layer norms of ``W`` itself.
    """
    if init is None:
        raise ValueError("distance_to_init needs the initialization snapshot")
    if len(init) != len(weights):
        raise ValueError("weights and initialization differ in length")
    kinds = _kinds(dec)
    dist, a, s, m_norms = [], [], [], []
    for kind, w, m in zip(kinds, weights, init):
        d = np.asarray(w) - np.asarray(m)
        dist.append(layer_norm(d, kind, dec.n))
        s.append(layer_norm(w, kind, dec.n))
        m_norms.append(layer_norm(m, kind, dec.n))
        if kind == "last":
            a.append(float(np.linalg.norm(d)))
        else:
            a.append(float(np.sqrt((d**2).sum(axis=1)).sum()))
    nu = max(0.0, max(m_norms) - 1.0)
    return LayerDistances(dist, float(sum(dist)), nu, a, s, m_norms)


# --- bound calculators -------------------------------------------------------

@dataclass
class BoundInputs:
    delta: float
    N: float
    m: int
    r: int
    D2: int
    du: float
    L: int
    beta: float = 0.0
    nu: float = 0.0
    chi: float = 1.0
    a: tuple[float, ...] = ()
    s: tuple[float, ...] = ()
    n: int = 1
    B: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.N <= 0 or self.m < 1 or self.r < 1 or self.D2 < 1 or self.L < 1:
            raise ValueError("N, m, r, D2 and L must be positive")
        if self.du <= 0 or self.chi <= 0:
            raise ValueError("du and chi must be positive")
        if self.beta < 0 or self.nu < 0 or self.B < 0:
            raise ValueError("beta, nu and B must be non-negative")
        self.a = tuple(float(x) for x in self.a)
        self.s = tuple(float(x) for x in self.s)
        if self.a and len(self.a) != self.L or self.s and len(self.s) != self.L:
            raise ValueError("a and s need one entry per decoder layer")

    def as_dict(self) -> dict:
        return asdict(self)


def _confidence_terms(b: BoundInputs) -> float:
    du2 = b.du**2
    return 3 * du2 * math.sqrt(math.log(2 / b.delta) / (2 * b.N)) + 16 * du2 / b.N


def bound_param_count(b: BoundInputs) -> float:
    """Parameter-counting bound on the gap between population and sample RMSE-type risk."""
    du2 = b.du**2
    P = b.m * b.r + b.D2
    out = _confidence_terms(b)
    out += du2 * math.sqrt(48 * P * (b.beta + b.nu * b.L) / b.N)
    out += du2 * math.sqrt(P * math.log(72 * b.N * (b.chi + b.beta) * (b.chi + 1) + 1) / b.N)
    return out


def bound_norm_based(b: BoundInputs) -> float:
    """Norm-based bound driven by the layer norms ``s`` and distances ``a``."""
    if len(b.s) != b.L or len(b.a) != b.L:
        raise ValueError("the norm-based bound needs a and s for every layer")
    if any(x <= 0 for x in b.s):
        raise ValueError("layer norms s must be positive")
    du2 = b.du**2
    prod_s = math.prod(b.s)
    tails = [math.prod(b.s[ell:]) for ell in range(b.L)]
    S = max(tails)
    a_max = max(b.a)
    inner = 600 * b.N * b.chi * prod_s + 1
    out = _confidence_terms(b)
    out += 48 * du2 * b.chi**2 * math.sqrt(b.m * b.r / b.N) * math.sqrt(math.log(inner))
    mix = sum((ai / si) ** (2 / 3) for ai, si in zip(b.a, b.s)) ** 1.5
    if mix > 0:
        log_arg = b.D2 * b.n * (17 * b.N * a_max * S + 7) * inner
        out += 1584 * du2 * b.chi * prod_s * mix * math.sqrt(b.r / b.N) * math.sqrt(math.log(log_arg))
    return out


def q_bound(b: BoundInputs) -> float:
    """Excess cross-entropy bound (up to the unstated constant of its O-form)."""
    P = b.m * b.r + b.D2
    out = 12 * b.B * math.sqrt(math.log(2 / b.delta) / (2 * b.N)) + 32 * b.B / b.N
    inner = (b.beta + b.nu * b.L) + math.log(6 * b.N * (b.chi + b.beta) * (b.chi + 1) * b.B + 1)
    out += 96 * b.B / math.sqrt(b.N) * math.sqrt(P * inner)
    return out


# --- Lipschitz probe ---------------------------------------------------------

def _random_in_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / dim)


def _perturb(rng: np.random.Generator, dec: DecoderSpec, init: Sequence[np.ndarray], beta: float) -> list[np.ndarray]:
    """``M + Δ`` with the layer norms of ``Δ`` summing to at most ``beta``."""
    kinds = _kinds(dec)
    budget = beta * rng.random() * rng.dirichlet(np.ones(len(init)))
    out = []
    for kind, m, share in zip(kinds, init, budget):
        d = rng.standard_normal(m.shape)
        nrm = layer_norm(d, kind, dec.n)
        out.append(m + d * (share / nrm if nrm > 0 else 0.0))
    return out


def _score_bound(chi: float, beta: float, nu: float, L: int) -> float:
    return (chi + 1.0) * math.exp(beta + L * nu)


def lipschitz_probe(dec: DecoderSpec, init: Sequence[np.ndarray], trials: int, chi: float, beta: float,
                    seed: int = 0) -> float:
    """Largest observed ratio of a score difference to its Lipschitz bound.

    Pairs ``(x, θ)``, ``(x~, θ~)`` are drawn with ``‖x‖ ≤ χ`` and
    ``Σ‖W - M‖ ≤ β``; half the trials use a small perturbation of the first
    point so local slopes are probed too. Biases are not part of the map.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    init = [np.asarray(m, dtype=np.float64) for m in init]
    kinds = _kinds(dec)
    nu = max(0.0, max(layer_norm(m, k, dec.n) for m, k in zip(init, kinds)) - 1.0)
    const = _score_bound(chi, beta, nu, dec.L)
    rng = make_rng(seed)
    worst = 0.0
    for t in range(trials):
        w1 = _perturb(rng, dec, init, beta)
        x1 = _random_in_ball(rng, dec.r, chi)
        if t % 2 == 0:
            w2 = _perturb(rng, dec, init, beta)
            x2 = _random_in_ball(rng, dec.r, chi)
        else:
            eps = 10.0 ** rng.uniform(-6, -1)
            # shrink toward M so the pair stays inside the budget
            w2 = [m + (1 - eps) * (w - m) for w, m in zip(w1, init)]
            x2 = (1 - eps) * x1
        num = float(np.max(np.abs(decode(dec, w1, x1[None]) - decode(dec, w2, x2[None]))))
        gap = float(np.linalg.norm(x1 - x2)) + sum(
            layer_norm(a - b, k, dec.n) for a, b, k in zip(w1, w2, kinds)
        )
        if gap == 0.0:
            continue
        worst = max(worst, num / (const * gap))
    return worst


def claim1_probe(dec: DecoderSpec, init: Sequence[np.ndarray], chi: float, beta: float, eps: float = 1e-3,
                 trials: int = 100, seed: int = 0) -> float:
    """Largest ratio of the score change from ``W^L += ε e1 e1ᵀ`` to ``χ e^{β+νL} ε``."""
    init = [np.asarray(m, dtype=np.float64) for m in init]
    kinds = _kinds(dec)
    nu = max(0.0, max(layer_norm(m, k, dec.n) for m, k in zip(init, kinds)) - 1.0)
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(trials):
        # leave room for the perturbation inside the budget
        w1 = _perturb(rng, dec, init, max(beta - eps, 0.0))
        x = _random_in_ball(rng, dec.r, chi)
        w2 = [w.copy() for w in w1]
        w2[-1][0, 0] += eps
        change = float(np.max(np.abs(decode(dec, w1, x[None]) - decode(dec, w2, x[None]))))
        worst = max(worst, change / (chi * math.exp(beta + nu * dec.L) * eps))
    return worst


# --- Bayes-optimal output and losses -----------------------------------------

def bayes_optimal_G(p: np.ndarray, N: float, tol: float = 1e-12) -> np.ndarray:
    """Minimizer of the population loss: ``N p`` on rating channels, the rest on 0.

    Requires ``N * p_ij <= 1`` for every entry.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"p must have shape (m, n, k), got {p.shape}")
    marg = p.sum(axis=-1)
    bad = np.argwhere(N * marg > 1.0 + tol)
    if bad.size:
        i, j = bad[0]
        raise ValueError(
            f"entry (i={i}, j={j}) has N*p = {N * marg[i, j]:.6g} > 1; expected at most one draw"
        )
    G = np.empty(p.shape[:2] + (p.shape[2] + 1,))
    G[..., 1:] = N * p
    G[..., 0] = np.maximum(1.0 - N * marg, 0.0)
    return G


def population_loss(G: np.ndarray, p: np.ndarray, N: float) -> float:
    """``Σ p_ijκ [log G_ij0 - log G_ijκ] - (1/N) Σ log G_ij0``."""
    G = np.asarray(G, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        logG = np.log(G)
        terms = np.where(p > 0, p * (logG[..., :1] - logG[..., 1:]), 0.0)
    return float(terms.sum() - logG[..., 0].sum() / N)


def implicit_loss(G: np.ndarray, train: ObservedDataset, N: float) -> float:
    """Sample version of :func:`population_loss` on the triples of ``train``.

    Duplicate (user, item) pairs are not supported by ``ObservedDataset``; on
    such data the value equals ``(mn/N)`` times the full reconstruction loss.
    """
    G = np.asarray(G, dtype=np.float64)
    need0 = G[..., 0]
    needk = G[train.users, train.items, train.ratings]
    if np.any(need0 <= 0) or np.any(needk <= 0):
        raise ValueError("G has zero probability on a channel the loss needs")
    obs = -(np.log(needk) - np.log(G[train.users, train.items, 0])).sum() / N
    return float(obs - np.log(need0).sum() / N)


def _check_pair(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    return p, q


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """``KL(p || q)`` in nats; requires ``q > 0`` wherever ``p > 0``."""
    p, q = _check_pair(p, q)
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("q must be positive wherever p is")
    return float(max(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))), 0.0))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """L1 distance ``Σ|p - q|`` (twice the usual total-variation convention)."""
    p, q = _check_pair(p, q)
    return float(np.abs(p - q).sum())


# --- synthetic ground truth and recovery -------------------------------------

@dataclass
class GroundTruth:
    """Sampling distribution ``p`` over (user, item, rating) cells.

    ``G_gen`` is the generator's output and ``Z`` the total rating-channel
    mass, so ``p = G_gen[..., 1:] / Z`` (exactly, unless ``noiseless``).
    """

    p: np.ndarray
    G_gen: np.ndarray
    Z: float
    scale: RatingScale
    noiseless: bool
    embeddings: np.ndarray
    weights: list[np.ndarray]
    dec: DecoderSpec

    @property
    def m(self) -> int:
        return self.p.shape[0]

    @property
    def n(self) -> int:
        return self.p.shape[1]

    @property
    def marginals(self) -> np.ndarray:
        return self.p.sum(axis=-1)


def synth_generate(m: int, n: int, r_true: int, k: int, seed: int, K: int = 4, noiseless: bool = False,
                   spread: float = 2.0, sparsity: float = 2.0) -> GroundTruth:
    """Ground truth produced by a random bias-free decoder on rank-``r_true`` embeddings.

    ``spread`` scales the decoder's output weights (sharper rating
    distributions); ``sparsity`` shifts mass toward channel 0 through a
    dedicated hidden unit fed by an all-ones embedding coordinate.
    """
    if min(m, n, r_true, k, K) < 1 or k < 2:
        raise ValueError("dimensions must be positive and k >= 2")
    rng = make_rng(seed)
    dec = DecoderSpec.uniform(n, k, r_true, 2, K)
    X = np.abs(rng.standard_normal((m, r_true)))
    X[:, 0] = 1.0
    w1 = _glorot(rng, dec.layers[0]) * 2.0
    w1.reshape(n, K, r_true)[:, 0, :] = 0.0
    w1.reshape(n, K, r_true)[:, 0, 0] = 1.0
    w2 = rng.standard_normal((k + 1, K)) * spread / math.sqrt(K)
    w2[:, 0] = 0.0
    w2[0, 0] = sparsity
    ws = [w1, w2]
    G = stable_softmax(decode(dec, ws, X), axis=-1)
    if noiseless:
        best = G[..., 1:].argmax(axis=-1)
        tail = np.zeros_like(G[..., 1:])
        np.put_along_axis(tail, best[..., None], (1.0 - G[..., 0])[..., None], axis=-1)
        G = np.concatenate([G[..., :1], tail], axis=-1)
    Z = float(G[..., 1:].sum())
    p = G[..., 1:] / Z
    return GroundTruth(p, G, Z, RatingScale.integer(1, k), noiseless, X, ws, dec)


def sample_counts(gt: GroundTruth, N: int, rng: np.random.Generator) -> np.ndarray:
    """Counts ``(m, n, k)`` of ``N`` i.i.d. draws from ``p`` (duplicates allowed)."""
    flat = gt.p.ravel()
    return rng.multinomial(N, flat / flat.sum()).reshape(gt.p.shape)


def sample_dataset(gt: GroundTruth, N: int, rng: np.random.Generator) -> ObservedDataset:
    """``N`` draws with duplicate (user, item) pairs redrawn.

    Equivalent to drawing cells sequentially without replacement with weights
    ``p_ij``, then a rating from ``p_ijκ / p_ij``.
    """
    m, n, k = gt.p.shape
    if N > m * n:
        raise ValueError(f"cannot draw N={N} distinct entries from an {m}x{n} grid")
    marg = gt.marginals.ravel()
    support = np.flatnonzero(marg > 0)
    if N > support.size:
        raise ValueError(f"only {support.size} entries have positive probability, N={N} requested")
    # weighted sampling without replacement via exponential keys
    keys = np.log(rng.random(support.size)) / marg[support]
    cells = support[np.argsort(-keys, kind="stable")[:N]]
    users, items = np.divmod(cells, n)
    cond = gt.p.reshape(m * n, k)[cells] / marg[cells, None]
    u = rng.random(N)[:, None]
    ratings = 1 + np.minimum((cond.cumsum(axis=1) < u).sum(axis=1), k - 1)
    order = np.lexsort((items, users))
    return ObservedDataset(m, n, users[order], items[order], ratings[order], gt.scale)


@dataclass
class TVRow:
    seed: int
    N: int
    tv: float
    tv_marginal: float
    kl: float
    excess: float
    mse: float
    q_bound: float
    final_loss: float
    status: str = "ok"


def _fit_free_embeddings(counts: np.ndarray, N: int, Kc: float, dec: DecoderSpec, seed: int,
                         steps: int, lr: float) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray], float]:
    """Fit embeddings and decoder to the count-weighted cross-entropy.

    Cell weights are ``c_ijκ / N`` on rating channels and
    ``max(Kc - C_ij / N, 0)`` on channel 0; with ``Kc = 1/Z`` the population
    minimizer is the generator's own output.
    """
    m, n, k = counts.shape
    w = np.empty((m, n, k + 1))
    w[..., 1:] = counts / N
    w[..., 0] = np.maximum(Kc - counts.sum(axis=-1) / N, 0.0)
    wsum = w.sum(axis=-1, keepdims=True)
    rng = make_rng(seed)
    X = np.abs(rng.standard_normal((m, dec.r)))
    ws = [_glorot(rng, spec) for spec in dec.layers]
    init = [a.copy() for a in ws]
    params = [X] + ws
    opt = [NadamState(a.shape, lr) for a in params]
    specs = dec.layers
    nones = [None] * len(ws)
    loss = math.nan
    for _ in range(steps):
        scores, trace = run_layers(specs, ws, nones, X)
        logG = log_softmax(scores, axis=-1)
        loss = float(-(w * logG).sum())
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite loss while fitting")
        dg = wsum * np.exp(logG) - w
        dws, _, dx = backprop_layers(specs, ws, trace, dg, need_input_grad=True)
        for st, a, g in zip(opt, params, [dx] + dws):
            nadam_step(st, a, g)
    return X, ws, init, loss


def tv_recovery_experiment(m: int, n: int, r_true: int, k: int, N_list: Sequence[int], seeds: Sequence[int] = (0,),
                           r_model: int = 4, K_model: int = 8, steps: int = 3000, lr: float = 0.01,
                           noiseless: bool = False, delta: float = 0.05, gen_seed: int | None = None,
                           on_row: Callable[[TVRow], None] | None = None) -> list[TVRow]:
    """Fit the model to i.i.d. samples of sizes ``N_list`` and measure recovery.

    Each row reports ``TV(p̂, p)`` with ``p̂ = Ĝ_{κ≥1} / Σ Ĝ_{κ≥1}``, the same
    distance on (user, item) marginals, ``KL(p || p̂)``, the exact population
    excess risk, the rating MSE ``Σ p_ij (u* - F̂_ij)²`` (noiseless ground
    truth; NaN otherwise) and the excess-risk bound evaluated at the fit.
    """
    rows: list[TVRow] = []
    for seed in seeds:
        gt = synth_generate(m, n, r_true, k, seed if gen_seed is None else gen_seed, noiseless=noiseless)
        dec = DecoderSpec.uniform(n, k, r_model, 2, K_model)
        Kc = 1.0 / gt.Z
        G_star = gt.G_gen
        best_rating = gt.scale.array[gt.p.argmax(axis=-1)]
        rng = make_rng(1000 + seed)
        for N in N_list:
            counts = sample_counts(gt, int(N), rng)
            try:
                X, ws, init, loss = _fit_free_embeddings(counts, int(N), Kc, dec, seed, steps, lr)
            except FloatingPointError as exc:
                row = TVRow(seed, int(N), *([math.nan] * 7), status=f"diverged: {exc}")
                rows.append(row)
                if on_row:
                    on_row(row)
                continue
            scores = decode(dec, ws, X)
            G = stable_softmax(scores, axis=-1)
            p_hat = G[..., 1:] / G[..., 1:].sum()
            tv = tv_distance(p_hat, gt.p)
            tv_m = tv_distance(p_hat.sum(-1), gt.marginals)
            try:
                kl = kl_divergence(gt.p, p_hat)
            except ValueError:
                # some cell underflowed to zero probability
                kl = math.inf
            excess = population_loss(G, gt.p, gt.Z) - population_loss(G_star, gt.p, gt.Z)
            mse = math.nan
            if noiseless:
                cond = stable_softmax(scores[..., 1:], axis=-1)
                F = cond @ gt.scale.array
                mse = float((gt.marginals * (best_rating - F) ** 2).sum())
            dist = distance_to_init(dec, ws, init)
            b = BoundInputs(delta, float(N), m, r_model, dec.D2, gt.scale.span, dec.L, dist.beta, dist.nu,
                            float(np.linalg.norm(X, axis=1).max()), n=n, B=float(np.abs(scores).max()))
            row = TVRow(seed, int(N), tv, tv_m, kl, excess, mse, q_bound(b), loss)
            rows.append(row)
            if on_row:
                on_row(row)
    return rows
