"""Encoder/decoder stack with per-item weight sharing.

Layer kinds
-----------
``conv``
    a 1x1 convolution: one ``(out, in)`` matrix applied to every item row.
``dense``
    an ordinary fully-connected map on a vector; a ``(B, n, C)`` input is
    flattened item-major (index ``j * C + c``) first.
``expand``
    the decoder's dense-to-spatial layer. Its weight has shape
    ``(n * out, in)``; rows ``j*out:(j+1)*out`` form item ``j``'s slice and the
    result is reshaped to ``(B, n, out)``.

Weights are stored ``(out, in)`` so a layer computes ``x @ W.T``. ReLU follows
every layer except the decoder's last, which emits raw scores.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ObservedDataset, RatingScale, UserSlice, dense_slices
from .numerics import make_rng, stable_softmax

__all__ = [
    "LayerSpec",
    "EncoderSpec",
    "DecoderSpec",
    "ModelParams",
    "ForwardOutput",
    "init_params",
    "forward",
    "forward_batch",
    "outputs_from_probs",
    "conditional_identity_check",
    "prediction_jacobian",
    "embedding_norm_max",
    "embed",
    "decode",
    "run_layers",
    "backprop_layers",
    "save_checkpoint",
    "load_checkpoint",
]

_KINDS = ("conv", "dense", "expand")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int
    n_out: int
    n_items: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError(f"layer widths must be positive: {self.n_in} -> {self.n_out}")
        if self.kind == "expand":
            if not self.n_items or self.n_items < 1:
                raise ValueError("an expand layer needs a positive item count")
        elif self.n_items is not None:
            raise ValueError(f"{self.kind} layers carry no item count")

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "expand":
            return (self.n_items * self.n_out, self.n_in)
        return (self.n_out, self.n_in)

    @property
    def bias_shape(self) -> tuple[int]:
        return (self.weight_shape[0],)

    @property
    def weight_count(self) -> int:
        a, b = self.weight_shape
        return a * b


def _bias_count(layers: Sequence[LayerSpec], biases: bool) -> int:
    return sum(l.bias_shape[0] for l in layers) if biases else 0


@dataclass(frozen=True)
class EncoderSpec:
    """Conv layers on the one-hot slice, then dense layers down to ``r``."""

    n: int
    k: int
    conv_widths: tuple[int, ...] = (6,)
    dense_widths: tuple[int, ...] = (32,)
    biases: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if not self.dense_widths:
            raise ValueError("the encoder needs at least one dense layer")
        if self.n < 1 or self.k < 2:
            raise ValueError(f"bad encoder dims n={self.n}, k={self.k}")

    @property
    def r(self) -> int:
        return self.dense_widths[-1]

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        out: list[LayerSpec] = []
        width = self.k + 1
        for w in self.conv_widths:
            out.append(LayerSpec("conv", width, w))
            width = w
        width = self.n * width
        for w in self.dense_widths:
            out.append(LayerSpec("dense", width, w))
            width = w
        return tuple(out)

    @property
    def D1(self) -> int:
        return sum(l.weight_count for l in self.layers) + _bias_count(self.layers, self.biases)


@dataclass(frozen=True)
class DecoderSpec:
    """``L`` layers from ``r`` to ``k+1`` scores per item.

    ``widths`` lists the hidden widths ``K_1..K_{L-1}``. Layers ``1..L0-1`` are
    dense, layer ``L0`` expands to the item grid and the rest are 1x1 convs.
    """

    n: int
    k: int
    r: int
    widths: tuple[int, ...] = (6,)
    L0: int = 1
    biases: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.n < 1 or self.k < 2 or self.r < 1:
            raise ValueError(f"bad decoder dims n={self.n}, k={self.k}, r={self.r}")
        if not 1 <= self.L0 < self.L:
            raise ValueError(f"need 1 <= L0 < L, got L0={self.L0}, L={self.L}")

    @classmethod
    def uniform(cls, n: int, k: int, r: int, L: int, K: int, L0: int = 1, biases: bool = False) -> "DecoderSpec":
        return cls(n, k, r, (K,) * (L - 1), L0, biases)

    @property
    def L(self) -> int:
        return len(self.widths) + 1

    @property
    def K(self) -> tuple[int, ...]:
        """Widths ``K_0 = r, ..., K_L = k+1``."""
        return (self.r, *self.widths, self.k + 1)

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        K = self.K
        out = []
        for ell in range(1, self.L + 1):
            if ell < self.L0:
                out.append(LayerSpec("dense", K[ell - 1], K[ell]))
            elif ell == self.L0:
                out.append(LayerSpec("expand", K[ell - 1], K[ell], self.n))
            else:
                out.append(LayerSpec("conv", K[ell - 1], K[ell]))
        return tuple(out)

    @property
    def D2(self) -> int:
        return sum(l.weight_count for l in self.layers) + _bias_count(self.layers, self.biases)


@dataclass
class ModelParams:
    enc: EncoderSpec
    dec: DecoderSpec
    scale: RatingScale
    enc_w: list[np.ndarray]
    dec_w: list[np.ndarray]
    enc_b: list[np.ndarray] | None = None
    dec_b: list[np.ndarray] | None = None
    seed: int = 0
    init: tuple[np.ndarray, ...] | None = field(default=None, repr=False)

    @property
    def has_biases(self) -> bool:
        return self.enc_b is not None

    def arrays(self) -> list[np.ndarray]:
        """Every trainable array in a fixed order (the optimizer's view)."""
        out = list(self.enc_w)
        if self.enc_b is not None:
            out += self.enc_b
        out += self.dec_w
        if self.dec_b is not None:
            out += self.dec_b
        return out

    def init_arrays(self) -> tuple[np.ndarray, ...]:
        if self.init is None:
            raise ValueError("these parameters carry no initialization snapshot")
        return self.init

    @property
    def dec_init(self) -> list[np.ndarray]:
        """Decoder weights as drawn at initialization (the reference point M)."""
        snap = self.init_arrays()
        start = len(self.enc_w) + (len(self.enc_b) if self.enc_b is not None else 0)
        return list(snap[start:start + len(self.dec_w)])

    def copy(self) -> "ModelParams":
        cp = lambda xs: None if xs is None else [x.copy() for x in xs]
        return ModelParams(self.enc, self.dec, self.scale, cp(self.enc_w), cp(self.dec_w),
                           cp(self.enc_b), cp(self.dec_b), self.seed, self.init)


@dataclass
class ForwardOutput:
    scores: np.ndarray | None
    probs: np.ndarray
    cond: np.ndarray
    prediction: np.ndarray
    interaction: np.ndarray
    embedding: np.ndarray | None = None


def _glorot(rng: np.random.Generator, spec: LayerSpec) -> np.ndarray:
    if spec.kind == "expand":
        # each item's block is an ordinary (out x in) map
        fan_in, fan_out = spec.n_in, spec.n_out
    else:
        fan_out, fan_in = spec.weight_shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=spec.weight_shape)


def _freeze(arrs: Sequence[np.ndarray]) -> tuple[np.ndarray, ...]:
    out = []
    for a in arrs:
        a = a.copy()
        a.setflags(write=False)
        out.append(a)
    return tuple(out)


def init_params(enc: EncoderSpec, dec: DecoderSpec, scale: RatingScale, seed: int = 0) -> ModelParams:
    if enc.r != dec.r:
        raise ValueError(f"encoder output r={enc.r} differs from decoder input r={dec.r}")
    if enc.n != dec.n or enc.k != dec.k:
        raise ValueError("encoder and decoder disagree on n or k")
    if scale.k != dec.k:
        raise ValueError(f"rating scale has k={scale.k}, model expects k={dec.k}")
    if enc.biases != dec.biases:
        raise ValueError("bias policy must match between encoder and decoder")
    rng = make_rng(seed)
    enc_w = [_glorot(rng, l) for l in enc.layers]
    dec_w = [_glorot(rng, l) for l in dec.layers]
    enc_b = [np.zeros(l.bias_shape) for l in enc.layers] if enc.biases else None
    dec_b = [np.zeros(l.bias_shape) for l in dec.layers] if dec.biases else None
    p = ModelParams(enc, dec, scale, enc_w, dec_w, enc_b, dec_b, int(seed))
    p.init = _freeze(p.arrays())
    return p


# --- layer primitives -------------------------------------------------------

def _apply(spec: LayerSpec, w: np.ndarray, b: np.ndarray | None, x: np.ndarray) -> np.ndarray:
    if spec.kind == "conv":
        y = x @ w.T
    elif spec.kind == "dense":
        y = x.reshape(x.shape[0], -1) @ w.T
    else:
        y = (x @ w.T).reshape(x.shape[0], spec.n_items, spec.n_out)
    if b is not None:
        y = y + (b.reshape(spec.n_items, spec.n_out) if spec.kind == "expand" else b)
    return y


def _apply_grad(spec: LayerSpec, w: np.ndarray, x: np.ndarray, dy: np.ndarray,
                need_dx: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of a layer given ``dy``: (dW, db, dx)."""
    if spec.kind == "conv":
        dy2 = dy.reshape(-1, spec.n_out)
        dw = dy2.T @ x.reshape(-1, spec.n_in)
        db = dy2.sum(axis=0)
        dx = dy @ w if need_dx else None
    elif spec.kind == "dense":
        xf = x.reshape(x.shape[0], -1)
        dw = dy.T @ xf
        db = dy.sum(axis=0)
        dx = (dy @ w).reshape(x.shape) if need_dx else None
    else:
        dyf = dy.reshape(dy.shape[0], -1)
        dw = dyf.T @ x
        db = dyf.sum(axis=0)
        dx = dyf @ w if need_dx else None
    return dw, db, dx


def _stack(params: ModelParams):
    specs = params.enc.layers + params.dec.layers
    ws = params.enc_w + params.dec_w
    if params.has_biases:
        bs = params.enc_b + params.dec_b
    else:
        bs = [None] * len(ws)
    return specs, ws, bs


def run_layers(specs: Sequence[LayerSpec], ws: Sequence[np.ndarray], bs: Sequence[np.ndarray | None],
               x: np.ndarray, final_relu: bool = False) -> tuple[np.ndarray, list[np.ndarray]]:
    """Apply a layer stack; returns the output and every layer's input."""
    trace = []
    h = x
    last = len(specs) - 1
    for i, (spec, w, b) in enumerate(zip(specs, ws, bs)):
        trace.append(h)
        h = _apply(spec, w, b, h)
        if i != last or final_relu:
            h = np.maximum(h, 0.0)
    return h, trace


def backprop_layers(specs: Sequence[LayerSpec], ws: Sequence[np.ndarray], trace: Sequence[np.ndarray],
                    dy: np.ndarray, need_input_grad: bool = False):
    """Reverse pass for :func:`run_layers` (no ReLU after the last layer).

    Returns ``(dWs, dbs, dx)``; ``dx`` is None unless requested.
    """
    n_layers = len(specs)
    dws: list = [None] * n_layers
    dbs: list = [None] * n_layers
    dx = None
    for i in range(n_layers - 1, -1, -1):
        want = i > 0 or need_input_grad
        dw, db, dx = _apply_grad(specs[i], ws[i], trace[i], dy, need_dx=want)
        dws[i], dbs[i] = dw, db
        if i > 0:
            # trace[i] is the ReLU output of layer i-1
            dy = dx * (trace[i] > 0.0)
    return dws, dbs, dx


def forward_trace(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Scores for a one-hot batch plus every layer input (for backprop).

    ``trace[i]`` is the input to layer ``i``; the bottleneck embedding is
    ``trace[len(enc.layers)]``.
    """
    specs, ws, bs = _stack(params)
    return run_layers(specs, ws, bs, x)


def backward_trace(params: ModelParams, trace: list[np.ndarray], dscores: np.ndarray) -> list[np.ndarray]:
    """Backpropagate ``dL/dscores`` through the stack.

    Returns gradients in the order of ``params.arrays()``.
    """
    specs, ws, _ = _stack(params)
    dws, dbs, _ = backprop_layers(specs, ws, trace, dscores)
    n_enc = len(params.enc_w)
    grads = dws[:n_enc]
    if params.has_biases:
        grads += dbs[:n_enc]
    grads += dws[n_enc:]
    if params.has_biases:
        grads += dbs[n_enc:]
    return grads


def decode(dec: DecoderSpec, ws: Sequence[np.ndarray], z: np.ndarray,
           bs: Sequence[np.ndarray | None] | None = None) -> np.ndarray:
    """Decoder scores ``(B, n, k+1)`` for bottleneck vectors ``z`` of shape ``(B, r)``."""
    bs = [None] * len(ws) if bs is None else bs
    return run_layers(dec.layers, ws, bs, z)[0]


def outputs_from_probs(probs: np.ndarray, scale: RatingScale,
                       scores: np.ndarray | None = None,
                       embedding: np.ndarray | None = None) -> ForwardOutput:
    """Derive the conditional distribution, rating and interaction from ``G``."""
    if scores is not None:
        cond = stable_softmax(scores[..., 1:], axis=-1)
    else:
        tail = probs[..., 1:]
        mass = tail.sum(axis=-1, keepdims=True)
        k = tail.shape[-1]
        cond = np.where(mass > 0, tail / np.where(mass > 0, mass, 1.0), 1.0 / k)
    pred = cond @ scale.array
    np.clip(pred, scale.values[0], scale.values[-1], out=pred)
    return ForwardOutput(scores, probs, cond, pred, 1.0 - probs[..., 0], embedding)


def forward_batch(params: ModelParams, x: np.ndarray) -> ForwardOutput:
    """Forward pass on dense one-hot inputs of shape ``(B, n, k+1)``."""
    expect = (params.dec.n, params.dec.k + 1)
    if x.ndim != 3 or x.shape[1:] != expect:
        raise ValueError(f"expected input of shape (B, {expect[0]}, {expect[1]}), got {x.shape}")
    scores, trace = forward_trace(params, x)
    emb = trace[len(params.enc_w)]
    return outputs_from_probs(stable_softmax(scores, axis=-1), params.scale, scores, emb)


def forward(params: ModelParams, slice_: UserSlice) -> ForwardOutput:
    if slice_.n != params.dec.n or slice_.k != params.dec.k:
        raise ValueError(
            f"slice has n={slice_.n}, k={slice_.k}; model expects n={params.dec.n}, k={params.dec.k}"
        )
    out = forward_batch(params, slice_.dense()[None])
    return ForwardOutput(out.scores[0], out.probs[0], out.cond[0], out.prediction[0],
                         out.interaction[0], out.embedding[0])


def predict_users(params: ModelParams, train: ObservedDataset, users: Sequence[int],
                  batch: int = 128) -> np.ndarray:
    """Probability tensor ``G`` of shape ``(len(users), n, k+1)``."""
    users = np.asarray(users, dtype=np.int64)
    out = np.empty((users.size, params.dec.n, params.dec.k + 1))
    for lo in range(0, users.size, batch):
        x, _ = dense_slices(train, users[lo:lo + batch])
        scores, _ = forward_trace(params, x)
        out[lo:lo + batch] = stable_softmax(scores, axis=-1)
    return out


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Bottleneck embeddings for a one-hot batch."""
    specs, ws, bs = _stack(params)
    h = x
    for spec, w, b in list(zip(specs, ws, bs))[: len(params.enc_w)]:
        h = np.maximum(_apply(spec, w, b, h), 0.0)
    return h


def embedding_norm_max(params: ModelParams, train: ObservedDataset, batch: int = 256) -> float:
    """Largest Euclidean norm of a user's bottleneck embedding."""
    best = 0.0
    for lo in range(0, train.m, batch):
        x, _ = dense_slices(train, np.arange(lo, min(lo + batch, train.m)))
        z = embed(params, x)
        best = max(best, float(np.linalg.norm(z, axis=1).max(initial=0.0)))
    return best


def conditional_identity_check(g_row: np.ndarray, tol: float = 1e-12) -> bool:
    """Softmax over ratings equals the renormalized tail of the full softmax."""
    g_row = np.asarray(g_row, dtype=np.float64)
    direct = stable_softmax(g_row[1:])
    full = stable_softmax(g_row)
    tail = full[1:] / full[1:].sum()
    return bool(np.max(np.abs(direct - tail)) <= tol)


def prediction_jacobian(g_row: np.ndarray, scale: RatingScale) -> np.ndarray:
    """Gradient of the predicted rating with respect to the rating scores.

    ``dF/dg_j = G~_j (u_j - F)`` for the ``k`` rating channels.
    """
    g_row = np.asarray(g_row, dtype=np.float64)
    cond = stable_softmax(g_row[-scale.k:])
    u = scale.array
    return cond * (u - cond @ u)


# --- checkpoints ------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _spec_dict(p: ModelParams) -> dict:
    return {
        "encoder": {"n": p.enc.n, "k": p.enc.k, "conv_widths": list(p.enc.conv_widths),
                    "dense_widths": list(p.enc.dense_widths)},
        "decoder": {"n": p.dec.n, "k": p.dec.k, "r": p.dec.r, "widths": list(p.dec.widths),
                    "L0": p.dec.L0},
        "biases": p.has_biases,
        "scale": [float(v) for v in p.scale.values],
        "seed": p.seed,
    }


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    """Write specs, weights and the init snapshot; output is byte-stable.

    The file is a zip of ``.npy`` members readable with ``numpy.load``.
    """
    meta = _spec_dict(params)
    meta["extra"] = extra or {}
    arrays = params.arrays()
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for idx, a in enumerate(arrays):
            _write_member(zf, f"param_{idx:03d}.npy", _npy_bytes(a))
        for idx, a in enumerate(params.init_arrays()):
            _write_member(zf, f"init_{idx:03d}.npy", _npy_bytes(a))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        names = sorted(zf.namelist())
        params = [np.lib.format.read_array(io.BytesIO(zf.read(nm))) for nm in names if nm.startswith("param_")]
        init = [np.lib.format.read_array(io.BytesIO(zf.read(nm))) for nm in names if nm.startswith("init_")]
    e, d = meta["encoder"], meta["decoder"]
    biases = bool(meta["biases"])
    enc = EncoderSpec(e["n"], e["k"], tuple(e["conv_widths"]), tuple(e["dense_widths"]), biases)
    dec = DecoderSpec(d["n"], d["k"], d["r"], tuple(d["widths"]), d["L0"], biases)
    scale = RatingScale(tuple(meta["scale"]))
    ne, nd = len(enc.layers), len(dec.layers)
    expected = (ne + nd) * (2 if biases else 1)
    if len(params) != expected or len(init) != expected:
        raise ValueError(f"{path}: expected {expected} arrays, found {len(params)} (+{len(init)} init)")
    it = iter(params)
    enc_w = [next(it) for _ in range(ne)]
    enc_b = [next(it) for _ in range(ne)] if biases else None
    dec_w = [next(it) for _ in range(nd)]
    dec_b = [next(it) for _ in range(nd)] if biases else None
    for spec, w in zip(enc.layers + dec.layers, enc_w + dec_w):
        if w.shape != spec.weight_shape:
            raise ValueError(f"{path}: weight shape {w.shape} does not match layer {spec}")
    p = ModelParams(enc, dec, scale, enc_w, dec_w, enc_b, dec_b, int(meta["seed"]), _freeze(init))
    return p, meta.get("extra", {})
