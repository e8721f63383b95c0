"""Minimal neural core: sinusoidal encoding, MLPs with analytic gradients, Adam.

Everything is computed in float64 numpy. Forward passes accept a single vector
or a batch (N, d); batched code paths are what training and grid evaluation
use. Checkpoints store parameters as little-endian float32.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .backend import njit
from .errors import DegenerateNormalError

HEADS = ("linear", "simplex", "unit")
_HEAD_CODE = {h: i for i, h in enumerate(HEADS)}

UNIT_HEAD_MIN_NORM = 1e-8


# --- positional encoding ------------------------------------------------------

@dataclass(frozen=True)
class EncodingConfig:
    """Multi-frequency sinusoidal lifting of coordinates."""

    octaves: int = 6
    include_input: bool = True

    def __post_init__(self):
        if self.octaves < 0:
            raise ValueError("octaves must be >= 0")

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * ((1 if self.include_input else 0) + 2 * self.octaves)


def positional_encode(x: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Concatenate [x?, sin(2^l pi x), cos(2^l pi x) for l in 0..L)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    parts = [xb] if cfg.include_input else []
    for level in range(cfg.octaves):
        a = (2.0**level) * np.pi
        parts.append(np.sin(a * xb))
        parts.append(np.cos(a * xb))
    if not parts:
        out = np.zeros((xb.shape[0], 0))
    else:
        out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def positional_encode_backward(x: np.ndarray, cfg: EncodingConfig, grad_out: np.ndarray) -> np.ndarray:
    """Pull a gradient on the encoding back to the raw coordinates."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    g = grad_out[None, :] if single else grad_out
    d = xb.shape[1]
    gx = np.zeros_like(xb)
    off = 0
    if cfg.include_input:
        gx += g[:, :d]
        off = d
    for level in range(cfg.octaves):
        a = (2.0**level) * np.pi
        gx += g[:, off : off + d] * (a * np.cos(a * xb))
        off += d
        gx += g[:, off : off + d] * (-a * np.sin(a * xb))
        off += d
    return gx[0] if single else gx


# --- multilayer perceptron ----------------------------------------------------

@dataclass
class Mlp:
    """Fully connected net with a softplus-style hidden activation.

    ``head`` selects the output map: plain affine ("linear"), softmax
    ("simplex") or L2 normalization ("unit").
    """

    weights: list            # per layer (in_dim, out_dim)
    biases: list             # per layer (out_dim,)
    head: str = "linear"
    softplus_beta: float = 100.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight/bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input dim does not chain")

    @property
    def in_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    def dims(self):
        return [self.in_dim] + [int(W.shape[1]) for W in self.weights]

    def copy(self) -> "Mlp":
        return Mlp(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.head,
            self.softplus_beta,
        )

    def params_hash(self) -> int:
        acc = 0
        for W, b in zip(self.weights, self.biases):
            acc ^= hash(W.tobytes()) ^ hash(b.tobytes())
        return acc


def init_mlp(
    rng: np.random.Generator,
    dims,
    head: str = "linear",
    softplus_beta: float = 100.0,
    zero_final: bool = False,
    final_bias: float = 0.0,
) -> Mlp:
    """Uniform fan-in initialization; optional zeroed or biased last layer."""
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
        b = np.zeros(dims[i + 1])
        weights.append(W)
        biases.append(b)
    if zero_final:
        weights[-1][:] = 0.0
    biases[-1][:] = final_bias
    return Mlp(weights, biases, head=head, softplus_beta=softplus_beta)


_EXP_CUTOFF = 36.0  # beyond this, softplus/sigmoid equal their asymptotes in float64


@njit(cache=True)
def _softplus_kernel(z, beta, out):
    inv_beta = 1.0 / beta
    for i in range(z.shape[0]):
        bz = beta * z[i]
        if bz > _EXP_CUTOFF:
            out[i] = bz * inv_beta
        elif bz < -_EXP_CUTOFF:
            out[i] = 0.0
        else:
            m = bz if bz > 0.0 else 0.0
            out[i] = (m + np.log1p(np.exp(-abs(bz)))) * inv_beta


@njit(cache=True)
def _sigmoid_kernel(z, out):
    for i in range(z.shape[0]):
        v = z[i]
        if v > _EXP_CUTOFF:
            out[i] = 1.0
        elif v < -_EXP_CUTOFF:
            out[i] = 0.0
        else:
            e = np.exp(-abs(v))
            s = 1.0 / (1.0 + e)
            out[i] = s if v >= 0.0 else 1.0 - s


def _softplus(z: np.ndarray, beta: float) -> np.ndarray:
    if backend.use_numba():
        zc = np.ascontiguousarray(z)
        out = np.empty_like(zc)
        _softplus_kernel(zc.ravel(), beta, out.ravel())
        return out
    bz = beta * z
    out = np.maximum(bz, 0.0)
    mid = np.abs(bz) < _EXP_CUTOFF
    bzm = bz[mid]
    out[mid] = np.maximum(bzm, 0.0) + np.log1p(np.exp(-np.abs(bzm)))
    out /= beta
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    if backend.use_numba():
        zc = np.ascontiguousarray(z)
        out = np.empty_like(zc)
        _sigmoid_kernel(zc.ravel(), out.ravel())
        return out
    out = (z >= 0).astype(float)
    mid = np.abs(z) < _EXP_CUTOFF
    zm = z[mid]
    ez = np.exp(-np.abs(zm))
    sig = 1.0 / (1.0 + ez)
    out[mid] = np.where(zm >= 0, sig, 1.0 - sig)
    return out


@dataclass
class ForwardCache:
    """Intermediates retained for the backward pass."""

    inputs: list                      # input to each affine layer, batched
    preacts: list                     # pre-activation of each layer
    head_out: np.ndarray              # final output (after head), batched
    head_norm: np.ndarray = None      # pre-head row norms (unit head only)
    signature: tuple = ()

    def ok_rows(self) -> np.ndarray:
        if self.head_norm is None:
            return np.ones(self.head_out.shape[0], dtype=bool)
        return self.head_norm >= UNIT_HEAD_MIN_NORM


def _signature(mlp: Mlp) -> tuple:
    return (tuple(mlp.dims()), mlp.head)


def mlp_forward(mlp: Mlp, x: np.ndarray, strict_head: bool = True):
    """Run the net; returns (output, cache).

    With the unit head, rows whose pre-head norm is below 1e-8 raise
    DegenerateNormalError unless ``strict_head`` is False, in which case they
    come out as zero rows and are flagged in the cache.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != mlp.in_dim:
        raise ValueError(f"input dim {h.shape[1]} != expected {mlp.in_dim}")

    inputs, preacts = [], []
    n_layers = len(mlp.weights)
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = h @ W + b
        preacts.append(z)
        h = _softplus(z, mlp.softplus_beta) if i < n_layers - 1 else z

    head_norm = None
    if mlp.head == "linear":
        y = h
    elif mlp.head == "simplex":
        shifted = h - h.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
    else:  # unit
        head_norm = np.linalg.norm(h, axis=1)
        bad = head_norm < UNIT_HEAD_MIN_NORM
        if strict_head and np.any(bad):
            raise DegenerateNormalError(
                f"{int(bad.sum())} row(s) with pre-head norm below {UNIT_HEAD_MIN_NORM}"
            )
        safe = np.where(bad, 1.0, head_norm)
        y = h / safe[:, None]
        y[bad] = 0.0

    cache = ForwardCache(inputs, preacts, y, head_norm, _signature(mlp))
    return (y[0] if single else y), cache


def mlp_backward(mlp: Mlp, cache: ForwardCache, grad_out: np.ndarray):
    """Reverse-mode gradients. Returns (grads, grad_x).

    grads is a list of (dW, db) matching the layer list; grad_x has the shape
    of the forward input batch.
    """
    if cache.signature != _signature(mlp):
        raise ValueError("cache does not match this network (stale or from another net)")
    g = np.asarray(grad_out, dtype=float)
    single = g.ndim == 1
    g = g[None, :] if single else g
    if g.shape != cache.head_out.shape:
        raise ValueError(f"grad shape {g.shape} != output shape {cache.head_out.shape}")

    y = cache.head_out
    if mlp.head == "linear":
        dz = g
    elif mlp.head == "simplex":
        dz = y * (g - np.sum(g * y, axis=1, keepdims=True))
    else:  # unit
        norn = cache.head_norm
        safe = np.where(norn < UNIT_HEAD_MIN_NORM, 1.0, norn)
        dz = (g - y * np.sum(g * y, axis=1, keepdims=True)) / safe[:, None]
        dz[norn < UNIT_HEAD_MIN_NORM] = 0.0

    grads = [None] * len(mlp.weights)
    for i in range(len(mlp.weights) - 1, -1, -1):
        if i < len(mlp.weights) - 1:
            dz = dz * _sigmoid(mlp.softplus_beta * cache.preacts[i])
        x_in = cache.inputs[i]
        dW = x_in.T @ dz
        db = dz.sum(axis=0)
        grads[i] = (dW, db)
        if i > 0:
            dz = dz @ mlp.weights[i].T
        else:
            grad_x = dz @ mlp.weights[0].T
    return grads, (grad_x[0] if single else grad_x)


def zero_grads(mlp: Mlp):
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in zip(mlp.weights, mlp.biases)]


def accumulate_grads(target, grads):
    for (tW, tb), (gW, gb) in zip(target, grads):
        tW += gW
        tb += gb
    return target


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @staticmethod
    def for_mlp(mlp: Mlp) -> "AdamState":
        zeros = lambda: [
            (np.zeros_like(W), np.zeros_like(b)) for W, b in zip(mlp.weights, mlp.biases)
        ]
        return AdamState(m=zeros(), v=zeros())


def adam_step(mlp: Mlp, grads, state: AdamState, hyper: AdamHyper) -> None:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i, (gW, gb) in enumerate(grads):
        for j, g in enumerate((gW, gb)):
            m = state.m[i][j]
            v = state.v[i][j]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mh = m / corr1
            vh = v / corr2
            param = mlp.weights[i] if j == 0 else mlp.biases[i]
            param -= hyper.lr * mh / (np.sqrt(vh) + hyper.eps)


# --- gradient verification ------------------------------------------------------

def gradient_check(
    mlp: Mlp,
    probe: np.ndarray,
    loss_fn,
    rng: np.random.Generator,
    max_coords_per_array: int = 24,
    step: float = 1e-4,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(y) -> (value, dvalue_dy)`` defines the scalar objective over the
    net output. Checks a random subset of coordinates of every weight and bias
    plus the probe input itself.
    """
    y, cache = mlp_forward(mlp, probe)
    _, dy = loss_fn(y)
    grads, grad_x = mlp_backward(mlp, cache, dy)

    worst = 0.0

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    def numeric(param, idx):
        old = param[idx]
        param[idx] = old + step
        lp, _ = loss_fn(mlp_forward(mlp, probe)[0])
        param[idx] = old - step
        lm, _ = loss_fn(mlp_forward(mlp, probe)[0])
        param[idx] = old
        return (lp - lm) / (2 * step)

    for i, (gW, gb) in enumerate(grads):
        for param, grad in ((mlp.weights[i], gW), (mlp.biases[i], gb)):
            total = param.size
            n_pick = min(max_coords_per_array, total)
            flat_ids = rng.choice(total, size=n_pick, replace=False)
            for fid in flat_ids:
                idx = np.unravel_index(fid, param.shape)
                worst = max(worst, rel(grad[idx], numeric(param, idx)))

    probe_arr = np.asarray(probe, dtype=float).copy()
    for j in range(min(probe_arr.size, max_coords_per_array)):
        old = probe_arr[j]
        probe_arr[j] = old + step
        lp, _ = loss_fn(mlp_forward(mlp, probe_arr)[0])
        probe_arr[j] = old - step
        lm, _ = loss_fn(mlp_forward(mlp, probe_arr)[0])
        probe_arr[j] = old
        worst = max(worst, rel(np.asarray(grad_x).ravel()[j], (lp - lm) / (2 * step)))
    return worst


# --- checkpoint file format -----------------------------------------------------

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


def save_mlps(path, named_mlps) -> None:
    """Write named networks to a flat little-endian binary file.

    Layout: magic, u32 version, u32 count; then per network: u32 name length,
    utf-8 name, u32 head code, f64 softplus beta, u32 layer count, (u32 in,
    u32 out) per layer, then per layer the row-major float32 weight matrix
    followed by the float32 bias vector.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_mlps)))
        for name, mlp in named_mlps:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Id", _HEAD_CODE[mlp.head], mlp.softplus_beta))
            fh.write(struct.pack("<I", len(mlp.weights)))
            for W in mlp.weights:
                fh.write(struct.pack("<II", W.shape[0], W.shape[1]))
            for W, b in zip(mlp.weights, mlp.biases):
                fh.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_mlps(path):
    """Read back networks written by save_mlps as (name, Mlp) pairs."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        head_code, beta = struct.unpack_from("<Id", data, off)
        off += 12
        (n_layers,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = []
        for _ in range(n_layers):
            din, dout = struct.unpack_from("<II", data, off)
            off += 8
            dims.append((din, dout))
        weights, biases = [], []
        for din, dout in dims:
            W = np.frombuffer(data, dtype="<f4", count=din * dout, offset=off)
            off += 4 * din * dout
            b = np.frombuffer(data, dtype="<f4", count=dout, offset=off)
            off += 4 * dout
            weights.append(W.reshape(din, dout).astype(float))
            biases.append(b.astype(float))
        out.append((name, Mlp(weights, biases, head=HEADS[head_code], softplus_beta=beta)))
    return out
