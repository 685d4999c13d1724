"""Dense float64 numerics for the conditional LSTM: cells, losses, Adam.

Everything here is written against plain numpy arrays in double precision
so finite-difference checks at 1e-4 relative tolerance are meaningful.
Forward passes record their intermediate activations on a per-batch tape
(a plain list of caches); the matching backward functions consume those
caches in reverse order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = [
    "ParameterSet",
    "NonFiniteError",
    "sigmoid",
    "lstm_step",
    "lstm_step_backward",
    "softmax",
    "softmax_nll",
    "softmax_nll_batch",
    "nll_backward",
    "adam_step",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "uniform_init",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_CKPT_MAGIC = b"RMCP"
_CKPT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A parameter, gradient, or loss became NaN/Inf."""


class ParameterSet:
    """Named dense arrays with paired gradient and Adam moment buffers."""

    def __init__(self):
        self.names = []
        self.values = {}
        self.grads = {}
        self.adam_m = {}
        self.adam_v = {}
        self.adam_t = 0

    def add(self, name, array):
        if name in self.values:
            raise ValueError(f"duplicate parameter {name}")
        array = np.ascontiguousarray(array, dtype=np.float64)
        self.names.append(name)
        self.values[name] = array
        self.grads[name] = np.zeros_like(array)
        self.adam_m[name] = np.zeros_like(array)
        self.adam_v[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name):
        return self.values[name]

    def n_params(self):
        return sum(v.size for v in self.values.values())

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_global_norm(self):
        total = 0.0
        for g in self.grads.values():
            total += float(np.dot(g.ravel(), g.ravel()))
        return np.sqrt(total)

    def clip_grad_norm(self, max_norm):
        norm = self.grad_global_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def check_finite(self, what="parameters"):
        for name in self.names:
            buf = self.values[name] if what == "parameters" else self.grads[name]
            if not np.all(np.isfinite(buf)):
                raise NonFiniteError(f"non-finite {what} in {name}")

    def copy(self, with_optimizer=False):
        out = ParameterSet()
        for name in self.names:
            out.add(name, self.values[name].copy())
        if with_optimizer:
            out.adam_t = self.adam_t
            for name in self.names:
                out.adam_m[name] = self.adam_m[name].copy()
                out.adam_v[name] = self.adam_v[name].copy()
        return out

    def load_values(self, other):
        for name in self.names:
            np.copyto(self.values[name], other.values[name])

    # flat-coordinate access used by finite-difference checks
    def coord_location(self, flat_index):
        for name in self.names:
            size = self.values[name].size
            if flat_index < size:
                return name, flat_index
            flat_index -= size
        raise IndexError("flat index out of range")

    def get_coord(self, flat_index):
        name, off = self.coord_location(flat_index)
        return self.values[name].ravel()[off]

    def set_coord(self, flat_index, value):
        name, off = self.coord_location(flat_index)
        self.values[name].ravel()[off] = value

    def get_grad_coord(self, flat_index):
        name, off = self.coord_location(flat_index)
        return self.grads[name].ravel()[off]


def uniform_init(shape, fan_in, rng):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    # exp overflow saturates to the correct 0/1 limits
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def lstm_step(params, layer, x, state, tape=None):
    """One LSTM cell step; x is (B, in) or (in,), state is (h, c).

    Gate layout in the fused weight matrix is [input | forget | output |
    candidate]; input/forget/output gates are sigmoid, the candidate is
    tanh.  Appends the activation cache to ``tape`` when given.
    """
    W = params[f"lstm{layer}_W"]
    b = params[f"lstm{layer}_b"]
    h_prev, c_prev = state
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        h_prev = h_prev[None, :]
        c_prev = c_prev[None, :]
    hidden = h_prev.shape[1]
    n_in = x.shape[1]
    if n_in + hidden != W.shape[0]:
        raise ValueError(
            f"layer {layer} expects input of size {W.shape[0] - hidden}, "
            f"got {n_in}")
    B = x.shape[0]
    X = np.empty((B, n_in + hidden))
    X[:, :n_in] = x
    X[:, n_in:] = h_prev
    A = X @ W
    A += b
    # one sigmoid over a contiguous copy of the [i, f, o] block; strided
    # in-place ufuncs on the wide view are measurably slower
    S = np.ascontiguousarray(A[:, :3 * hidden])
    with np.errstate(over="ignore"):
        np.negative(S, out=S)
        np.exp(S, out=S)
        S += 1.0
        np.reciprocal(S, out=S)
    g = np.tanh(A[:, 3 * hidden:])
    i = S[:, :hidden]
    f = S[:, hidden:2 * hidden]
    o = S[:, 2 * hidden:]
    c = f * c_prev
    c += i * g
    tc = np.tanh(c)
    h = o * tc
    if tape is not None:
        tape.append((layer, X, S, g, c_prev, tc))
    if squeeze:
        return h[0], (h[0], c[0])
    return h, (h, c)


def lstm_step_backward(params, cache, dh, dc):
    """Backward through one recorded step; accumulates into params.grads.

    Returns (dx, dh_prev, dc_prev).
    """
    layer, X, S, g, c_prev, tc = cache
    hidden = tc.shape[1]
    i = S[:, :hidden]
    f = S[:, hidden:2 * hidden]
    o = S[:, 2 * hidden:]
    # dc_total = dc + dh * o * (1 - tc^2)
    t1 = tc * tc
    np.subtract(1.0, t1, out=t1)
    t1 *= o
    t1 *= dh
    dc_total = t1
    dc_total += dc
    dS = np.subtract(1.0, S)
    dS *= S                       # sigmoid' for all three gates at once
    di = dS[:, :hidden]
    df = dS[:, hidden:2 * hidden]
    do = dS[:, 2 * hidden:]
    t2 = dc_total * g
    di *= t2
    np.multiply(dc_total, c_prev, out=t2)
    df *= t2
    np.multiply(dh, tc, out=t2)
    do *= t2
    np.multiply(g, g, out=t2)
    np.subtract(1.0, t2, out=t2)
    t2 *= dc_total
    t2 *= i
    dg = t2
    dc_prev = dc_total
    dc_prev *= f
    dG = np.hstack([dS, dg])
    W = params[f"lstm{layer}_W"]
    params.grads[f"lstm{layer}_W"] += X.T @ dG
    params.grads[f"lstm{layer}_b"] += dG.sum(axis=0)
    dX = dG @ W.T
    n_in = X.shape[1] - hidden
    return dX[:, :n_in], dX[:, n_in:], dc_prev


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_nll(logits, target):
    """Negative log-softmax at the target index, numerically stable."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[-1]:
        raise IndexError(f"target {target} out of range for {logits.shape[-1]} logits")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[target])


def softmax_nll_batch(logits, targets):
    """Per-row NLL and the probability cache for the backward pass."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    sums = e.sum(axis=1)
    probs = e / sums[:, None]
    rows = np.arange(len(targets))
    losses = (m[:, 0] + np.log(sums)) - logits[rows, targets]
    return losses, probs


def nll_backward(probs, targets, weights=None):
    """dloss/dlogits for rows of softmax_nll_batch; weights scale each row."""
    dlogits = probs.copy()
    rows = np.arange(len(targets))
    dlogits[rows, targets] -= 1.0
    if weights is not None:
        dlogits *= weights[:, None]
    return dlogits


def adam_step(params, lr=0.001, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
              eps_adam=ADAM_EPS, t=None):
    """Standard Adam update with bias correction, in place."""
    params.check_finite("gradients")
    if t is None:
        params.adam_t += 1
        t = params.adam_t
    else:
        params.adam_t = t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    scale = lr / bc1
    inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
    for name in params.names:
        g = params.grads[name]
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        t1 = g * (1.0 - beta1)
        m += t1
        v *= beta2
        np.multiply(g, g, out=t1)
        t1 *= 1.0 - beta2
        v += t1
        np.sqrt(v, out=t1)
        t1 *= inv_sqrt_bc2
        t1 += eps_adam
        np.divide(m, t1, out=t1)
        t1 *= scale
        params.values[name] -= t1
    params.check_finite("parameters")
    return params


def grad_check(loss_fn, params, samples=200, step=1e-5, rng=None,
               denom_floor=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must zero the gradient buffers, run a
    deterministic forward/backward, and return the scalar loss.  A random
    subset of ``samples`` coordinates is probed.  The relative-error
    denominator is floored at ``denom_floor`` so coordinates whose true
    gradient is far below the finite-difference noise floor are compared
    on an absolute scale instead of drowning the check in round-off.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    analytic_loss = loss_fn(params)
    if not np.isfinite(analytic_loss):
        raise NonFiniteError("loss is not finite")
    analytic = {name: params.grads[name].copy() for name in params.names}

    total = params.n_params()
    n = min(samples, total)
    coords = rng.choice(total, size=n, replace=False)
    worst = 0.0
    for flat in coords:
        name, off = params.coord_location(int(flat))
        values = params.values[name].ravel()
        orig = values[off]
        values[off] = orig + step
        loss_plus = loss_fn(params)
        values[off] = orig - step
        loss_minus = loss_fn(params)
        values[off] = orig
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        a = analytic[name].ravel()[off]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
        worst = max(worst, rel)
    loss_fn(params)       # restore gradient buffers to the unperturbed state
    return worst


def save_checkpoint(path, params, config, include_optimizer=False):
    """Binary checkpoint: header, config JSON, parameters as f64 LE."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params.names)))
        for name in params.names:
            arr = params.values[name]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())
        fh.write(struct.pack("<B", 1 if include_optimizer else 0))
        if include_optimizer:
            fh.write(struct.pack("<Q", params.adam_t))
            for name in params.names:
                fh.write(params.adam_m[name].astype("<f8").tobytes())
                fh.write(params.adam_v[name].astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (ParameterSet, config dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = json.loads(fh.read(blob_len).decode("utf-8"))
        (n_names,) = struct.unpack("<I", fh.read(4))
        params = ParameterSet()
        for _ in range(n_names):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params.add(name, arr.copy())
        (has_opt,) = struct.unpack("<B", fh.read(1))
        if has_opt:
            (params.adam_t,) = struct.unpack("<Q", fh.read(8))
            for name in params.names:
                size = params.values[name].size
                shape = params.values[name].shape
                params.adam_m[name] = np.frombuffer(
                    fh.read(8 * size), dtype="<f8").reshape(shape).copy()
                params.adam_v[name] = np.frombuffer(
                    fh.read(8 * size), dtype="<f8").reshape(shape).copy()
    return params, config
