"""Small dense Q-network with hand-written backprop, optimizers and a gradient checker."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

N_OUTPUTS = 7


class NonFiniteError(FloatingPointError):
    """Raised when a parameter, output or gradient stops being finite."""


def _relu(z):
    return np.maximum(z, 0.0)


class Mlp:
    """ReLU hidden layers, identity output; ``z = a @ W + b`` with ``W`` of shape (fan_in, fan_out)."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("consecutive layers do not chain")
        if self.weights[-1].shape[1] != N_OUTPUTS:
            raise ValueError(f"output layer must have {N_OUTPUTS} units")

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, scale: float | None = None) -> "Mlp":
        """Glorot-uniform weights, zero biases. ``scale`` overrides the uniform half-width."""
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if sizes[-1] != N_OUTPUTS:
            raise ValueError(f"last layer size must be {N_OUTPUTS}, got {sizes[-1]}")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be positive")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out)) if scale is None else scale
            weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)) if s > 0 else np.zeros((fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def load_from(self, other: "Mlp") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def check_finite(self) -> None:
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise NonFiniteError("network parameters contain NaN or Inf")

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected input of width {self.layer_sizes[0]}, got shape {x.shape}")
        return x, single

    def _forward_cache(self, x: np.ndarray):
        acts = [x]
        zs = []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            zs.append(z)
            a = z if i == last else _relu(z)
            acts.append(a)
        return a, zs, acts

    def forward(self, x) -> np.ndarray:
        x, single = self._as_batch(x)
        q = self._forward_cache(x)[0]
        if not np.all(np.isfinite(q)):
            raise NonFiniteError("forward pass produced non-finite Q-values")
        return q[0] if single else q

    def backward(
        self, x, target, mask, loss: str = "mse", huber_delta: float = 1.0, sample_weight=None
    ):
        """Gradients of the TD loss on the masked action, averaged over the batch.

        Per sample the loss is ``0.5 * (target[a] - q[a])**2`` (or Huber) where
        ``mask`` is one-hot on ``a``; ``sample_weight`` scales each sample's
        term. Returns ``(grads, loss_value)`` with ``grads`` aligned to ``params()``.
        """
        x, _ = self._as_batch(x)
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
        n = x.shape[0]
        if target.shape != (n, N_OUTPUTS) or mask.shape != (n, N_OUTPUTS):
            raise ValueError("target and mask must have shape (batch, 7)")
        if not np.all(mask.sum(axis=1) == 1) or not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must select exactly one action per sample")

        sw = np.ones((n, 1)) if sample_weight is None else np.asarray(sample_weight, float).reshape(n, 1)

        q, zs, acts = self._forward_cache(x)
        err = (q - target) * mask
        if loss == "mse":
            value = 0.5 * np.sum(sw * err * err) / n
            dq = sw * err / n
        elif loss == "huber":
            abs_err = np.abs(err)
            quad = np.minimum(abs_err, huber_delta)
            value = np.sum(sw * (0.5 * quad * quad + huber_delta * (abs_err - quad))) / n
            dq = sw * np.clip(err, -huber_delta, huber_delta) / n
        else:
            raise ValueError(f"unknown loss {loss!r}")

        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = dq
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (zs[i - 1] > 0)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads += [gw, gb]
        return grads, float(value)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError("optimizer kind must be 'adam' or 'sgd'")


def apply_gradients(mlp: Mlp, opt: OptimizerState, grads, max_grad_norm: float | None = None) -> Mlp:
    """One in-place optimizer step; returns ``mlp`` for chaining."""
    params = mlp.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteError("non-finite gradient")
    if max_grad_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > max_grad_norm:
            grads = [g * (max_grad_norm / norm) for g in grads]

    opt.step += 1
    if opt.kind == "sgd":
        for p, g in zip(params, grads):
            p -= opt.lr * g
    else:
        if not opt.m:
            opt.m = [np.zeros_like(p) for p in params]
            opt.v = [np.zeros_like(p) for p in params]
        b1, b2 = opt.beta1, opt.beta2
        corr1 = 1.0 - b1**opt.step
        corr2 = 1.0 - b2**opt.step
        for p, g, m, v in zip(params, grads, opt.m, opt.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= opt.lr * (m / corr1) / (np.sqrt(v / corr2) + opt.eps)
    mlp.check_finite()
    return mlp


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    n_kinks: int


def _continue_from(mlp: Mlp, layer: int, z: np.ndarray, target, mask):
    """Per-row loss when ``z`` is the pre-activation of ``layer``; also the ReLU sign pattern."""
    signs = []
    last = len(mlp.weights) - 1
    for i in range(layer, last):
        signs.append(z > 0)
        z = _relu(z) @ mlp.weights[i + 1] + mlp.biases[i + 1]
    err = (z - target) * mask
    pattern = np.concatenate(signs, axis=1) if signs else np.zeros((len(z), 0), dtype=bool)
    return 0.5 * np.sum(err * err, axis=1), pattern


def _central_difference_ld(mlp: Mlp, x, target, mask, layer: int, kind: str, idx, h: float):
    """One central difference with the whole forward pass in ``np.longdouble``."""
    ld = np.longdouble
    weights = [w.astype(ld) for w in mlp.weights]
    biases = [b.astype(ld) for b in mlp.biases]
    param = weights[layer] if kind == "w" else biases[layer]
    base = param[idx]
    losses, patterns = [], []
    for delta in (ld(h), -ld(h)):
        param[idx] = base + delta
        a = x.astype(ld)
        signs = []
        for i, (w, b) in enumerate(zip(weights, biases)):
            z = a @ w + b
            if i < len(weights) - 1:
                signs.append(z > 0)
                a = np.maximum(z, 0)
        err = (z - target.astype(ld)) * mask.astype(ld)
        losses.append(ld(0.5) * np.sum(err * err))
        patterns.append(np.concatenate(signs) if signs else np.zeros(0, dtype=bool))
    param[idx] = base
    value = (losses[0] - losses[1]) / (ld(2) * ld(h))
    return float(value), bool(np.array_equal(patterns[0], patterns[1]))


def gradient_check_details(
    mlp: Mlp, x, target, mask, grads=None, h: float = 1e-5, floor: float = 1e-7, chunk: int = 8192,
    refine_above: float = 1e-6, max_refine: int = 64,
) -> GradCheck:
    """Compare analytic gradients with central differences over every parameter.

    Each perturbed loss is computed by re-running the network from the layer the
    parameter feeds, with all perturbations of one layer stacked as a batch.
    Weights whose incoming activation is exactly zero leave every downstream
    value bit-identical, so their central difference is exactly zero and they
    are not re-evaluated. Coordinates where the +h and -h evaluations sit on
    different sides of a ReLU kink are excluded and counted. Coordinates that
    disagree by more than ``refine_above`` (the worst ``max_refine`` per tensor)
    are re-evaluated with the same central difference in extended precision,
    since float64 rounding of a tiny perturbation can dominate there.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    mask = np.asarray(mask, dtype=np.float64).ravel()
    if grads is None:
        grads, _ = mlp.backward(x, target, mask)
    _, zs, acts = mlp._forward_cache(x[None, :])

    worst = 0.0
    checked = 0
    kinks = 0

    def compare(analytic: np.ndarray, numeric: np.ndarray) -> float:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0

    for layer, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        fan_in, fan_out = w.shape
        z0 = zs[layer][0]
        a_in = acts[layer][0]
        gw = grads[2 * layer]
        gb = grads[2 * layer + 1]

        # weights: perturbing W[i, j] moves z[j] by h * a_in[i]
        nz = np.flatnonzero(a_in != 0.0)
        numeric_w = np.zeros_like(w)
        pairs_i = np.repeat(nz, fan_out)
        pairs_j = np.tile(np.arange(fan_out), len(nz))
        # bias: perturbing b[j] moves z[j] by h
        items = [
            (pairs_i, pairs_j, a_in[pairs_i], "w"),
            (np.zeros(fan_out, dtype=np.int64), np.arange(fan_out), np.ones(fan_out), "b"),
        ]
        numeric_b = np.zeros_like(b)
        ok_w = np.ones_like(w, dtype=bool)
        ok_b = np.ones_like(b, dtype=bool)
        for rows_i, cols_j, scale, kind in items:
            for start in range(0, len(cols_j), chunk):
                ci = rows_i[start:start + chunk]
                cj = cols_j[start:start + chunk]
                sc = scale[start:start + chunk]
                r = np.arange(len(cj))
                zp = np.repeat(z0[None, :], len(cj), axis=0)
                zm = zp.copy()
                # perturb the parameter itself, then recompute its pre-activation column
                if kind == "w":
                    wp = w[ci, cj] + h
                    wm = w[ci, cj] - h
                    zp[r, cj] = z0[cj] + (wp - w[ci, cj]) * sc
                    zm[r, cj] = z0[cj] + (wm - w[ci, cj]) * sc
                else:
                    zp[r, cj] = z0[cj] + ((b[cj] + h) - b[cj])
                    zm[r, cj] = z0[cj] + ((b[cj] - h) - b[cj])
                lp, sp = _continue_from(mlp, layer, zp, target, mask)
                lm, sm = _continue_from(mlp, layer, zm, target, mask)
                if kind == "w":
                    step = (w[ci, cj] + h) - (w[ci, cj] - h)
                    numeric_w[ci, cj] = (lp - lm) / step
                    ok_w[ci, cj] = np.all(sp == sm, axis=1)
                else:
                    step = (b[cj] + h) - (b[cj] - h)
                    numeric_b[cj] = (lp - lm) / step
                    ok_b[cj] = np.all(sp == sm, axis=1)
        for numeric, analytic, ok, kind in ((numeric_w, gw, ok_w, "w"), (numeric_b, gb, ok_b, "b")):
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            rel = np.where(ok, np.abs(analytic - numeric) / denom, 0.0)
            worst_first = np.argsort(rel, axis=None)[::-1][:max_refine]
            for flat in worst_first[rel.ravel()[worst_first] > refine_above]:
                idx = np.unravel_index(flat, rel.shape)
                value, same_side = _central_difference_ld(mlp, x, target, mask, layer, kind, idx, h)
                numeric[idx] = value
                ok[idx] = same_side
        kinks += int((~ok_w).sum() + (~ok_b).sum())
        checked += int(ok_w.sum() + ok_b.sum())
        worst = max(worst, compare(gw[ok_w], numeric_w[ok_w]), compare(gb[ok_b], numeric_b[ok_b]))
    return GradCheck(worst, checked, kinks)


def gradient_check(mlp: Mlp, x, target, mask, grads=None, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    return gradient_check_details(mlp, x, target, mask, grads=grads, h=h).max_rel_error
