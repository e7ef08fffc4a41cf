"""Dense networks in plain numpy: MLPs with hand-written backprop, Adam,
layer normalization, exact GELU and Polyak target copies.

Everything is float64. Inputs may be a single vector of shape ``(d,)`` or a
batch of shape ``(n, d)``; outputs keep the same rank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

FORMAT_VERSION = 1
LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass
class Mlp:
    """Feed-forward net. Layer ``i`` maps ``widths[i] -> widths[i+1]``.

    Per layer: affine, then (optionally) layer norm, then activation.
    Parameters live in ``params`` under keys ``W{i}``, ``b{i}`` and, for
    normalized layers, ``ln_g{i}`` / ``ln_b{i}``.
    """

    widths: list[int]
    activations: list[str]
    layer_norm: list[bool]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n_layers = len(self.widths) - 1
        if n_layers < 1 or any(int(w) < 1 for w in self.widths):
            raise ShapeError(f"bad layer widths {self.widths}")
        if len(self.activations) != n_layers or len(self.layer_norm) != n_layers:
            raise ShapeError("need one activation and one layer-norm flag per layer")
        for act in self.activations:
            if act not in ("gelu", "identity"):
                raise ValueError(f"unknown activation {act!r}")
        for i in range(n_layers):
            w = self.params.get(f"W{i}")
            if w is not None and w.shape != (self.widths[i], self.widths[i + 1]):
                raise ShapeError(f"W{i} has shape {w.shape}, widths say "
                                 f"{(self.widths[i], self.widths[i + 1])}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Mlp":
        return Mlp(list(self.widths), list(self.activations), list(self.layer_norm),
                   {k: v.copy() for k, v in self.params.items()})


def init_mlp(widths, rng: np.random.Generator, layer_norm: bool = True,
             activation: str = "gelu") -> Mlp:
    """Hidden layers get ``activation`` (+ layer norm); the last layer is linear.

    Weights are Glorot-uniform, biases zero, layer-norm gains one.
    """
    widths = [int(w) for w in widths]
    n = len(widths) - 1
    acts = [activation] * (n - 1) + ["identity"]
    lns = [layer_norm] * (n - 1) + [False]
    params = {}
    for i in range(n):
        fan_in, fan_out = widths[i], widths[i + 1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
        if lns[i]:
            params[f"ln_g{i}"] = np.ones(fan_out)
            params[f"ln_b{i}"] = np.zeros(fan_out)
    return Mlp(widths, acts, lns, params)


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input width {net.in_dim}")
    return x, single


def forward_cache(net: Mlp, x: np.ndarray, params=None):
    """Batched forward pass keeping what backprop needs. ``x`` must be 2-D."""
    p = net.params if params is None else params
    cache = []
    h = x
    for i in range(net.n_layers):
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        entry = {"h_in": h}
        if net.layer_norm[i]:
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            zhat = (z - mu) * inv_std
            entry["zhat"] = zhat
            entry["inv_std"] = inv_std
            z = zhat * p[f"ln_g{i}"] + p[f"ln_b{i}"]
        entry["pre"] = z
        if net.activations[i] == "gelu":
            cdf = 0.5 * (1.0 + erf(z / _SQRT2))
            entry["cdf"] = cdf
            h = z * cdf
        else:
            h = z
        cache.append(entry)
    return h, cache


def backward_cache(net: Mlp, cache, dout: np.ndarray, params=None,
                   need_input_grad: bool = True):
    """Backprop ``dout`` (d loss / d output, batched) through a cached pass."""
    p = net.params if params is None else params
    grads = {}
    g = dout
    for i in reversed(range(net.n_layers)):
        entry = cache[i]
        if net.activations[i] == "gelu":
            z = entry["pre"]
            g = g * (entry["cdf"] + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z))
        if net.layer_norm[i]:
            zhat = entry["zhat"]
            grads[f"ln_g{i}"] = (g * zhat).sum(axis=0)
            grads[f"ln_b{i}"] = g.sum(axis=0)
            dzhat = g * p[f"ln_g{i}"]
            g = entry["inv_std"] * (dzhat - dzhat.mean(axis=1, keepdims=True)
                                    - zhat * (dzhat * zhat).mean(axis=1, keepdims=True))
        grads[f"W{i}"] = entry["h_in"].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ p[f"W{i}"].T
    return grads, (g if need_input_grad else None)


def forward(net: Mlp, x, params=None) -> np.ndarray:
    xb, single = _as_batch(net, x)
    out, _ = forward_cache(net, xb, params)
    return out[0] if single else out


def backward(net: Mlp, x, output_grad, params=None):
    """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input."""
    xb, single = _as_batch(net, x)
    dout = np.asarray(output_grad, dtype=np.float64)
    if single:
        dout = dout[None, :]
    if dout.shape != (xb.shape[0], net.out_dim):
        raise ShapeError(f"output_grad shape {np.shape(output_grad)} does not match "
                         f"output shape {(xb.shape[0], net.out_dim)}")
    _, cache = forward_cache(net, xb, params)
    grads, gin = backward_cache(net, cache, dout, params)
    return grads, (gin[0] if single else gin)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr=3e-4, **kw) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict, grads: dict, state: AdamState):
    """Bias-corrected Adam, in place. Returns ``(params, state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient {k!r} has shape {g.shape}, parameter {params[k].shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TargetCopy:
    params: dict[str, np.ndarray]
    rate: float = 0.005

    @classmethod
    def of(cls, net: Mlp, rate: float = 0.005) -> "TargetCopy":
        _check_rate(rate)
        return cls({k: v.copy() for k, v in net.params.items()}, rate)


def _check_rate(rate):
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"Polyak rate must lie in (0, 1], got {rate}")


def polyak_update(target: TargetCopy, source: Mlp, rate: float | None = None) -> TargetCopy:
    rate = target.rate if rate is None else rate
    _check_rate(rate)
    for k, src in source.params.items():
        shadow = target.params[k]
        if shadow.shape != src.shape:
            raise ShapeError(f"target {k!r} shape {shadow.shape} != source {src.shape}")
        if rate == 1.0:
            shadow[...] = src
        else:
            shadow *= 1.0 - rate
            shadow += rate * src
    return target


def add_grads(a: dict, b: dict, scale: float = 1.0) -> dict:
    out = {k: v.copy() for k, v in a.items()}
    for k, v in b.items():
        out[k] = out[k] + scale * v if k in out else scale * v
    return out


# -- checkpoints ------------------------------------------------------------

def _pack(arrays: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()}


def _unpack(blob: dict) -> dict:
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}


def mlp_to_dict(net: Mlp) -> dict:
    return {"widths": net.widths, "activations": net.activations,
            "layer_norm": net.layer_norm, "params": _pack(net.params)}


def mlp_from_dict(d: dict) -> Mlp:
    return Mlp(list(d["widths"]), list(d["activations"]), list(d["layer_norm"]),
               _unpack(d["params"]))


def adam_to_dict(state: AdamState) -> dict:
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step, "m": _pack(state.m), "v": _pack(state.v)}


def adam_from_dict(d: dict) -> AdamState:
    return AdamState(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"],
                     step=d["step"], m=_unpack(d["m"]), v=_unpack(d["v"]))


def save_checkpoint(path, nets: dict, adam: dict | None = None, extra: dict | None = None):
    """Write named networks (and optional Adam states) to one JSON document.

    ``nets`` maps a name to an :class:`Mlp`; ``adam`` maps the same names to
    :class:`AdamState`. Target copies are stored as plain parameter dicts via
    ``extra['targets']`` by callers that need them.
    """
    doc = {
        "format_version": FORMAT_VERSION,
        "nets": {k: mlp_to_dict(v) for k, v in nets.items()},
        "adam": {k: adam_to_dict(v) for k, v in (adam or {}).items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    nets = {k: mlp_from_dict(v) for k, v in doc["nets"].items()}
    adam = {k: adam_from_dict(v) for k, v in doc["adam"].items()}
    return nets, adam, doc["extra"]


def pack_arrays(arrays: dict) -> dict:
    return _pack(arrays)


def unpack_arrays(blob: dict) -> dict:
    return _unpack(blob)


# -- finite-difference checks -----------------------------------------------

@dataclass
class GradCheck:
    probes: int
    max_rel_error: float
    worst: tuple | None = None

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error <= tol


def gradient_check(loss_fn, params: dict, grads: dict, rng: np.random.Generator,
                   probes: int = 16, eps: float = 1e-6, floor: float = 1e-7) -> GradCheck:
    """Compare ``grads`` with central differences of ``loss_fn()`` at
    ``probes`` random parameter coordinates (perturbed in place, restored).

    Relative error is ``|g - fd| / max(|g| + |fd|, floor)``.
    """
    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys], dtype=np.float64)
    worst, worst_at = 0.0, None
    for _ in range(probes):
        k = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
        flat = params[k].reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn()
        flat[i] = old - eps
        down = loss_fn()
        flat[i] = old
        fd = (up - down) / (2 * eps)
        g = grads[k].reshape(-1)[i]
        rel = abs(g - fd) / max(abs(g) + abs(fd), floor)
        if rel > worst:
            worst, worst_at = rel, (k, i, float(g), float(fd))
    return GradCheck(probes, float(worst), worst_at)
