"""Minimal numpy MLPs with analytic gradients.

Everything downstream (critics, actors, projectors) runs on the same
substrate: fixed-topology fully connected nets, explicit backward passes,
Adam with global-norm gradient clipping, and polyak-averaged target
copies.  Inputs may be single vectors ``(in,)`` or batches ``(B, in)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return expit(z)
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "sigmoid":
        s = expit(z)
        return s * (1.0 - s)
    return np.ones_like(z)


class Mlp:
    """Fully connected net with ``activation`` on hidden layers and
    ``output_activation`` on the last layer (identity by default)."""

    def __init__(self, layer_sizes, activation="relu",
                 output_activation="identity", seed=0):
        if len(layer_sizes) < 2:
            raise ValueError(f"need at least two layer sizes, got {layer_sizes}")
        if activation not in ACTIVATIONS or output_activation not in ACTIVATIONS:
            raise ValueError(f"activations must be one of {ACTIVATIONS}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        self.output_activation = output_activation
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        gain = 2.0 if activation == "relu" else 1.0
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            scale = np.sqrt(gain / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def _layer_act(self, idx: int) -> str:
        return (self.activation if idx < len(self.weights) - 1
                else self.output_activation)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping pre-activations for ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x.reshape(1, -1) if squeeze else x
        if a.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {a.shape[1]}")
        pre = []
        acts = [a]
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre.append(z)
            a = _act(self._layer_act(idx), z)
            acts.append(a)
        y = acts[-1][0] if squeeze else acts[-1]
        return y, {"pre": pre, "acts": acts, "squeeze": squeeze}

    def backward(self, cache, upstream: np.ndarray):
        """Backpropagate ``upstream`` (dL/dy) through a cached forward pass.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` lines up
        with :meth:`params` and gradients are summed over the batch.
        """
        upstream = np.asarray(upstream, dtype=np.float64)
        if cache["squeeze"]:
            upstream = upstream.reshape(1, -1)
        pre, acts = cache["pre"], cache["acts"]
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = upstream * _act_grad(self._layer_act(len(pre) - 1), pre[-1])
        for idx in range(len(self.weights) - 1, -1, -1):
            grads_w[idx] = delta.T @ acts[idx]
            grads_b[idx] = delta.sum(axis=0)
            delta = delta @ self.weights[idx]
            if idx > 0:
                delta = delta * _act_grad(self._layer_act(idx - 1), pre[idx - 1])
        input_grad = delta[0] if cache["squeeze"] else delta
        param_grads = []
        for gw, gb in zip(grads_w, grads_b):
            param_grads.append(gw)
            param_grads.append(gb)
        return param_grads, input_grad

    def copy(self) -> "Mlp":
        dup = Mlp(self.layer_sizes, self.activation, self.output_activation,
                  seed=self.seed)
        dup.load_params([p.copy() for p in self.params()])
        return dup

    def load_params(self, params):
        own = self.params()
        if len(params) != len(own):
            raise ValueError(f"expected {len(own)} arrays, got {len(params)}")
        for dst, src in zip(own, params):
            src = np.asarray(src, dtype=np.float64)
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch: {dst.shape} vs {src.shape}")
            dst[...] = src

    def state_arrays(self, prefix="") -> dict:
        out = {}
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{idx}"] = w
            out[f"{prefix}b{idx}"] = b
        return out

    def spec(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "activation": self.activation,
                "output_activation": self.output_activation, "seed": self.seed}

    @classmethod
    def from_spec(cls, spec: dict) -> "Mlp":
        return cls(spec["layer_sizes"], spec["activation"],
                   spec["output_activation"], seed=spec["seed"])


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    """Scale ``grads`` in place so their joint norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm


def opt_step(params, grads, opt: AdamState, max_grad_norm: float = 0.5):
    """One clipped Adam update, mutating ``params`` in place.

    Rejects non-finite gradients before touching any parameter so a bad
    batch cannot poison the nets.
    """
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("params, grads and optimizer state must line up")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient rejected")
    grads = [np.asarray(g, dtype=np.float64).copy() for g in grads]
    clip_by_global_norm(grads, max_grad_norm)
    opt.t += 1
    b1t = 1.0 - opt.beta1 ** opt.t
    b2t = 1.0 - opt.beta2 ** opt.t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / b1t) / (np.sqrt(v / b2t) + opt.eps)
    return params


def soft_update(target: Mlp, online: Mlp, tau: float):
    """Polyak update ``target <- (1 - tau) * target + tau * online``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    t_params, o_params = target.params(), online.params()
    if len(t_params) != len(o_params):
        raise ValueError("target and online nets have different layouts")
    for t, o in zip(t_params, o_params):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch in soft_update: {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o


def numeric_gradient(fn, arrays, h: float = 1e-5):
    """Central finite differences of scalar ``fn`` w.r.t. each array entry.

    ``fn`` takes no arguments and reads ``arrays`` by reference; entries are
    perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Worst-case elementwise relative disagreement between gradient lists."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(net: Mlp, x: np.ndarray, upstream: np.ndarray,
                    h: float = 1e-5) -> float:
    """Compare analytic parameter gradients of ``sum(upstream * net(x))``
    against central differences; returns the max relative error."""
    upstream = np.asarray(upstream, dtype=np.float64)

    def objective():
        return float(np.sum(upstream * net.forward(x)))

    _, cache = net.forward_cached(x)
    analytic, _ = net.backward(cache, upstream)
    numeric = numeric_gradient(objective, net.params(), h=h)
    return max_relative_error(analytic, numeric)


CHECKPOINT_MAGIC = b"CYDOCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named float64 arrays plus JSON metadata.

    Layout (all integers little-endian): 8-byte magic, u32 version, u32
    header length, JSON header listing array names and shapes in order,
    then raw little-endian float64 bytes per array.  Round-trips
    bit-exactly across platforms.
    """
    names = list(arrays.keys())
    header = {
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)}
                   for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(arrays, meta)``.
    """
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        hlen = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            arrays[entry["name"]] = data.reshape(shape).astype(np.float64)
    return arrays, header["meta"]
