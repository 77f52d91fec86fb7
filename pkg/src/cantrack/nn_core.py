"""Small feed-forward engine for the EvalNet scorer.

Four fully connected layers; the first three are followed by batch norm and
ReLU, the last one emits a single logit per row.  Everything is float64 numpy
so the gradient checks can be tight.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, MutableMapping

import numpy as np

from cantrack.errors import ContractError, DomainError, ShapeError

DEFAULT_HIDDEN = (256, 128, 64)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

GradientSet = dict[str, np.ndarray]


@dataclass
class LayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray

    def __post_init__(self):
        out, _ = self.weight.shape
        for name in ("bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            if getattr(self, name).shape != (out,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected ({out},)")
        if np.any(self.bn_running_var < 0):
            raise ShapeError("bn_running_var must be non-negative")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "LayerParams":
        return cls(
            weight=np.zeros((n_out, n_in)),
            bias=np.zeros(n_out),
            bn_gamma=np.ones(n_out),
            bn_beta=np.zeros(n_out),
            bn_running_mean=np.zeros(n_out),
            bn_running_var=np.ones(n_out),
        )

    def copy(self) -> "LayerParams":
        return LayerParams(*(a.copy() for a in (
            self.weight, self.bias, self.bn_gamma, self.bn_beta,
            self.bn_running_mean, self.bn_running_var,
        )))


@dataclass
class MlpParams:
    layers: list[LayerParams]
    eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if len(self.layers) != 4:
            raise ShapeError(f"EvalNet needs exactly 4 layers, got {len(self.layers)}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].out_dim != 1:
            raise ShapeError("final layer must output a single logit")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    def trainable(self) -> dict[str, np.ndarray]:
        """Named views of the trainable arrays (mutating them mutates the net).

        Affine biases are frozen at zero and not listed: in layers 1-3 batch
        norm's beta absorbs them, and the final logit only ever enters a
        softmax, which is shift invariant.
        """
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"l{i}.weight"] = layer.weight
            if i < 3:
                out[f"l{i}.bn_gamma"] = layer.bn_gamma
                out[f"l{i}.bn_beta"] = layer.bn_beta
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([layer.copy() for layer in self.layers], self.eps, self.bn_momentum)


def init_mlp(in_dim: int, hidden: tuple[int, ...] = DEFAULT_HIDDEN,
             seed: int | np.random.Generator = 0) -> MlpParams:
    """Glorot-uniform weights, zero biases, unit gamma, zero beta."""
    if len(hidden) != 3:
        raise ShapeError("EvalNet has three hidden layers")
    rng = np.random.default_rng(seed)
    dims = [in_dim, *hidden, 1]
    layers = []
    for n_in, n_out in zip(dims, dims[1:]):
        layer = LayerParams.zeros(n_in, n_out)
        limit = np.sqrt(6.0 / (n_in + n_out))
        layer.weight[...] = rng.uniform(-limit, limit, size=(n_out, n_in))
        layers.append(layer)
    return MlpParams(layers)


def affine(x: np.ndarray, layer: LayerParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not fit a layer expecting width {layer.in_dim}")
    return x @ layer.weight.T + layer.bias


def _bn_forward(X, layer, mode, eps):
    n = X.shape[0]
    if n < 1:
        raise ShapeError("batch norm needs at least one row")
    use_batch = mode == "train" and n >= 2
    if use_batch:
        mean = X.mean(axis=0)
        var = X.var(axis=0)
    else:
        mean = layer.bn_running_mean
        var = layer.bn_running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (X - mean) * inv_std
    out = layer.bn_gamma * xhat + layer.bn_beta
    return out, (xhat, inv_std, use_batch, mean, var)


def batch_norm(X: np.ndarray, layer: LayerParams, mode: str = "train", eps: float = BN_EPS) -> np.ndarray:
    """Normalize columns by batch statistics (train) or running statistics (infer).

    A train-mode batch of a single row falls back to the running statistics.
    Running statistics are not touched here; see :func:`update_running_stats`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layer.out_dim:
        raise ShapeError(f"batch norm expects width {layer.out_dim}, got {X.shape}")
    _check_mode(mode)
    return _bn_forward(X, layer, mode, eps)[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_normalize(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def segment_softmax(logits: np.ndarray, segments: np.ndarray, n_segments: int) -> np.ndarray:
    """Softmax computed independently inside each segment id."""
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, segments, logits)
    e = np.exp(logits - seg_max[segments])
    seg_sum = np.bincount(segments, weights=e, minlength=n_segments)
    return e / seg_sum[segments]


@dataclass
class ForwardCache:
    params_id: int
    mode: str
    dims: list[int]
    inputs: list[np.ndarray] = field(default_factory=list)  # input of each affine
    bn: list[tuple] = field(default_factory=list)
    pre_relu: list[np.ndarray] = field(default_factory=list)


def _check_mode(mode):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def mlp_forward(params: MlpParams, X: np.ndarray, mode: str = "infer") -> tuple[np.ndarray, ForwardCache]:
    """Run the 4-layer net; returns one logit per row plus a cache for :func:`backprop`."""
    _check_mode(mode)
    h = np.asarray(X, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.layers[0].in_dim:
        raise ShapeError(f"input of shape {h.shape} does not match EvalNet input width {params.layers[0].in_dim}")
    cache = ForwardCache(id(params), mode, params.dims)
    for i, layer in enumerate(params.layers):
        cache.inputs.append(h)
        a = affine(h, layer)
        if i == 3:
            return a[:, 0], cache
        bn_out, bn_cache = _bn_forward(a, layer, mode, params.eps)
        cache.bn.append(bn_cache)
        cache.pre_relu.append(bn_out)
        h = relu(bn_out)
    raise AssertionError("unreachable")


def update_running_stats(params: MlpParams, cache: ForwardCache) -> None:
    """Fold the batch statistics recorded in a train-mode cache into the running averages."""
    if cache.params_id != id(params) or cache.mode != "train":
        raise ContractError("running statistics can only be updated from a train-mode cache of these params")
    m = params.bn_momentum
    for layer, (_, _, use_batch, mean, var) in zip(params.layers, cache.bn):
        if not use_batch:
            continue
        layer.bn_running_mean *= 1.0 - m
        layer.bn_running_mean += m * mean
        layer.bn_running_var *= 1.0 - m
        layer.bn_running_var += m * var


def backprop(params: MlpParams, cache: ForwardCache, upstream: np.ndarray) -> GradientSet:
    """Reverse-mode gradients of a scalar loss given dloss/dlogits.

    Returns a dict keyed like :meth:`MlpParams.trainable`, plus ``"input"``.
    """
    if cache.params_id != id(params) or cache.dims != params.dims:
        raise ContractError("cache was produced by a different parameter set")
    if cache.mode != "train":
        raise ContractError("backprop needs a train-mode forward cache")
    g = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
    if g.shape[0] != cache.inputs[0].shape[0]:
        raise ContractError(f"upstream has {g.shape[0]} rows, forward pass had {cache.inputs[0].shape[0]}")

    grads: GradientSet = {}
    for i in range(3, -1, -1):
        layer = params.layers[i]
        if i < 3:
            g = g * (cache.pre_relu[i] > 0)
            xhat, inv_std, use_batch, _, _ = cache.bn[i]
            grads[f"l{i}.bn_gamma"] = (g * xhat).sum(axis=0)
            grads[f"l{i}.bn_beta"] = g.sum(axis=0)
            dxhat = g * layer.bn_gamma
            if use_batch:
                n = g.shape[0]
                g = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * inv_std
        x_in = cache.inputs[i]
        grads[f"l{i}.weight"] = g.T @ x_in
        grads[f"l{i}.bias"] = g.sum(axis=0)
        g = g @ layer.weight
    grads["input"] = g
    return grads


def activation_pattern(cache: ForwardCache) -> bytes:
    """Which ReLUs were active in a forward pass; changes exactly when a kink is crossed."""
    return b"".join(np.packbits(h > 0).tobytes() for h in cache.pre_relu)


@dataclass
class FiniteDifferenceReport:
    max_rel_error: float
    checked: int = 0
    refined: int = 0  # coordinates re-checked with a smaller step because the stencil crossed a ReLU kink
    skipped: int = 0  # coordinates sitting on a kink even at the smallest step
    worst_param: str = ""


def _eval(loss_fn, params):
    out = loss_fn(params)
    if isinstance(out, tuple):
        return float(out[0]), out[1]
    return float(out), None


def finite_difference_report(params: Mapping[str, np.ndarray],
                             loss_fn: Callable[[Mapping[str, np.ndarray]], float | tuple[float, bytes]],
                             grads: Mapping[str, np.ndarray],
                             step: float = 1e-4, min_step: float = 1e-7) -> FiniteDifferenceReport:
    """Compare analytic ``grads`` against central differences, entry by entry.

    Every entry of every array in ``params`` is perturbed in place by +-step and
    restored.  Relative error is |a - n| / max(1e-8, |a| + |n|).

    ``loss_fn`` may return ``(loss, activation_pattern)``.  When the pattern at
    +-step differs from the unperturbed one the stencil straddles a ReLU kink,
    where a central difference does not estimate the derivative; the entry is
    then re-checked with the step divided by 10 until the stencil is kink-free
    or ``min_step`` is reached (then it is counted as skipped).
    """
    if step <= 0:
        raise DomainError("step must be positive")
    report = FiniteDifferenceReport(0.0)
    _, base_sig = _eval(loss_fn, params)
    for name, arr in params.items():
        analytic = np.asarray(grads[name])
        if analytic.shape != arr.shape:
            raise ContractError(f"gradient for {name} has shape {analytic.shape}, parameter has {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ContractError(f"parameter {name} is not contiguous")
        a_flat = analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            h = step
            while True:
                flat[k] = orig + h
                up, sig_up = _eval(loss_fn, params)
                flat[k] = orig - h
                down, sig_down = _eval(loss_fn, params)
                flat[k] = orig
                if base_sig is None or (sig_up == base_sig and sig_down == base_sig):
                    break
                h /= 10.0
                if h < min_step:
                    h = None
                    break
            if h is None:
                report.skipped += 1
                continue
            if h != step:
                report.refined += 1
            report.checked += 1
            if not (np.isfinite(up) and np.isfinite(down)):
                report.max_rel_error = float("inf")
                report.worst_param = f"{name}[{k}]"
                return report
            numeric = (up - down) / (2 * h)
            a = a_flat[k]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > report.max_rel_error:
                report.max_rel_error = float(rel)
                report.worst_param = f"{name}[{k}]"
    return report


def finite_difference_check(params: Mapping[str, np.ndarray],
                            loss_fn: Callable[[Mapping[str, np.ndarray]], float | tuple[float, bytes]],
                            grads: Mapping[str, np.ndarray],
                            step: float = 1e-4) -> float:
    """Max relative error of ``grads`` against central differences; see :func:`finite_difference_report`."""
    return finite_difference_report(params, loss_fn, grads, step).max_rel_error


def sgd_momentum_step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      lr: float, momentum: float,
                      velocity: MutableMapping[str, np.ndarray] | None = None):
    """v <- momentum*v - lr*g ; theta <- theta + v, applied in place.

    Returns ``(params, velocity)``; a missing velocity starts at zero.
    """
    if lr < 0:
        raise DomainError("learning rate must be non-negative")
    if not 0 <= momentum < 1:
        raise DomainError("momentum must lie in [0, 1)")
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
    for name, theta in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ContractError(f"shape mismatch for {name}")
        v *= momentum
        v -= lr * g
        theta += v
    return params, velocity
