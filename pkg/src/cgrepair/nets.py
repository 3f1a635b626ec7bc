"""Small dense tanh networks over flat parameter vectors.

Everything is plain float64 numpy: forward evaluation, exact reverse-mode
gradients with respect to parameters and inputs, differentiation of rollout
returns through the unrolled policy/dynamics composition, and JSON
checkpoints.  Networks are immutable values; optimisation produces new
parameter vectors via :func:`with_params`.

Parameter layout: layer by layer, the weight matrix (fan_out x fan_in,
row-major) followed by the bias vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .cmdp import Environment, HorizonConfig, SimulationDiverged, return_of, simulate
from .util import atomic_write_text

DEFAULT_BPTT_MAX_HORIZON = 64


class CheckpointError(ValueError):
    """Malformed checkpoint document or header/payload mismatch."""


class HorizonTooLong(ValueError):
    """Rollout differentiation refused: horizon exceeds the configured bound."""


@dataclass(frozen=True)
class Affine:
    """Identity output head: the last pre-activation is the output."""


@dataclass(frozen=True)
class BoxSquash:
    """tanh-squash of the last pre-activation into the box [low, high].

    Zero pre-activation maps to the box midpoint; finite inputs stay inside
    the box.
    """

    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "low", tuple(float(v) for v in self.low))
        object.__setattr__(self, "high", tuple(float(v) for v in self.high))
        if len(self.low) != len(self.high):
            raise ValueError("box bounds must have equal length")
        if any(l >= h for l, h in zip(self.low, self.high)):
            raise ValueError("box low must be strictly below high componentwise")


OutputTransform = Affine | BoxSquash


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True, eq=False)
class Network:
    """A feed-forward net with tanh hidden layers and a flat parameter vector."""

    layer_sizes: tuple[int, ...]
    output: OutputTransform
    params: np.ndarray
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(self, "params", np.ascontiguousarray(self.params, dtype=np.float64))
        if len(self.layer_sizes) < 2 or any(n < 1 for n in self.layer_sizes):
            raise ValueError(f"layer_sizes must be >= 2 positive entries, got {self.layer_sizes}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        expected = param_count(self.layer_sizes)
        if self.params.shape != (expected,):
            raise ValueError(
                f"parameter vector has {self.params.size} entries, layer sizes "
                f"{self.layer_sizes} require {expected}"
            )
        if isinstance(self.output, BoxSquash) and len(self.output.low) != self.layer_sizes[-1]:
            raise ValueError("box bounds length must equal the output dimension")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def with_params(net: Network, params: np.ndarray) -> Network:
    return replace(net, params=params)


def init_network(
    layer_sizes: Sequence[int],
    output: OutputTransform | None = None,
    seed: int = 0,
    input_center: np.ndarray | None = None,
    input_halfwidth: np.ndarray | None = None,
) -> Network:
    """Seeded initialisation, uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    ``input_center``/``input_halfwidth`` bake a fixed affine standardisation
    of the inputs into the first layer: its weights are divided by the
    halfwidths and its biases shifted so the layer initially sees
    ``(x - center) / halfwidth``.  Raw inputs far from unit scale otherwise
    pin the first tanh layer at +-1 from the start, and a saturated layer
    neither discriminates inputs nor passes gradient.
    """
    sizes = tuple(int(n) for n in layer_sizes)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    if input_center is not None or input_halfwidth is not None:
        center = np.zeros(sizes[0]) if input_center is None else np.asarray(input_center, dtype=np.float64)
        half = np.ones(sizes[0]) if input_halfwidth is None else np.asarray(input_halfwidth, dtype=np.float64)
        if center.shape != (sizes[0],) or half.shape != (sizes[0],):
            raise ValueError("input statistics must match the input dimension")
        if np.any(half <= 0):
            raise ValueError("input_halfwidth must be positive componentwise")
        w1 = chunks[0].reshape(sizes[1], sizes[0])
        w1 /= half
        chunks[1] -= w1 @ center
    return Network(sizes, output if output is not None else Affine(), np.concatenate(chunks), seed=seed)


def zero_network(layer_sizes: Sequence[int], output: OutputTransform | None = None) -> Network:
    sizes = tuple(int(n) for n in layer_sizes)
    return Network(sizes, output if output is not None else Affine(), np.zeros(param_count(sizes)))


def _layers(net: Network):
    """Yield (W, b) views into the flat parameter vector."""
    offset = 0
    for fan_in, fan_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
        w = net.params[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = net.params[offset : offset + fan_out]
        offset += fan_out
        yield w, b


def _forward_cache(net: Network, x: np.ndarray):
    """Batched forward pass; returns (outputs, cache) for :func:`_backward`.

    ``x`` has shape (B, in_dim).  The cache stores the activation fed into
    every layer plus, for a squashed output, the tanh of the last
    pre-activation.
    """
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"expected input of shape (B, {net.in_dim}), got {x.shape}")
    weights = list(_layers(net))
    inputs = [x]
    a = x
    for w, b in weights[:-1]:
        a = np.tanh(a @ w.T + b)
        inputs.append(a)
    w, b = weights[-1]
    z = a @ w.T + b
    if isinstance(net.output, BoxSquash):
        t = np.tanh(z)
        low = np.asarray(net.output.low)
        high = np.asarray(net.output.high)
        y = low + (high - low) * (t + 1.0) * 0.5
        return y, (inputs, t, z)
    return z, (inputs, None, z)


def _backward(net: Network, cache, d_out: np.ndarray, d_z_extra: np.ndarray | None = None):
    """Reverse sweep for a cached forward pass.

    ``d_out`` (B, out_dim) seeds the output cotangent; ``d_z_extra``
    optionally seeds the cotangent of the last pre-activation directly,
    bypassing the output transform (used by the pre-activation
    regulariser).  Returns the gradient with respect to the flat parameters
    (summed over the batch) and the per-sample gradient with respect to the
    inputs (B, in_dim).
    """
    inputs, squash_t, _ = cache
    weights = list(_layers(net))
    if isinstance(net.output, BoxSquash):
        low = np.asarray(net.output.low)
        high = np.asarray(net.output.high)
        dz = d_out * (high - low) * 0.5 * (1.0 - squash_t * squash_t)
    else:
        dz = d_out
    if d_z_extra is not None:
        dz = dz + d_z_extra
    d_params = np.empty_like(net.params)
    offset = net.params.size
    for idx in range(len(weights) - 1, -1, -1):
        w, _ = weights[idx]
        a_prev = inputs[idx]
        fan_out, fan_in = w.shape
        offset -= fan_out
        d_params[offset : offset + fan_out] = dz.sum(axis=0)
        offset -= fan_out * fan_in
        d_params[offset : offset + fan_out * fan_in] = (dz.T @ a_prev).ravel()
        d_prev = dz @ w
        if idx > 0:
            dz = d_prev * (1.0 - inputs[idx] * inputs[idx])
    return d_params, d_prev


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Deterministic feed-forward evaluation of a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.in_dim,):
        raise ValueError(f"expected input of shape ({net.in_dim},), got {x.shape}")
    y, _ = _forward_cache(net, x[None, :])
    return y[0]


def forward_batch(net: Network, x: np.ndarray) -> np.ndarray:
    y, _ = _forward_cache(net, np.asarray(x, dtype=np.float64))
    return y


def grad_output_wrt_params(net: Network, x: np.ndarray) -> np.ndarray:
    """Exact Jacobian of the output with respect to the flat parameters,
    shape (out_dim, param_count)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.in_dim,):
        raise ValueError(f"expected input of shape ({net.in_dim},), got {x.shape}")
    _, cache = _forward_cache(net, x[None, :])
    rows = []
    for k in range(net.out_dim):
        seed = np.zeros((1, net.out_dim))
        seed[0, k] = 1.0
        d_params, _ = _backward(net, cache, seed)
        rows.append(d_params)
    return np.stack(rows)


def grad_output_wrt_input(net: Network, x: np.ndarray) -> np.ndarray:
    """Exact Jacobian of the output with respect to the input, (out_dim, in_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.in_dim,):
        raise ValueError(f"expected input of shape ({net.in_dim},), got {x.shape}")
    _, cache = _forward_cache(net, x[None, :])
    rows = []
    for k in range(net.out_dim):
        seed = np.zeros((1, net.out_dim))
        seed[0, k] = 1.0
        _, d_x = _backward(net, cache, seed)
        rows.append(d_x[0])
    return np.stack(rows)


def rollout_returns_and_grad(
    env: Environment,
    policy: Network,
    starts: np.ndarray,
    cfg: HorizonConfig,
    max_horizon: int = DEFAULT_BPTT_MAX_HORIZON,
    action_reg: float = 0.0,
):
    """Returns, pre-activation penalties, and objective gradient for a batch
    of rollouts.

    Reverse sweep through the unrolled dynamics: the per-step cotangent of
    the state carries discounted reward gradients backwards through the
    transition Jacobians and the policy.  Returns ``(returns, penalties,
    grad)`` where ``returns`` (B,) are the plain discounted returns,
    ``penalties`` (B,) are the per-rollout sums of squared output-layer
    pre-activations, and ``grad`` is the gradient of
    ``sum_b (returns[b] - action_reg * penalties[b])``.

    A positive ``action_reg`` keeps ascent from pinning the squashed policy
    outputs at the box faces, where the tanh derivative vanishes and later
    constrained updates lose all leverage.

    Long horizons make this computation explode; horizons beyond
    ``max_horizon`` are refused rather than silently mis-scaled.
    """
    if cfg.horizon > max_horizon:
        raise HorizonTooLong(
            f"horizon {cfg.horizon} exceeds the rollout-differentiation bound {max_horizon}; "
            "shorten the horizon or raise the bound explicitly"
        )
    starts = np.asarray(starts, dtype=np.float64)
    if starts.ndim != 2 or starts.shape[1] != env.state_dim:
        raise ValueError(f"starts must have shape (B, {env.state_dim}), got {starts.shape}")
    if policy.in_dim != env.state_dim or policy.out_dim != env.action_dim:
        raise ValueError("policy dimensions do not match the environment")
    batch = starts.shape[0]
    horizon = cfg.horizon
    states_seq = []
    acts_seq = []
    caches = []
    masks = []
    discs = []
    totals = np.zeros(batch)
    penalties = np.zeros(batch)
    disc = 1.0
    s = starts
    for t in range(horizon):
        raw, cache = _forward_cache(policy, s)
        if not np.all(np.isfinite(raw)):
            raise SimulationDiverged(t, "policy produced a non-finite action")
        act = np.clip(raw, env.action_low, env.action_high)
        mask = (act == raw).astype(np.float64)
        r = np.asarray(env.reward(s, act), dtype=np.float64)
        nxt = np.asarray(env.transition(s, act), dtype=np.float64)
        if not np.all(np.isfinite(nxt)):
            raise SimulationDiverged(t + 1, "transition produced a non-finite state")
        states_seq.append(s)
        acts_seq.append(act)
        caches.append(cache)
        masks.append(mask)
        discs.append(disc)
        totals = totals + disc * r
        penalties = penalties + np.sum(cache[2] * cache[2], axis=1)
        disc = disc * cfg.discount
        s = nxt
    grad = np.zeros_like(policy.params)
    lam = np.zeros((batch, env.state_dim))
    for t in range(horizon - 1, -1, -1):
        s_t = states_seq[t]
        a_t = acts_seq[t]
        gr_act = discs[t] * np.asarray(env.reward_grad_action(s_t, a_t), dtype=np.float64)
        jac_a = np.asarray(env.transition_jac_action(s_t, a_t), dtype=np.float64)
        gr_act = gr_act + np.einsum("bn,bnm->bm", lam, jac_a)
        gr_raw = gr_act * masks[t]
        d_z = (-2.0 * action_reg) * caches[t][2] if action_reg else None
        d_params, d_inputs = _backward(policy, caches[t], gr_raw, d_z_extra=d_z)
        grad += d_params
        jac_s = np.asarray(env.transition_jac_state(s_t, a_t), dtype=np.float64)
        lam = (
            discs[t] * np.asarray(env.reward_grad_state(s_t, a_t), dtype=np.float64)
            + np.einsum("bn,bnk->bk", lam, jac_s)
            + d_inputs
        )
    return totals, penalties, grad


def bptt_return_grad(
    env: Environment,
    policy: Network,
    s0: np.ndarray,
    cfg: HorizonConfig,
    max_horizon: int = DEFAULT_BPTT_MAX_HORIZON,
):
    """Return of a single rollout and its exact gradient w.r.t. policy params."""
    s0 = np.asarray(s0, dtype=np.float64).reshape(env.state_dim)
    totals, _, grad = rollout_returns_and_grad(env, policy, s0[None, :], cfg, max_horizon)
    return float(totals[0]), grad


# --- finite-difference verification -------------------------------------------------


@dataclass(frozen=True, eq=False)
class GradientReport:
    """Analytic vs central-finite-difference gradients, flattened."""

    analytic: np.ndarray
    numeric: np.ndarray
    max_relative_error: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm difference scaled by the larger vector magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def param_gradient_report(net: Network, x: np.ndarray, step: float = 1e-5) -> GradientReport:
    """Check :func:`grad_output_wrt_params` against central differences."""
    x = np.asarray(x, dtype=np.float64)
    analytic = grad_output_wrt_params(net, x)
    numeric = np.empty_like(analytic)
    base = net.params
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + step
        hi = forward(with_params(net, bumped), x)
        bumped[i] = base[i] - step
        lo = forward(with_params(net, bumped), x)
        numeric[:, i] = (hi - lo) / (2.0 * step)
    return GradientReport(analytic, numeric, relative_error(analytic, numeric))


def bptt_gradient_report(
    env: Environment,
    policy: Network,
    s0: np.ndarray,
    cfg: HorizonConfig,
    step: float = 1e-5,
) -> GradientReport:
    """Check :func:`bptt_return_grad` against central differences."""
    _, analytic = bptt_return_grad(env, policy, s0, cfg)
    base = policy.params
    numeric = np.empty_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + step
        hi = return_of(env, simulate(env, with_params(policy, bumped), s0, cfg), cfg)
        bumped[i] = base[i] - step
        lo = return_of(env, simulate(env, with_params(policy, bumped), s0, cfg), cfg)
        numeric[i] = (hi - lo) / (2.0 * step)
    return GradientReport(analytic, numeric, relative_error(analytic, numeric))


# --- checkpoints ---------------------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    if isinstance(net.output, BoxSquash):
        transform = {"kind": "box_squash", "low": list(net.output.low), "high": list(net.output.high)}
    else:
        transform = {"kind": "affine"}
    return {
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "output_transform": transform,
        "seed": net.seed,
        "params": net.params.tolist(),
    }


def network_from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise CheckpointError(f"checkpoint must be a JSON object, got {type(doc).__name__}")
    required = {"layer_sizes", "activation", "output_transform", "seed", "params"}
    missing = required - set(doc)
    if missing:
        raise CheckpointError(f"checkpoint missing fields: {', '.join(sorted(missing))}")
    unknown = set(doc) - required
    if unknown:
        raise CheckpointError(f"checkpoint has unknown fields: {', '.join(sorted(unknown))}")
    sizes = tuple(int(n) for n in doc["layer_sizes"])
    transform = doc["output_transform"]
    if not isinstance(transform, dict) or "kind" not in transform:
        raise CheckpointError("output_transform must be an object with a 'kind' field")
    if transform["kind"] == "affine":
        output: OutputTransform = Affine()
    elif transform["kind"] == "box_squash":
        try:
            output = BoxSquash(tuple(transform["low"]), tuple(transform["high"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"bad box_squash bounds: {exc}") from exc
    else:
        raise CheckpointError(f"unknown output transform kind {transform['kind']!r}")
    params = np.asarray(doc["params"], dtype=np.float64)
    expected = param_count(sizes)
    if params.ndim != 1 or params.size != expected:
        raise CheckpointError(
            f"parameter payload has {params.size} values but layer sizes {sizes} require {expected}"
        )
    try:
        return Network(sizes, output, params, activation=doc["activation"], seed=int(doc["seed"]))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def save_checkpoint(net: Network, path: str) -> None:
    atomic_write_text(path, json.dumps(network_to_dict(net), sort_keys=True))


def load_checkpoint(path: str) -> Network:
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not valid JSON: {path}: {exc}") from exc
    return network_from_dict(doc)


def checkpoint_roundtrip(net: Network) -> Network:
    """Serialize and deserialize; the result has bit-identical parameters."""
    return network_from_dict(json.loads(json.dumps(network_to_dict(net))))


def network_fingerprint(net: Network) -> str:
    """Content hash of architecture and parameters."""
    digest = hashlib.sha256()
    digest.update(repr(net.layer_sizes).encode())
    digest.update(repr(network_to_dict(net)["output_transform"]).encode())
    digest.update(net.params.tobytes())
    return digest.hexdigest()
