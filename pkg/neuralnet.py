"""
Dense ELU networks in numpy with exact reverse-mode gradients.

Interfaces are numbered 0..L for an L-layer network: interface 0 is the raw
input, interface l is the output of layer l. A perturbation may be injected
at one interface in 0..L-1. Besides ordinary backprop the module provides
forward-mode tangents from the injection interface and their reverse-mode
gradients, which second-order loss terms need.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

ADDITIVE = 'additive'
MULTIPLICATIVE = 'multiplicative'
OUTPUT_ACTIVATIONS = ('identity', 'elu')


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def elu_second(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 0.0, np.exp(np.minimum(z, 0.0)))


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: Tuple[int, ...]
    output: str = 'identity'
    injection_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'layer_widths', tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ShapeMismatchError(f"need at least one layer of positive width, got {self.layer_widths}")
        if self.output not in OUTPUT_ACTIVATIONS:
            raise DomainError(f"unknown output activation '{self.output}'")
        if self.injection_index is not None and not 0 <= self.injection_index < self.n_layers:
            raise ShapeMismatchError(
                f"injection index {self.injection_index} is not an interface of a {self.n_layers}-layer net"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def activation(self, layer: int) -> str:
        return 'elu' if layer < self.n_layers - 1 else self.output


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        """W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> 'MlpParams':
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> 'MlpParams':
        return MlpParams.from_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> 'MlpParams':
        return MlpParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def add(self, other: 'MlpParams') -> 'MlpParams':
        return MlpParams.from_arrays([a + b for a, b in zip(self.arrays(), other.arrays())])


@dataclass(frozen=True)
class Perturbation:
    kind: str
    xi: np.ndarray


@dataclass
class ForwardCache:
    spec: MlpSpec
    params: MlpParams
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray
    interface_pre: Optional[np.ndarray] = None
    perturbation: Optional[Perturbation] = None


@dataclass
class Gradients:
    params: MlpParams
    input: np.ndarray
    injected: Optional[np.ndarray] = None


@dataclass
class TangentCache:
    cache: ForwardCache
    tangent_inputs: List[np.ndarray] = field(default_factory=list)
    tangent_pre: List[np.ndarray] = field(default_factory=list)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Fan-in scaled uniform initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in))"""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases)


def _inject(h: np.ndarray, perturbation: Optional[Perturbation]) -> np.ndarray:
    if perturbation is None:
        return h
    if perturbation.xi.shape != h.shape:
        raise ShapeMismatchError(
            f"perturbation shape {perturbation.xi.shape} does not match interface {h.shape}"
        )
    if perturbation.kind == ADDITIVE:
        return h + perturbation.xi
    if perturbation.kind == MULTIPLICATIVE:
        return h * perturbation.xi
    raise DomainError(f"unknown perturbation kind '{perturbation.kind}'")


def forward(params: MlpParams, spec: MlpSpec, x: np.ndarray,
            perturbation: Optional[Perturbation] = None) -> Tuple[np.ndarray, ForwardCache]:
    """Outputs and the activations backward needs"""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise ShapeMismatchError(f"input shape {x.shape} does not match width {spec.layer_widths[0]}")
    if perturbation is not None and spec.injection_index is None:
        raise ShapeMismatchError("network has no injection interface")

    k = spec.injection_index
    inputs, pre_activations = [], []
    interface_pre = None
    h = x
    if k == 0:
        interface_pre = h
        h = _inject(h, perturbation)
    for layer in range(spec.n_layers):
        inputs.append(h)
        z = h @ params.weights[layer] + params.biases[layer]
        pre_activations.append(z)
        h = elu(z) if spec.activation(layer) == 'elu' else z
        if k == layer + 1:
            interface_pre = h
            h = _inject(h, perturbation)
    cache = ForwardCache(spec, params, inputs, pre_activations, h, interface_pre, perturbation)
    return h, cache


def backward(cache: ForwardCache, upstream_grad: np.ndarray,
             post_injection_grad: Optional[np.ndarray] = None,
             pre_injection_grad: Optional[np.ndarray] = None) -> Gradients:
    """
    Exact gradients of sum(upstream_grad * outputs).

    post_injection_grad and pre_injection_grad are extra adjoints entering at
    the injection interface after and before the perturbation is applied.
    """
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != cache.output.shape:
        raise ShapeMismatchError(
            f"upstream gradient {upstream_grad.shape} does not match cached output {cache.output.shape}"
        )
    spec, params = cache.spec, cache.params
    k = spec.injection_index
    d_weights: List[Optional[np.ndarray]] = [None] * spec.n_layers
    d_biases: List[Optional[np.ndarray]] = [None] * spec.n_layers
    injected = None
    g = upstream_grad
    for layer in reversed(range(spec.n_layers)):
        z = cache.pre_activations[layer]
        dz = g * elu_grad(z) if spec.activation(layer) == 'elu' else g
        d_weights[layer] = cache.inputs[layer].T @ dz
        d_biases[layer] = dz.sum(axis=0)
        g = dz @ params.weights[layer].T
        if k == layer:
            g, injected = _through_injection(cache, g, post_injection_grad, pre_injection_grad)
    return Gradients(MlpParams(d_weights, d_biases), g, injected)


def _through_injection(cache: ForwardCache, g: np.ndarray,
                       post_grad: Optional[np.ndarray],
                       pre_grad: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    if post_grad is not None:
        g = g + post_grad
    perturbation = cache.perturbation
    if perturbation is not None and perturbation.kind == MULTIPLICATIVE:
        injected = g * cache.interface_pre
        g = g * perturbation.xi
    else:
        injected = g
    if pre_grad is not None:
        g = g + pre_grad
    return g, injected


def tangent_forward(cache: ForwardCache, tangent: np.ndarray) -> Tuple[np.ndarray, TangentCache]:
    """Directional derivative of the outputs along tangent at the post-injection interface"""
    spec, params = cache.spec, cache.params
    k = spec.injection_index
    if k is None:
        raise ShapeMismatchError("network has no injection interface")
    tangent = np.asarray(tangent, dtype=float)
    if tangent.shape != cache.inputs[k].shape:
        raise ShapeMismatchError(f"tangent shape {tangent.shape} does not match interface {cache.inputs[k].shape}")
    tcache = TangentCache(cache)
    t = tangent
    for layer in range(k, spec.n_layers):
        tcache.tangent_inputs.append(t)
        z_dot = t @ params.weights[layer]
        tcache.tangent_pre.append(z_dot)
        if spec.activation(layer) == 'elu':
            t = elu_grad(cache.pre_activations[layer]) * z_dot
        else:
            t = z_dot
    return t, tcache


def tangent_backward(tcache: TangentCache, upstream_grad: np.ndarray) -> Tuple[MlpParams, np.ndarray, np.ndarray]:
    """
    Gradients of sum(upstream_grad * D) where D is the tangent_forward output.

    Returns parameter gradients (zero below the injection interface), the
    adjoint of the post-injection activations and the adjoint of the tangent.
    """
    cache = tcache.cache
    spec, params = cache.spec, cache.params
    k = spec.injection_index
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != cache.output.shape:
        raise ShapeMismatchError("upstream gradient does not match the tangent output")
    grads = params.zeros_like()
    g_primal = np.zeros_like(upstream_grad)
    g_tangent = upstream_grad
    for layer in reversed(range(k, spec.n_layers)):
        z = cache.pre_activations[layer]
        z_dot = tcache.tangent_pre[layer - k]
        if spec.activation(layer) == 'elu':
            dz = g_primal * elu_grad(z) + g_tangent * z_dot * elu_second(z)
            dz_dot = g_tangent * elu_grad(z)
        else:
            dz = g_primal
            dz_dot = g_tangent
        grads.weights[layer] = cache.inputs[layer].T @ dz + tcache.tangent_inputs[layer - k].T @ dz_dot
        grads.biases[layer] = dz.sum(axis=0)
        g_primal = dz @ params.weights[layer].T
        g_tangent = dz_dot @ params.weights[layer].T
    return grads, g_primal, g_tangent


def predict(params: MlpParams, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Perturbation-free forward pass"""
    out, _ = forward(params, spec, x)
    return out


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; the last one may be partial"""
    order = rng.permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 0.005
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: MlpParams, lr: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    arrays = params.arrays()
    return OptimizerState(
        m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays],
        lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps,
    )


def adamw_step(params: MlpParams, grads: MlpParams, state: OptimizerState) -> Tuple[MlpParams, OptimizerState]:
    """One decoupled-weight-decay Adam update; inputs are not modified"""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if [a.shape for a in p_arrays] != [g.shape for g in g_arrays]:
        raise ShapeMismatchError("gradient shapes do not match parameters")
    step = state.step + 1
    bias1 = 1.0 - state.beta1 ** step
    bias2 = 1.0 - state.beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        p = p * (1.0 - state.lr * state.weight_decay)
        p = p - (state.lr / bias1) * m / (np.sqrt(v) / np.sqrt(bias2) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(new_m, new_v, step, state.lr, state.weight_decay,
                               state.beta1, state.beta2, state.eps)
    return MlpParams.from_arrays(new_p), new_state


@dataclass
class EmaState:
    shadow: MlpParams
    kappa: float = 0.995


def init_ema(params: MlpParams, kappa: float) -> EmaState:
    if not 0.0 <= kappa <= 1.0:
        raise DomainError(f"EMA kappa must lie in [0, 1], got {kappa}")
    return EmaState(params.copy(), kappa)


def ema_update(ema: EmaState, params: MlpParams) -> EmaState:
    """shadow <- kappa * shadow + (1 - kappa) * params"""
    shadow = [ema.kappa * s + (1.0 - ema.kappa) * p
              for s, p in zip(ema.shadow.arrays(), params.arrays())]
    return EmaState(MlpParams.from_arrays(shadow), ema.kappa)


def save_params(params: MlpParams, spec: MlpSpec, stem: str) -> Tuple[str, str]:
    """Flat little-endian float64 file plus a JSON shape manifest"""
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    arrays = params.arrays()
    flat = np.concatenate([a.ravel() for a in arrays]).astype('<f8')
    bin_path, json_path = stem + '.bin', stem + '.json'
    flat.tofile(bin_path)
    with open(json_path, 'w', encoding='utf-8') as file:
        json.dump({
            'layer_widths': list(spec.layer_widths),
            'output': spec.output,
            'injection_index': spec.injection_index,
            'shapes': [list(a.shape) for a in arrays],
        }, file, indent=2)
    logger.debug("checkpoint written to %s", bin_path)
    return bin_path, json_path


def load_params(stem: str) -> Tuple[MlpParams, MlpSpec]:
    with open(stem + '.json', 'r', encoding='utf-8') as file:
        manifest = json.load(file)
    spec = MlpSpec(tuple(manifest['layer_widths']), manifest['output'], manifest['injection_index'])
    flat = np.fromfile(stem + '.bin', dtype='<f8')
    arrays, offset = [], 0
    for shape in manifest['shapes']:
        size = int(np.prod(shape))
        arrays.append(flat[offset:offset + size].reshape(shape).astype(float))
        offset += size
    if offset != flat.size:
        raise ShapeMismatchError(f"checkpoint {stem} holds {flat.size} values, manifest expects {offset}")
    return MlpParams.from_arrays(arrays), spec
