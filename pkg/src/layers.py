"""
Network layers built on the autodiff primitives.

Layers describe parameter names and shapes; parameter values live in a
flat name -> array mapping owned by the model, and each forward pass binds
them to Tensors on its own tape.
"""

import math
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .autodiff import (Tensor, as_tensor, matmul, reshape, sigmoid, slice_, softmax,
                       stack, tanh, transpose)
from .errors import ShapeError

LstmState = Tuple[Tensor, Tensor]


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform values in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class AffineMap:
    """y = x W^T + b, with W of shape (out, in) and b of shape (out,)."""

    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    @property
    def weight(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias(self) -> str:
        return f"{self.name}.bias"

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            self.weight: (self.out_features, self.in_features),
            self.bias: (self.out_features,),
        }

    def init(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {
            self.weight: uniform_init(rng, (self.out_features, self.in_features), self.in_features),
            self.bias: np.zeros(self.out_features),
        }

    def __call__(self, x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"{self.name}: input shape {x.shape} does not end in {self.in_features}"
            )
        return matmul(x, transpose(params[self.weight])) + params[self.bias]


class LstmStack:
    """
    Stacked LSTM layers; layer l > 0 consumes layer l - 1's per-step output.

    Each layer has fused gate weights w_ih (4h, in), w_hh (4h, h) and a
    bias (4h,), with gate blocks ordered input, forget, cell, output.
    """

    def __init__(self, name: str, input_size: int, hidden_size: int, num_layers: int = 2):
        if num_layers < 1:
            raise ValueError("LSTM stack needs at least one layer")
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers

    def _names(self, layer: int) -> Tuple[str, str, str]:
        prefix = f"{self.name}.l{layer}"
        return f"{prefix}.w_ih", f"{prefix}.w_hh", f"{prefix}.bias"

    def _layer_input(self, layer: int) -> int:
        return self.input_size if layer == 0 else self.hidden_size

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        h = self.hidden_size
        shapes = {}
        for layer in range(self.num_layers):
            w_ih, w_hh, bias = self._names(layer)
            shapes[w_ih] = (4 * h, self._layer_input(layer))
            shapes[w_hh] = (4 * h, h)
            shapes[bias] = (4 * h,)
        return shapes

    def init(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        h = self.hidden_size
        params = {}
        for layer in range(self.num_layers):
            w_ih, w_hh, bias = self._names(layer)
            params[w_ih] = uniform_init(rng, (4 * h, self._layer_input(layer)), self._layer_input(layer))
            params[w_hh] = uniform_init(rng, (4 * h, h), h)
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0
            params[bias] = b
        return params

    def bind(self, params: Mapping[str, Tensor]) -> List[Tuple[Tensor, Tensor, Tensor]]:
        """Per-layer (w_ih^T, w_hh^T, bias), transposed once per pass."""
        bound = []
        for layer in range(self.num_layers):
            w_ih, w_hh, bias = self._names(layer)
            bound.append((transpose(params[w_ih]), transpose(params[w_hh]), params[bias]))
        return bound

    def zero_states(self, batch: int) -> List[LstmState]:
        zeros = np.zeros((batch, self.hidden_size))
        return [(Tensor(zeros), Tensor(zeros)) for _ in range(self.num_layers)]

    def _cell(self, gates_in: Tensor, state: LstmState, w_hh_t: Tensor) -> LstmState:
        h_prev, c_prev = state
        n = self.hidden_size
        gates = gates_in + matmul(h_prev, w_hh_t)
        activated = sigmoid(gates)
        i = slice_(activated, (slice(None), slice(0, n)))
        f = slice_(activated, (slice(None), slice(n, 2 * n)))
        g = tanh(slice_(gates, (slice(None), slice(2 * n, 3 * n))))
        o = slice_(activated, (slice(None), slice(3 * n, 4 * n)))
        c = f * c_prev + i * g
        h = o * tanh(c)
        return h, c

    def step(self, x_t: Tensor, states: List[LstmState],
             bound: List[Tuple[Tensor, Tensor, Tensor]]) -> List[LstmState]:
        """Advance every layer by one time step; x_t is (batch, input_size)."""
        new_states = []
        layer_input = x_t
        for layer, (w_ih_t, w_hh_t, bias) in enumerate(bound):
            h, c = self._cell(matmul(layer_input, w_ih_t) + bias, states[layer], w_hh_t)
            new_states.append((h, c))
            layer_input = h
        return new_states

    def forward(self, inputs, params: Mapping[str, Tensor],
                initial_states: Optional[List[LstmState]] = None) -> Tuple[Tensor, List[LstmState]]:
        """
        Run the stack over a (batch, time, input_size) sequence.

        Returns:
            (outputs of the top layer (batch, time, hidden), final (h, c) per layer)
        """
        inputs = as_tensor(inputs)
        if inputs.ndim != 3 or inputs.shape[-1] != self.input_size:
            raise ShapeError(
                f"{self.name}: expected (batch, time, {self.input_size}) input, got {inputs.shape}"
            )
        batch, steps, _ = inputs.shape
        states = initial_states or self.zero_states(batch)
        bound = self.bind(params)

        final_states = []
        sequence = inputs
        for layer, (w_ih_t, w_hh_t, bias) in enumerate(bound):
            # input projections for every step at once
            projected = matmul(sequence, w_ih_t) + bias
            state = states[layer]
            outputs = []
            for t in range(steps):
                state = self._cell(slice_(projected, (slice(None), t, slice(None))), state, w_hh_t)
                outputs.append(state[0])
            final_states.append(state)
            sequence = stack(outputs, axis=1)

        return sequence, final_states


def lstm_forward(stack_: LstmStack, inputs, params: Mapping[str, Tensor],
                 initial_states: Optional[List[LstmState]] = None) -> Tuple[Tensor, List[LstmState]]:
    return stack_.forward(inputs, params, initial_states)


def scaled_dot_attention(query, keys, values) -> Tuple[Tensor, Tensor]:
    """
    Dot-product attention scaled by 1/sqrt(h).

    Args:
        query: (batch, h)
        keys: (batch, T, h)
        values: (batch, T, h)

    Returns:
        (context (batch, h), weights (batch, T))
    """
    query, keys, values = as_tensor(query), as_tensor(keys), as_tensor(values)
    if query.ndim != 2 or keys.ndim != 3 or values.shape != keys.shape \
            or keys.shape[0] != query.shape[0] or keys.shape[2] != query.shape[1]:
        raise ShapeError(
            f"attention: query {query.shape}, keys {keys.shape}, values {values.shape} do not align"
        )
    batch, steps, hidden = keys.shape
    scores = reshape(matmul(keys, reshape(query, (batch, hidden, 1))), (batch, steps))
    weights = softmax(scores * (1.0 / math.sqrt(hidden)), axis=-1)
    context = reshape(matmul(reshape(weights, (batch, 1, steps)), values), (batch, hidden))
    return context, weights
