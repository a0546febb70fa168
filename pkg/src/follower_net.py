"""
Dual-encoder attention network predicting follower positions.

Leader positions and leader speeds are encoded by two separate LSTM
stacks. Their per-step outputs, concatenated, are projected to attention
keys and values. An LSTM decoder, started from the position encoder's
final states, attends over them for every output step and feeds on the
resulting context vector.

Outputs are offsets from the observed follower start position, so a
prediction depends on the leader inputs and on that start position.
"""

import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ComputationTape, Tensor, as_tensor, concat, reshape, stack
from .config import setup_logger
from .errors import CheckpointError, ConfigurationError, ShapeError
from .layers import AffineMap, LstmStack, LstmState, scaled_dot_attention
from .trajectory import SequenceWindow, denormalize, normalize_window

logger = setup_logger('FollowerNet')

CHECKPOINT_MAGIC = b'IDMFNET\x00'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """Network dimensions."""
    hidden: int = 128
    layers: int = 2
    input_size: int = 1
    horizon: int = 80

    def __post_init__(self):
        if self.hidden < 2:
            raise ConfigurationError(f"hidden size must be >= 2, got {self.hidden}")
        if self.horizon < 1:
            raise ConfigurationError(f"horizon must be >= 1, got {self.horizon}")
        if self.layers < 1 or self.input_size < 1:
            raise ConfigurationError("layers and input_size must be >= 1")


DESK_NET = NetConfig(hidden=32)


def expected_parameter_count(config: NetConfig) -> int:
    """Closed-form parameter count from the layer dimensions."""
    h, layers = config.hidden, config.layers

    def lstm(input_size: int) -> int:
        first = 4 * h * (input_size + h) + 4 * h
        rest = (layers - 1) * (4 * h * (h + h) + 4 * h)
        return first + rest

    encoders = 2 * lstm(config.input_size)
    key_value = 2 * (2 * h * h + h)
    decoder = lstm(h)
    output = 2 * h + 1
    return encoders + key_value + decoder + output


class FollowerNet:
    """Parameters and forward computation of the follower predictor."""

    def __init__(self, config: NetConfig, params: Dict[str, np.ndarray], seed: int = 0,
                 mu: Optional[float] = None):
        self.config = config
        self.seed = seed
        # loss weight the parameters were trained with; None before training
        self.mu = mu
        (self.position_encoder, self.velocity_encoder, self.key_map,
         self.value_map, self.decoder, self.output_map) = _build_layers(config)

        shapes = self.parameter_shapes()
        missing = sorted(set(shapes) - set(params))
        unexpected = sorted(set(params) - set(shapes))
        if missing or unexpected:
            raise ConfigurationError(f"parameter mismatch: missing {missing}, unexpected {unexpected}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {params[name].shape}")
        # keep the canonical order
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in shapes}

    @property
    def layers(self):
        return (self.position_encoder, self.velocity_encoder, self.key_map,
                self.value_map, self.decoder, self.output_map)

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.parameter_shapes())
        return shapes

    def parameter_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def copy(self) -> 'FollowerNet':
        return FollowerNet(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed, self.mu)

    def bind(self, tape: Optional[ComputationTape] = None) -> Dict[str, Tensor]:
        """Parameters as tape variables, or as constants when no tape is given."""
        if tape is None:
            return {name: Tensor(value) for name, value in self.params.items()}
        return {name: tape.variable(value, name) for name, value in self.params.items()}

    def encode(self, positions, velocities, p: Mapping[str, Tensor]) -> Tuple[Tensor, Tensor, List[LstmState]]:
        positions, velocities = as_tensor(positions), as_tensor(velocities)
        if positions.shape != velocities.shape:
            raise ShapeError(f"encoder inputs disagree: positions {positions.shape}, velocities {velocities.shape}")
        position_out, position_states = self.position_encoder.forward(positions, p)
        velocity_out, _ = self.velocity_encoder.forward(velocities, p)
        joint = concat([position_out, velocity_out], axis=-1)
        return self.key_map(joint, p), self.value_map(joint, p), position_states

    def decode(self, keys: Tensor, values: Tensor, states: List[LstmState], horizon: int,
               p: Mapping[str, Tensor], return_attention: bool = False):
        bound = self.decoder.bind(p)
        batch = keys.shape[0]
        outputs = []
        attention = []
        for _ in range(horizon):
            query = states[-1][0]
            context, weights = scaled_dot_attention(query, keys, values)
            states = self.decoder.step(context, states, bound)
            outputs.append(self.output_map(concat([states[-1][0], context], axis=-1), p))
            attention.append(weights)
        predicted = reshape(stack(outputs, axis=1), (batch, horizon, 1))
        if return_attention:
            return predicted, attention
        return predicted

    def forward(self, positions, velocities, p: Mapping[str, Tensor]) -> Tensor:
        keys, values, states = self.encode(positions, velocities, p)
        return self.decode(keys, values, states, keys.shape[1], p)


def _build_layers(config: NetConfig):
    h = config.hidden
    return (
        LstmStack('position_encoder', config.input_size, h, config.layers),
        LstmStack('velocity_encoder', config.input_size, h, config.layers),
        AffineMap('key_map', 2 * h, h),
        AffineMap('value_map', 2 * h, h),
        LstmStack('decoder', h, h, config.layers),
        AffineMap('output_map', 2 * h, 1),
    )


def init_params(config: NetConfig, seed: int = 0) -> FollowerNet:
    """Deterministically initialized network."""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for layer in _build_layers(config):
        params.update(layer.init(rng))
    return FollowerNet(config, params, seed)


def encode(positions, velocities, net: FollowerNet, p: Optional[Mapping[str, Tensor]] = None):
    """Keys, values and decoder initial states for (batch, H, 1) inputs."""
    return net.encode(positions, velocities, p if p is not None else net.bind())


def decode(keys, values, states, horizon: int, net: FollowerNet,
           p: Optional[Mapping[str, Tensor]] = None, return_attention: bool = False):
    """Predicted normalized follower offsets, (batch, H, 1)."""
    return net.decode(keys, values, states, horizon, p if p is not None else net.bind(), return_attention)


@dataclass
class WindowBatch:
    """Stacked, normalized network inputs for a list of windows."""
    positions: np.ndarray
    velocities: np.ndarray
    anchors: np.ndarray
    offsets: np.ndarray
    position_scale: float

    def to_meters(self, normalized: np.ndarray) -> np.ndarray:
        """(B, H) normalized outputs to meters."""
        return (self.anchors[:, None] + normalized) * self.position_scale + self.offsets[:, None]


def prepare_batch(windows: Sequence[SequenceWindow]) -> WindowBatch:
    """
    Normalize windows into network inputs.

    The anchor is the observed follower start in normalized units; network
    outputs are offsets from it.
    """
    positions, velocities, anchors, offsets = [], [], [], []
    scale = 100.0
    for window in windows:
        normalized, normalizer = normalize_window(window)
        positions.append(normalized.leader_positions)
        velocities.append(normalized.leader_velocities)
        anchors.append(normalized.follower_positions[0])
        offsets.append(normalizer.position_offset)
        scale = normalizer.position_scale
    return WindowBatch(
        positions=np.stack(positions)[:, :, None],
        velocities=np.stack(velocities)[:, :, None],
        anchors=np.asarray(anchors),
        offsets=np.asarray(offsets),
        position_scale=scale,
    )


def check_horizon(net: FollowerNet, windows: Sequence[SequenceWindow]) -> None:
    for window in windows:
        if window.horizon != net.config.horizon:
            raise CheckpointError(
                f"horizon mismatch: network predicts {net.config.horizon} samples, "
                f"window {window.window_id!r} has {window.horizon}"
            )


def predict_batch(windows: Sequence[SequenceWindow], net: FollowerNet) -> np.ndarray:
    """Follower positions in meters for each window, (N, H)."""
    if not windows:
        return np.zeros((0, net.config.horizon))
    check_horizon(net, windows)
    batch = prepare_batch(windows)
    out = net.forward(batch.positions, batch.velocities, net.bind())
    return batch.to_meters(out.value[:, :, 0])


def predict(window: SequenceWindow, net: FollowerNet) -> np.ndarray:
    """Follower position series in meters for one window."""
    check_horizon(net, [window])
    normalized, normalizer = normalize_window(window)
    out = net.forward(normalized.leader_positions[None, :, None],
                      normalized.leader_velocities[None, :, None], net.bind())
    return denormalize(normalized.follower_positions[0] + out.value[0, :, 0], normalizer)


def save_checkpoint(net: FollowerNet, path: str) -> None:
    """
    Write a checkpoint: magic, header length, JSON header, float64 block.

    The parameter block is little-endian float64 in header order.
    """
    header = json.dumps({
        'format_version': CHECKPOINT_VERSION,
        'config': asdict(net.config),
        'seed': net.seed,
        'mu': net.mu,
        'parameters': [[name, list(value.shape)] for name, value in net.params.items()],
    }, sort_keys=True).encode('utf-8')

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(header)))
        f.write(header)
        for value in net.params.values():
            f.write(np.ascontiguousarray(value, dtype='<f8').tobytes())


def load_checkpoint(path: str) -> FollowerNet:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: On a bad magic, unreadable header, version mismatch
            or truncated parameter block
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, 'rb') as f:
        blob = f.read()

    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a network checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 4:
        raise CheckpointError(f"{path} is truncated")
    (header_length,) = struct.unpack('<I', blob[offset:offset + 4])
    offset += 4
    try:
        header = json.loads(blob[offset:offset + header_length].decode('utf-8'))
        version = header['format_version']
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({e})") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset += header_length

    params = {}
    for name, shape in header['parameters']:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path} is truncated inside parameter {name}")
        params[name] = np.frombuffer(blob[offset:end], dtype='<f8').astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - offset} trailing bytes")

    return FollowerNet(NetConfig(**header['config']), params, header['seed'], header.get('mu'))
