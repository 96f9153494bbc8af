"""Network module - the reference convolutional network.

Parses the human-readable network configuration, draws deterministic
weights from its seed, and evaluates layers either densely (the
correctness oracle) or at an arbitrary list of output positions (the
gather-compute step of sparse inference). Both paths share one gather
routine, so a position evaluated sparsely sees exactly the numbers the
dense pass would.

Configuration format, one item per line::

    seed=7
    input=128x128x3
    conv k=3 s=2 out=16
    relu profiled=true
    pointwise out=8
    pool k=2 s=2
    bn
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvcache.core.data_loader import NETWORK_SCHEMA, DataValidationError, get_global_loader
from mvcache.core.errors import ConfigParseError, InvalidArgumentError
from mvcache.core.tensor import FeatureMap

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1

DEFAULT_NETWORK_CONFIG = """\
# reference network: two stride-2 stages, profiled activations after them
seed=7
input=128x128x3
conv k=3 s=1 out=8
relu
conv k=3 s=2 out=16
relu profiled=true
pointwise out=16
relu
conv k=3 s=2 out=16
relu profiled=true
"""


class LayerKind(str, Enum):
    CONV = "conv"
    POINTWISE = "pointwise"
    ACTIVATION = "activation"
    POOL = "pool"
    BN = "bn"


class ActivationKind(str, Enum):
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


_ACTIVATION_TOKENS = {a.value for a in ActivationKind}
_LAYER_TOKENS = {"conv", "pointwise", "pool", "bn"} | _ACTIVATION_TOKENS


@dataclass(eq=False)
class LayerSpec:
    """Geometry and parameters of one layer.

    The output window of position i is [i·s − pad, i·s − pad + k) with
    pad = (k − 1) // 2, which is the usual centred window for odd k.

    Attributes:
        index: Position of the layer in the network
        kind: Layer kind
        kernel_size: Window edge k
        stride: Stride s
        in_channels: Input channels
        out_channels: Output channels
        weights: (out, k·k, in) float32 for conv/pointwise, else None
        scale: Per-channel BN scale, else None
        shift: Per-channel BN shift, else None
        activation: Activation kind for activation layers
        profiled: Whether the layer takes a calibrated threshold
    """
    index: int
    kind: LayerKind
    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int
    weights: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    activation: Optional[ActivationKind] = None
    profiled: bool = False

    @property
    def pad(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def kernel_radius(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def is_spatial(self) -> bool:
        """True when an output depends on more than one input position."""
        return self.kernel_size > 1

    @property
    def l1_norm(self) -> float:
        """Scalar bound ‖w‖₁ used by the truncation rule."""
        if self.kind in (LayerKind.CONV, LayerKind.POINTWISE):
            flat = np.abs(self.weights.astype(np.float64)).reshape(self.out_channels, -1)
            return float(flat.sum(axis=1).max())
        if self.kind == LayerKind.BN:
            return float(np.abs(self.scale).max())
        return 1.0

    @property
    def macs_per_position(self) -> int:
        """Dense cost of one output position, used to FLOP-weight ratios."""
        k2 = self.kernel_size * self.kernel_size
        if self.kind in (LayerKind.CONV, LayerKind.POINTWISE):
            return k2 * self.in_channels * self.out_channels
        if self.kind == LayerKind.POOL:
            return k2 * self.in_channels
        return self.out_channels

    def describe(self) -> str:
        if self.kind == LayerKind.ACTIVATION:
            return f"{self.activation.value}"
        if self.kind == LayerKind.BN:
            return "bn"
        return f"{self.kind.value} k={self.kernel_size} s={self.stride} out={self.out_channels}"


@dataclass(eq=False)
class NetworkSpec:
    """A built network plus derived geometry.

    Attributes:
        layers: Layers in evaluation order
        input_shape: (height, width, channels) of the input
        seed: Weight seed
        document: Canonical parsed configuration (hashed for handshakes)
        output_shapes: Output (h, w, c) per layer
        cum_strides: Cumulative stride after each layer
        r_max: Largest effective receptive-field extent at input resolution
        s_max: Largest cumulative stride
    """
    layers: List[LayerSpec]
    input_shape: Tuple[int, int, int]
    seed: int
    document: Dict[str, Any]
    output_shapes: List[Tuple[int, int, int]] = field(default_factory=list)
    cum_strides: List[int] = field(default_factory=list)
    r_max: int = 1
    s_max: int = 1

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def profiled_layers(self) -> List[int]:
        return [layer.index for layer in self.layers if layer.profiled]

    def cum_stride_before(self, index: int) -> int:
        return 1 if index == 0 else self.cum_strides[index - 1]

    def input_grid(self, index: int) -> Tuple[int, int]:
        """Spatial grid consumed by layer index."""
        if index == 0:
            return self.input_shape[:2]
        return self.output_shapes[index - 1][:2]

    def config_hash(self) -> int:
        """64-bit hash of the canonical configuration."""
        blob = json.dumps(self.document, sort_keys=True).encode("utf-8")
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def default_network_config(height: int = 128, width: int = 128, seed: int = 7) -> str:
    """The default configuration text for a given input size."""
    text = DEFAULT_NETWORK_CONFIG.replace("input=128x128x3", f"input={height}x{width}x3")
    return text.replace("seed=7", f"seed={seed}")


def _parse_value(key: str, value: str, line_no: int) -> Any:
    if key == "profiled":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigParseError(f"profiled must be true/false, got '{value}'", line_no)
    try:
        return int(value)
    except ValueError:
        raise ConfigParseError(f"{key} must be an integer, got '{value}'", line_no)


def parse_network_config(text: str) -> Tuple[Dict[str, Any], List[int]]:
    """Parse configuration text into a schema-validated document.

    Args:
        text: Configuration text

    Returns:
        (document, line number of each layer)

    Raises:
        ConfigParseError: On malformed lines or schema violations
    """
    doc: Dict[str, Any] = {"layers": []}
    layer_lines: List[int] = []
    header_lines: Dict[str, int] = {}

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]

        if "=" in head and len(tokens) == 1:
            key, value = head.split("=", 1)
            if key == "seed":
                try:
                    doc["seed"] = int(value)
                except ValueError:
                    raise ConfigParseError(f"seed must be an integer, got '{value}'", line_no)
            elif key == "input":
                parts = value.lower().split("x")
                if len(parts) != 3 or not all(p.isdigit() for p in parts):
                    raise ConfigParseError(f"input must be HxWxC, got '{value}'", line_no)
                h, w, c = (int(p) for p in parts)
                doc["input"] = {"height": h, "width": w, "channels": c}
            else:
                raise ConfigParseError(f"Unknown setting '{key}'", line_no)
            header_lines[key] = line_no
            continue

        if head not in _LAYER_TOKENS:
            raise ConfigParseError(f"Unknown layer kind '{head}'", line_no)

        layer: Dict[str, Any] = {}
        if head in _ACTIVATION_TOKENS:
            layer["kind"] = LayerKind.ACTIVATION.value
            layer["activation"] = head
        else:
            layer["kind"] = head
        for token in tokens[1:]:
            if "=" not in token:
                raise ConfigParseError(f"Expected key=value, got '{token}'", line_no)
            key, value = token.split("=", 1)
            if key not in ("k", "s", "out", "profiled"):
                raise ConfigParseError(f"Unknown layer option '{key}'", line_no)
            layer[key] = _parse_value(key, value, line_no)
        doc["layers"].append(layer)
        layer_lines.append(line_no)

    try:
        get_global_loader().validate_data(doc, NETWORK_SCHEMA)
    except DataValidationError as e:
        line_no = None
        if len(e.path) >= 2 and e.path[0] == "layers" and isinstance(e.path[1], int):
            line_no = layer_lines[e.path[1]]
        elif e.path and e.path[0] in header_lines:
            line_no = header_lines[e.path[0]]
        raise ConfigParseError(str(e), line_no)

    return doc, layer_lines


def build_network(config: str) -> NetworkSpec:
    """Build a network from configuration text.

    Weights are drawn layer by layer from one numpy generator seeded
    with the configured seed: conv/pointwise kernels uniform in
    [−a, a] with a = 1/sqrt(fan_in), BN scale in [0.5, 1.5] and shift
    in [−0.1, 0.1].

    Args:
        config: Configuration text

    Returns:
        Built NetworkSpec

    Raises:
        ConfigParseError: On malformed configuration or a stride that does
            not divide the incoming spatial dims

    Example:
        >>> net = build_network(DEFAULT_NETWORK_CONFIG)
        >>> net.s_max
        4
    """
    doc, layer_lines = parse_network_config(config)
    rng = np.random.default_rng(doc["seed"])
    h, w, c = doc["input"]["height"], doc["input"]["width"], doc["input"]["channels"]

    layers: List[LayerSpec] = []
    output_shapes: List[Tuple[int, int, int]] = []
    cum_strides: List[int] = []
    cum = 1

    for index, (entry, line_no) in enumerate(zip(doc["layers"], layer_lines)):
        kind = LayerKind(entry["kind"])
        k = entry.get("k", 1)
        default_stride = k if kind == LayerKind.POOL else 1
        s = entry.get("s", default_stride)
        if h % s or w % s:
            raise ConfigParseError(f"Stride {s} does not divide grid {h}x{w}", line_no)

        out_c = entry.get("out", c)
        layer = LayerSpec(
            index=index,
            kind=kind,
            kernel_size=k,
            stride=s,
            in_channels=c,
            out_channels=out_c,
            profiled=entry.get("profiled", False),
        )
        if kind in (LayerKind.CONV, LayerKind.POINTWISE):
            bound = 1.0 / np.sqrt(k * k * c)
            layer.weights = rng.uniform(-bound, bound, size=(out_c, k * k, c)).astype(np.float32)
        elif kind == LayerKind.BN:
            layer.scale = rng.uniform(0.5, 1.5, size=c).astype(np.float32)
            layer.shift = rng.uniform(-0.1, 0.1, size=c).astype(np.float32)
        elif kind == LayerKind.ACTIVATION:
            layer.activation = ActivationKind(entry["activation"])

        h, w, c = h // s, w // s, out_c
        cum *= s
        layers.append(layer)
        output_shapes.append((h, w, c))
        cum_strides.append(cum)

    net = NetworkSpec(
        layers=layers,
        input_shape=(doc["input"]["height"], doc["input"]["width"], doc["input"]["channels"]),
        seed=doc["seed"],
        document=doc,
        output_shapes=output_shapes,
        cum_strides=cum_strides,
    )
    net.r_max, net.s_max = effective_geometry(net)
    logger.debug(
        f"Built network: {net.num_layers} layers, R_max={net.r_max}, S_max={net.s_max}"
    )
    return net


def load_network(path: Union[str, Path]) -> NetworkSpec:
    """Build a network from a configuration file."""
    return build_network(Path(path).read_text(encoding="utf-8"))


def effective_geometry(net: NetworkSpec) -> Tuple[int, int]:
    """(R_max, S_max): largest receptive-field extent and cumulative stride.

    The extent grows by (k − 1)·(cumulative stride before the layer) per
    layer, starting from 1.
    """
    extent = 1
    r_max = 1
    s_max = 1
    cum = 1
    for layer in net.layers:
        extent += (layer.kernel_size - 1) * cum
        cum *= layer.stride
        r_max = max(r_max, extent)
        s_max = max(s_max, cum)
    return r_max, s_max


def weight_l1(net: NetworkSpec, index: int) -> float:
    """Stored ‖w^l‖₁ for layer index.

    Raises:
        InvalidArgumentError: If index is out of range
    """
    if not 0 <= index < net.num_layers:
        raise InvalidArgumentError(f"Layer index {index} out of range 0..{net.num_layers - 1}")
    return net.layers[index].l1_norm


def gather_windows(
    x: np.ndarray,
    top: np.ndarray,
    left: np.ndarray,
    kernel: int,
    fill: float = 0.0,
) -> np.ndarray:
    """Gather k×k windows with given top-left corners.

    Args:
        x: (H, W, C) array
        top: Row of each window's top-left corner
        left: Column of each window's top-left corner
        kernel: Window edge
        fill: Value for positions outside x

    Returns:
        (n, k, k, C) array
    """
    h, w, _ = x.shape
    off = np.arange(kernel)
    rows = top[:, None] + off[None, :]
    cols = left[:, None] + off[None, :]
    rows_in = (rows >= 0) & (rows < h)
    cols_in = (cols >= 0) & (cols < w)
    patches = x[np.clip(rows, 0, h - 1)[:, :, None], np.clip(cols, 0, w - 1)[:, None, :]]
    if not (rows_in.all() and cols_in.all()):
        inside = rows_in[:, :, None] & cols_in[:, None, :]
        patches = np.where(inside[..., None], patches, np.float32(fill))
    return patches


def receptive_patches(
    layer: LayerSpec,
    x: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    fill: float = 0.0,
) -> np.ndarray:
    """Input windows R^l of output positions (rows, cols)."""
    s, pad = layer.stride, layer.pad
    return gather_windows(x, rows * s - pad, cols * s - pad, layer.kernel_size, fill)


def evaluate_layer(
    layer: LayerSpec,
    x: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
) -> np.ndarray:
    """Evaluate a layer at selected output positions.

    Args:
        layer: Layer to evaluate
        x: Assembled (H, W, C) input
        rows: Output rows
        cols: Output columns

    Returns:
        (n, out_channels) float32 values
    """
    n = rows.shape[0]
    if n == 0:
        return np.zeros((0, layer.out_channels), dtype=np.float32)

    if layer.kind in (LayerKind.CONV, LayerKind.POINTWISE):
        kernel = layer.weights.reshape(layer.out_channels, -1).astype(np.float64)
        if layer.kernel_size == 1:
            flat = x[rows * layer.stride, cols * layer.stride]
        else:
            flat = receptive_patches(layer, x, rows, cols).reshape(n, -1)
        # float64 accumulation keeps results independent of the batch size
        return (flat.astype(np.float64) @ kernel.T).astype(np.float32)

    if layer.kind == LayerKind.POOL:
        patches = receptive_patches(layer, x, rows, cols, fill=-np.inf)
        return patches.max(axis=(1, 2)).astype(np.float32, copy=False)

    values = x[rows * layer.stride, cols * layer.stride]
    if layer.kind == LayerKind.BN:
        return (values * layer.scale + layer.shift).astype(np.float32, copy=False)
    if layer.activation == ActivationKind.RELU:
        return np.maximum(values, np.float32(0.0))
    if layer.activation == ActivationKind.LEAKY_RELU:
        return np.where(values > 0, values, values * np.float32(LEAKY_SLOPE)).astype(np.float32)
    return values.copy()


def all_positions(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row-major (rows, cols) of every position of a grid."""
    rows, cols = np.divmod(np.arange(height * width), width)
    return rows, cols


def dense_layer(layer: LayerSpec, x: FeatureMap) -> FeatureMap:
    """Evaluate a layer at every output position."""
    ho, wo = x.height // layer.stride, x.width // layer.stride
    rows, cols = all_positions(ho, wo)
    values = evaluate_layer(layer, x.data, rows, cols)
    return FeatureMap(values.reshape(ho, wo, layer.out_channels))


def dense_forward(net: NetworkSpec, frame: FeatureMap) -> List[FeatureMap]:
    """Dense pass returning every layer's output.

    Raises:
        InvalidArgumentError: If the frame does not match the network input
    """
    if frame.shape != net.input_shape:
        raise InvalidArgumentError(
            f"Input {frame.shape} does not match network input {net.input_shape}"
        )
    outputs: List[FeatureMap] = []
    x = frame
    for layer in net.layers:
        x = dense_layer(layer, x)
        outputs.append(x)
    return outputs


def flop_weights(net: NetworkSpec) -> Sequence[int]:
    """Dense MACs per layer (positions × cost per position)."""
    return [
        shape[0] * shape[1] * layer.macs_per_position
        for layer, shape in zip(net.layers, net.output_shapes)
    ]
