"""
SmokeNet - The two-path encoder-decoder FCN and its ablation variants

Path 1 (coarse) is the five VGG16 convolution blocks (2, 2, 3, 3, 3 convs,
4 max-pools) followed by an asymmetric decoder of 9 convs and 4 upsamplings
with two skip concatenations. Path 2 (fine) is the first three VGG16 blocks
(7 convs, 2 pools) with a 4-conv decoder, 2 upsamplings and two skip
concatenations. Each path ends in a 1x1 conv + sigmoid; the two probability
maps are added and passed through a final 1x1 conv + sigmoid.

The architecture is held as a flat list of `LayerSpec`s built from a
`NetConfig`. The same list drives parameter creation, the spatial trace and
the forward interpreter, so the three can never disagree.

Skip wiring (encoder output taken after the block's last conv, before pooling):
- Path 1: block 4 -> decoder block 6 (h/8), block 3 -> decoder block 7 (h/4)
- Path 2: block 2 -> decoder block 4 (h/2), block 1 -> decoder block 5 (h)
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.autograd import kernels
from src.autograd.gradcheck import GradCheckResult, grad_check
from src.autograd.tensor import CHECK_DTYPE, TRAIN_DTYPE, Param, ShapeError, Tensor
from src.models import FusionMode, NetConfig

logger = logging.getLogger("smokeseg.smokenet")

INPUT_CHANNELS = 3
SPATIAL_MULTIPLE = 16

CONV_KINDS = ("conv3x3", "conv1x1", "deconv2x2", "skip_proj")


class InputShapeError(ShapeError):
    """Raised when a forward input violates the (n, 3, 16k, 16m) contract."""


# =============================================================================
# LAYER LIST
# =============================================================================


@dataclass(frozen=True)
class LayerSpec:
    """
    One step of the network.

    kinds:
        conv3x3 / conv1x1   - convolution (+ activation) on the trunk
        deconv2x2           - learned 2x upsampling on the trunk
        skip_proj           - 1x1 conv applied to a stored skip source (trunk unchanged)
        maxpool / upsample  - 2x resampling on the trunk
        concat / add        - merge the trunk with a stored output named by `source`
        predict_join        - start of fusion: add the coarse and fine maps
    """

    name: str
    kind: str
    cin: int
    cout: int
    scale: int
    activation: str | None = None
    source: str | None = None

    @property
    def kernel_size(self) -> int:
        return {"conv3x3": 3, "conv1x1": 1, "deconv2x2": 2, "skip_proj": 1}.get(self.kind, 0)

    @property
    def param_count(self) -> int:
        k = self.kernel_size
        return k * k * self.cin * self.cout + self.cout if self.kind in CONV_KINDS else 0

    @property
    def fan_in(self) -> int:
        # a 2x2 stride-2 scatter feeds each output site from one input site
        return self.cin if self.kind == "deconv2x2" else self.kernel_size**2 * self.cin

    @property
    def path(self) -> str:
        return self.name.split(".", 1)[0]


@dataclass
class _PathBuilder:
    """Accumulates LayerSpecs while tracking trunk channels and spatial divisor."""

    prefix: str
    config: NetConfig
    channels: int = INPUT_CHANNELS
    scale: int = 1
    layers: list[LayerSpec] = field(default_factory=list)
    stored: dict[str, LayerSpec] = field(default_factory=dict)

    def conv(self, block: str, index: int, base: int, *, kernel: int = 3, activation: str = "relu") -> str:
        cout = 1 if base == 1 else self.config.channels(base)
        name = f"{self.prefix}.{block}.conv{index}" if kernel == 3 else f"{self.prefix}.{block}"
        spec = LayerSpec(name, f"conv{kernel}x{kernel}", self.channels, cout, self.scale, activation)
        self.layers.append(spec)
        self.stored[name] = spec
        self.channels = cout
        return name

    def pool(self, block: str) -> None:
        self.scale *= 2
        name = f"{self.prefix}.{block}.pool"
        self.layers.append(LayerSpec(name, "maxpool", self.channels, self.channels, self.scale))

    def upsample(self, block: str) -> None:
        if self.config.fusion_mode is FusionMode.DECONV_ADD:
            kind, name = "deconv2x2", f"{self.prefix}.{block}.deconv"
        else:
            kind, name = "upsample", f"{self.prefix}.{block}.upsample"
        self.layers.append(LayerSpec(name, kind, self.channels, self.channels, self.scale // 2))
        self.scale //= 2

    def merge(self, block: str, source: str) -> None:
        skip = self.stored[source]
        if skip.scale != self.scale:
            raise ShapeError(f"{self.prefix}.{block}: skip {source} at 1/{skip.scale} but trunk at 1/{self.scale}")
        if self.config.fusion_mode is FusionMode.UPSAMPLE_CONCAT:
            self.layers.append(
                LayerSpec(
                    f"{self.prefix}.{block}.concat",
                    "concat",
                    self.channels,
                    self.channels + skip.cout,
                    self.scale,
                    source=source,
                )
            )
            self.channels += skip.cout
            return
        if skip.cout != self.channels:
            proj = f"{self.prefix}.{block}.skip_proj"
            self.layers.append(LayerSpec(proj, "skip_proj", skip.cout, self.channels, self.scale, source=source))
            self.stored[proj] = self.layers[-1]
            source = proj
        self.layers.append(
            LayerSpec(f"{self.prefix}.{block}.add", "add", self.channels, self.channels, self.scale, source=source)
        )


def _coarse_path(config: NetConfig) -> list[LayerSpec]:
    b = _PathBuilder("p1", config)
    for block, base, count in (("block1", 64, 2), ("block2", 128, 2), ("block3", 256, 3), ("block4", 512, 3)):
        for i in range(1, count + 1):
            b.conv(block, i, base)
        b.pool(block)
    for i in range(1, 4):
        b.conv("block5", i, 512)

    b.upsample("block6")
    b.conv("block6", 1, 512)
    if config.skips_path1:
        b.merge("block6", "p1.block4.conv3")
    b.upsample("block7")
    b.conv("block7", 1, 512)
    if config.skips_path1:
        b.merge("block7", "p1.block3.conv3")
    for i in range(1, 4):
        b.conv("block8", i, 256)
    b.upsample("block9")
    b.conv("block9", 1, 128)
    b.conv("block9", 2, 128)
    b.upsample("block10")
    b.conv("block10", 1, 64)
    b.conv("block10", 2, 64)
    b.conv("predict", 0, 1, kernel=1, activation="sigmoid")
    return b.layers


def _fine_path(config: NetConfig) -> list[LayerSpec]:
    b = _PathBuilder("p2", config)
    for block, base, count in (("block1", 64, 2), ("block2", 128, 2)):
        for i in range(1, count + 1):
            b.conv(block, i, base)
        b.pool(block)
    for i in range(1, 4):
        b.conv("block3", i, 256)

    b.upsample("block4")
    b.conv("block4", 1, 256)
    if config.skips_path2:
        b.merge("block4", "p2.block2.conv2")
    b.upsample("block5")
    b.conv("block5", 1, 256)
    if config.skips_path2:
        b.merge("block5", "p2.block1.conv2")
    b.conv("block6", 1, 64)
    b.conv("block6", 2, 64)
    b.conv("predict", 0, 1, kernel=1, activation="sigmoid")
    return b.layers


def build_layers(config: NetConfig) -> list[LayerSpec]:
    """The complete ordered layer list: path 1, path 2 (if enabled), fusion."""
    layers = _coarse_path(config)
    if config.use_path2:
        layers += _fine_path(config)
        layers.append(LayerSpec("fusion.add", "predict_join", 1, 1, 1, source="p2.predict"))
    layers.append(LayerSpec("fusion.conv", "conv1x1", 1, 1, 1, activation="sigmoid"))
    return layers


# =============================================================================
# SPATIAL TRACE
# =============================================================================


@dataclass(frozen=True)
class TraceRow:
    """Output shape of one layer for a concrete input size."""

    name: str
    kind: str
    channels: int
    height: int
    width: int
    source: str | None = None


def spatial_trace(config: NetConfig, h: int, w: int) -> list[TraceRow]:
    """
    Per-layer output shapes for an (h, w) input.

    Raises:
        InputShapeError: If h or w is not a multiple of 16
        ShapeError: If a merge site would combine mismatched spatial sizes
    """
    _check_spatial(h, w)
    rows: list[TraceRow] = []
    shapes: dict[str, tuple[int, int, int]] = {}
    for layer in build_layers(config):
        shape = (layer.cout, h // layer.scale, w // layer.scale)
        if layer.source is not None and layer.kind != "skip_proj":
            skip = shapes[layer.source]
            if skip[1:] != shape[1:]:
                raise ShapeError(f"{layer.name}: trunk {shape[1:]} vs skip {layer.source} {skip[1:]}")
        shapes[layer.name] = shape
        rows.append(TraceRow(layer.name, layer.kind, *shape, source=layer.source))
    return rows


def _check_spatial(h: int, w: int) -> None:
    if h < SPATIAL_MULTIPLE or w < SPATIAL_MULTIPLE or h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
        raise InputShapeError(
            f"input height and width must be positive multiples of {SPATIAL_MULTIPLE} "
            f"(path 1 pools four times), got {h}x{w}"
        )


# =============================================================================
# NETWORK
# =============================================================================


def truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) samples redrawn until all lie within +/- 2 std."""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


@dataclass
class PredictionBundle:
    """Coarse, fine (absent without path 2) and fused probability maps, each (n, 1, h, w)."""

    coarse: Tensor
    fine: Tensor | None
    fused: Tensor


class SmokeNet:
    """
    A built two-path network: layer list plus named parameters.

    Forward passes never mutate parameters, so several threads may run
    inference on one instance; training mutation belongs to a single thread.
    """

    def __init__(self, config: NetConfig, layers: list[LayerSpec], params: dict[str, Param]):
        self.config = config
        self.layers = layers
        self._params = params

    @property
    def params(self) -> list[Param]:
        """Parameters in layer order (weight before bias)."""
        return list(self._params.values())

    def param(self, name: str) -> Param:
        return self._params[name]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._params.values())).value.dtype

    def astype(self, dtype: type[np.floating]) -> "SmokeNet":
        """Switch every parameter (and buffer) to `dtype` in place."""
        for param in self._params.values():
            param.astype(dtype)
        return self

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def parameter_report(self) -> list[tuple[str, int]]:
        """(layer name, parameter count) for every parameterized layer."""
        return [(layer.name, layer.param_count) for layer in self.layers if layer.param_count]

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def forward(self, x: Tensor | np.ndarray) -> PredictionBundle:
        """
        Run both paths and the fusion head.

        Args:
            x: (n, 3, h, w) with h, w multiples of 16, values in [0, 1]

        Returns:
            PredictionBundle of (n, 1, h, w) probability maps

        Raises:
            InputShapeError: On a channel count other than 3 or a spatial size not divisible by 16
        """
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.ndim != 4 or data.shape[1] != INPUT_CHANNELS:
            raise InputShapeError(f"expected input of shape (n, 3, h, w), got {data.shape}")
        _check_spatial(data.shape[2], data.shape[3])

        image = x if isinstance(x, Tensor) and x.dtype == self.dtype else Tensor(data.astype(self.dtype))
        outputs: dict[str, Tensor] = {}
        trunk = image
        first_fine = self._first_fine_layer

        for layer in self.layers:
            if layer.name == first_fine:
                trunk = image
            produced = self._apply(layer, trunk, outputs)
            outputs[layer.name] = produced
            if layer.kind != "skip_proj":
                trunk = produced

        return PredictionBundle(
            coarse=outputs["p1.predict"],
            fine=outputs.get("p2.predict"),
            fused=outputs["fusion.conv"],
        )

    @property
    def _first_fine_layer(self) -> str | None:
        return next((layer.name for layer in self.layers if layer.path == "p2"), None)

    def _apply(self, layer: LayerSpec, trunk: Tensor, outputs: dict[str, Tensor]) -> Tensor:
        """Evaluate one layer; skip_proj reads its stored source instead of the trunk."""
        kind = layer.kind
        if kind in ("conv3x3", "conv1x1"):
            out = kernels.conv2d(trunk, self._params[f"{layer.name}.weight"], self._params[f"{layer.name}.bias"])
            return kernels.relu(out) if layer.activation == "relu" else kernels.sigmoid(out)
        if kind == "maxpool":
            pooled, _ = kernels.maxpool2x2(trunk)
            return pooled
        if kind == "upsample":
            return kernels.upsample_nearest2x(trunk)
        if kind == "deconv2x2":
            return kernels.conv_transpose2d(
                trunk, self._params[f"{layer.name}.weight"], self._params[f"{layer.name}.bias"]
            )
        if kind == "skip_proj":
            assert layer.source is not None
            return kernels.conv2d(
                outputs[layer.source], self._params[f"{layer.name}.weight"], self._params[f"{layer.name}.bias"]
            )
        if kind == "concat":
            assert layer.source is not None
            return kernels.concat_channels(trunk, outputs[layer.source])
        if kind == "add":
            assert layer.source is not None
            return kernels.add(trunk, outputs[layer.source])
        if kind == "predict_join":
            return kernels.add(outputs["p1.predict"], outputs["p2.predict"])
        raise ValueError(f"Unknown layer kind {kind!r} at {layer.name}")


def build_network(config: NetConfig, dtype: type[np.floating] = TRAIN_DTYPE) -> SmokeNet:
    """
    Build the layer list for `config` and initialize its parameters.

    Weights: truncated normal (std sqrt(2 / fan_in), cut at +/- 2 std) seeded by
    config.seed, drawn in layer order. Biases: zero.
    """
    layers = build_layers(config)
    rng = np.random.default_rng(config.seed)
    params: dict[str, Param] = {}

    for layer in layers:
        if layer.kind not in CONV_KINDS:
            continue
        k = layer.kernel_size
        std = float(np.sqrt(2.0 / layer.fan_in))
        weight = truncated_normal(rng, (k, k, layer.cin, layer.cout), std).astype(dtype)
        params[f"{layer.name}.weight"] = Param(f"{layer.name}.weight", weight)
        params[f"{layer.name}.bias"] = Param(f"{layer.name}.bias", np.zeros(layer.cout, dtype=dtype))

    net = SmokeNet(config, layers, params)
    logger.info(
        f"Built {config.variant_name} network at width {config.width_scale}: "
        f"{len(layers)} layers, {net.parameter_count()} parameters"
    )
    return net


def grad_check_network(
    config: NetConfig,
    *,
    size: int = 16,
    seed: int = 0,
    max_entries_per_tensor: int | None = 4,
) -> GradCheckResult:
    """
    Gradient-check the fused output of a whole network in 64-bit precision.

    Every parameter tensor and the input image are sampled; entries whose
    perturbation flips a ReLU or pooling switch, or whose gradient is lost in
    rounding noise, are skipped.
    """
    net = build_network(config, dtype=CHECK_DTYPE)
    image = np.random.default_rng(seed).uniform(0.0, 1.0, size=(1, INPUT_CHANNELS, size, size))
    return grad_check(
        lambda xs: net.forward(xs[0]).fused,
        [image],
        net.params,
        target=f"network:{config.variant_name}",
        seed=seed,
        max_entries_per_tensor=max_entries_per_tensor,
        skip_kinks=True,
    )
