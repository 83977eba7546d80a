"""Network descriptions and their runtime instantiation.

A ``NetworkSpec`` is a pure description that can be shape-checked without
allocating weights (the full-size regression networks have ~10^8
parameters). ``Model.from_spec`` instantiates it.

Score networks are one or more convolutional columns whose outputs are
concatenated along channels and fed to a shared trunk. With a single
column the merge is the identity, which gives the single-pipeline
variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L

ARCHS = ("rgb_cnn", "ra_cnn", "ram_cnn", "mini_unet")

# filter counts and widths of the full-size regression network
COLUMN_CONVS = ((8, 7), (16, 5))
TRUNK_CONVS = ((64, 3), (64, 3))
FC_WIDTHS = (2048, 1024)
DROPOUT_RATES = (0.3, 0.5)

# mask networks: the tumour detector is half as wide as the nuclei detector
UNET_FILTERS = {"nuclei": 8, "tumour": 4}

SCORE_OFFSET = 150.0
SCORE_SCALE = 150.0


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    pool: int = 0
    rate: float = 0.0
    units: int = 0
    name: str = ""

    def __post_init__(self):
        kinds = ("conv", "maxpool", "relu", "fc", "dropout", "upsample", "concat", "flatten", "merge", "sigmoid")
        if self.kind not in kinds:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.filters < 1 or self.kernel < 1):
            raise ShapeError(f"{self.name}: conv needs positive filters and kernel")
        if self.kind in ("maxpool", "upsample") and self.pool < 1:
            raise ShapeError(f"{self.name}: pool/upsample factor must be positive")
        if self.kind == "fc" and self.units < 1:
            raise ShapeError(f"{self.name}: fc needs positive units")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ShapeError(f"{self.name}: dropout rate must lie in [0, 1)")

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "conv":
            c, h, w = shape
            return (self.filters, h, w)
        if self.kind == "maxpool":
            c, h, w = shape
            if h % self.pool or w % self.pool:
                raise ShapeError(f"{self.name}: {h}x{w} not divisible by pool {self.pool}")
            return (c, h // self.pool, w // self.pool)
        if self.kind == "upsample":
            c, h, w = shape
            return (c, h * self.pool, w * self.pool)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "fc":
            if len(shape) != 1:
                raise ShapeError(f"{self.name}: fc expects a flat input, got {shape}")
            return (self.units,)
        return shape


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    scale: int
    input_res: int
    # channels per input column
    input_channels: tuple[int, ...]
    columns: tuple[tuple[LayerSpec, ...], ...] = ()
    trunk: tuple[LayerSpec, ...] = ()
    merge: str = "concat"
    task: str = "score"
    output_offset: float = SCORE_OFFSET
    output_scale: float = SCORE_SCALE
    unet_depth: int = 0
    unet_filters: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def input_shapes(self) -> tuple[tuple[int, int, int], ...]:
        return tuple((c, self.input_res, self.input_res) for c in self.input_channels)

    def shape_walk(self) -> list[tuple[str, tuple[int, ...]]]:
        """Static (layer name, output shape) walk; raises ShapeError on mismatch."""
        if self.arch == "mini_unet":
            return _unet_walk(self)
        walk = []
        merged = []
        for ci, (col, shape) in enumerate(zip(self.columns, self.input_shapes)):
            walk.append((f"col{ci}.input", shape))
            for layer in col:
                shape = layer.out_shape(shape)
                walk.append((f"col{ci}.{layer.name}", shape))
            merged.append(shape)
        spatial = {s[1:] for s in merged}
        if len(spatial) != 1:
            raise ShapeError(f"columns disagree on spatial size at merge: {merged}")
        shape = (sum(s[0] for s in merged),) + merged[0][1:]
        walk.append(("merge", shape))
        for layer in self.trunk:
            shape = layer.out_shape(shape)
            walk.append((layer.name, shape))
        if shape != (1,):
            raise ShapeError(f"score network must end in a single output, got {shape}")
        return walk

    def parameter_count(self) -> int:
        total = 0
        if self.arch == "mini_unet":
            for name, cin, cout, k in _unet_convs(self):
                total += cout * cin * k * k + cout
            return total
        for col, shape in zip(self.columns, self.input_shapes):
            total += _count(col, shape)
        walk = dict(self.shape_walk())
        total += _count(self.trunk, walk["merge"])
        return total


def _count(layers, shape) -> int:
    total = 0
    for layer in layers:
        if layer.kind == "conv":
            total += layer.filters * shape[0] * layer.kernel**2 + layer.filters
        elif layer.kind == "fc":
            total += shape[0] * layer.units + layer.units
        shape = layer.out_shape(shape)
    return total


def _conv_block(prefix: str, filters: int, kernel: int) -> tuple[LayerSpec, ...]:
    return (
        LayerSpec("conv", filters=filters, kernel=kernel, name=f"{prefix}"),
        LayerSpec("relu", name=f"{prefix}.relu"),
        LayerSpec("maxpool", pool=2, name=f"{prefix}.pool"),
    )


def build_network(
    kind: str,
    scale: int = 1,
    input_res: int = 512,
    unet_depth: int = 2,
    unet_filters: int = 8,
    unet_channels: int = 1,
) -> NetworkSpec:
    """Describe one of the four architectures.

    ``scale`` divides every filter count and fully-connected width of the
    full-size design; ``input_res`` sets the (square) input size.
    """
    if kind not in ARCHS:
        raise ShapeError(f"unknown architecture {kind!r}; choose from {ARCHS}")
    if scale < 1:
        raise ShapeError("scale must be >= 1")
    if input_res < 1 or input_res & (input_res - 1):
        raise ShapeError("input_res must be a power of two")

    if kind == "mini_unet":
        if unet_filters % scale:
            raise ShapeError(f"scale {scale} does not divide base filters {unet_filters}")
        if input_res < 2**unet_depth:
            raise ShapeError("input too small for the requested depth")
        spec = NetworkSpec(
            arch=kind,
            scale=scale,
            input_res=input_res,
            input_channels=(unet_channels,),
            task="mask",
            unet_depth=unet_depth,
            unet_filters=unet_filters // scale,
            output_offset=0.0,
            output_scale=1.0,
        )
        spec.shape_walk()
        return spec

    widths = [f for f, _ in COLUMN_CONVS + TRUNK_CONVS] + list(FC_WIDTHS)
    bad = [w for w in widths if w % scale]
    if bad:
        raise ShapeError(f"scale {scale} does not divide filter counts {bad}")
    if input_res < 16:
        raise ShapeError("input_res must be >= 16 for four 2x2 poolings")

    column = _conv_block("conv1", COLUMN_CONVS[0][0] // scale, COLUMN_CONVS[0][1]) + _conv_block(
        "conv2", COLUMN_CONVS[1][0] // scale, COLUMN_CONVS[1][1]
    )
    trunk = (
        _conv_block("conv3", TRUNK_CONVS[0][0] // scale, TRUNK_CONVS[0][1])
        + _conv_block("conv4", TRUNK_CONVS[1][0] // scale, TRUNK_CONVS[1][1])
        + (
            LayerSpec("flatten", name="flatten"),
            LayerSpec("fc", units=FC_WIDTHS[0] // scale, name="fc1"),
            LayerSpec("relu", name="fc1.relu"),
            LayerSpec("dropout", rate=DROPOUT_RATES[0], name="fc1.dropout"),
            LayerSpec("fc", units=FC_WIDTHS[1] // scale, name="fc2"),
            LayerSpec("relu", name="fc2.relu"),
            LayerSpec("dropout", rate=DROPOUT_RATES[1], name="fc2.dropout"),
            LayerSpec("fc", units=1, name="out"),
        )
    )
    channels = {"rgb_cnn": (3,), "ra_cnn": (2,), "ram_cnn": (1, 1)}[kind]
    spec = NetworkSpec(
        arch=kind,
        scale=scale,
        input_res=input_res,
        input_channels=channels,
        columns=tuple(column for _ in channels),
        trunk=trunk,
    )
    spec.shape_walk()
    return spec


def with_dropout(spec: NetworkSpec, rates: tuple[float, float]) -> NetworkSpec:
    it = iter(rates)
    trunk = tuple(replace(l, rate=next(it)) if l.kind == "dropout" else l for l in spec.trunk)
    return replace(spec, trunk=trunk)


def _unet_convs(spec: NetworkSpec):
    """(name, in_channels, out_channels, kernel) for every U-Net conv."""
    f, d = spec.unet_filters, spec.unet_depth
    cin = spec.input_channels[0]
    convs = []
    for lvl in range(d):
        cout = f * 2**lvl
        convs += [(f"down{lvl}.conv_a", cin, cout, 3), (f"down{lvl}.conv_b", cout, cout, 3)]
        cin = cout
    cout = f * 2**d
    convs += [("bottom.conv_a", cin, cout, 3), ("bottom.conv_b", cout, cout, 3)]
    cin = cout
    for lvl in reversed(range(d)):
        skip = f * 2**lvl
        convs += [(f"up{lvl}.conv_a", cin + skip, skip, 3), (f"up{lvl}.conv_b", skip, skip, 3)]
        cin = skip
    convs.append(("head", cin, 1, 1))
    return convs


def _unet_walk(spec: NetworkSpec):
    res = spec.input_res
    walk = [("input", spec.input_shapes[0])]
    convs = {name: (cin, cout) for name, cin, cout, _ in _unet_convs(spec)}
    for lvl in range(spec.unet_depth):
        walk.append((f"down{lvl}", (convs[f"down{lvl}.conv_b"][1], res, res)))
        if res % 2:
            raise ShapeError("U-Net input not divisible by 2 at every level")
        res //= 2
        walk.append((f"down{lvl}.pool", (convs[f"down{lvl}.conv_b"][1], res, res)))
    walk.append(("bottom", (convs["bottom.conv_b"][1], res, res)))
    for lvl in reversed(range(spec.unet_depth)):
        res *= 2
        cin, _ = convs[f"up{lvl}.conv_a"]
        walk.append((f"up{lvl}.concat", (cin, res, res)))
        walk.append((f"up{lvl}", (convs[f"up{lvl}.conv_b"][1], res, res)))
    walk.append(("head", (1, res, res)))
    return walk


# -- runtime ----------------------------------------------------------------


def _instantiate(layer_specs, in_shape, rng, dtype, zero_head=False):
    out = []
    shape = in_shape
    for ls in layer_specs:
        if ls.kind == "conv":
            layer = L.Conv2D(shape[0], ls.filters, ls.kernel, rng, dtype)
        elif ls.kind == "maxpool":
            layer = L.MaxPool2D(ls.pool)
        elif ls.kind == "relu":
            layer = L.ReLU()
        elif ls.kind == "sigmoid":
            layer = L.Sigmoid()
        elif ls.kind == "flatten":
            layer = L.Flatten()
        elif ls.kind == "fc":
            layer = L.Dense(shape[0], ls.units, rng, dtype, zero_init=zero_head and ls.name == "out")
        elif ls.kind == "dropout":
            layer = L.Dropout(ls.rate)
        elif ls.kind == "upsample":
            layer = L.Upsample2D(ls.pool)
        else:
            raise ShapeError(f"layer kind {ls.kind!r} cannot be instantiated inside a sequence")
        layer.name = ls.name
        out.append(layer)
        shape = ls.out_shape(shape)
    return L.Sequential(out)


class ColumnNet:
    """Independent columns, channel-concatenated, then a shared trunk."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32, zero_head=False):
        self.columns = [
            _instantiate(col, shape, rng, dtype) for col, shape in zip(spec.columns, spec.input_shapes)
        ]
        merge_shape = dict(spec.shape_walk())["merge"]
        self.trunk = _instantiate(spec.trunk, merge_shape, rng, dtype, zero_head)
        self.pre_merge: list[np.ndarray] = []

    def forward(self, inputs, train=False):
        if len(inputs) != len(self.columns):
            raise ShapeError(f"expected {len(self.columns)} inputs, got {len(inputs)}")
        self.pre_merge = [col.forward(x, train) for col, x in zip(self.columns, inputs)]
        self._sizes = [p.shape[1] for p in self.pre_merge]
        merged = L.concat_channels(self.pre_merge) if len(self.pre_merge) > 1 else self.pre_merge[0]
        return self.trunk.forward(merged, train)

    def backward(self, dout):
        dmerged = self.trunk.backward(dout)
        parts = L.split_channels(dmerged, self._sizes) if len(self.columns) > 1 else [dmerged]
        return [col.backward(g) for col, g in zip(self.columns, parts)]

    def named_layers(self):
        for ci, col in enumerate(self.columns):
            yield from col.named_layers(f"col{ci}.")
        yield from self.trunk.named_layers("trunk.")


class UNet:
    """Symmetric encoder/decoder with skip concatenation and a sigmoid head."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        self.depth = spec.unet_depth
        self.blocks: dict[str, L.Sequential] = {}
        convs = _unet_convs(spec)
        pairs = {}
        for name, cin, cout, k in convs:
            block, _ = name.split(".") if "." in name else (name, "")
            pairs.setdefault(block, []).append(L.Conv2D(cin, cout, k, rng, dtype))
        for block, cs in pairs.items():
            if block == "head":
                self.blocks[block] = L.Sequential([cs[0], L.Sigmoid()])
            else:
                self.blocks[block] = L.Sequential([cs[0], L.ReLU(), cs[1], L.ReLU()])
        self.pools = [L.MaxPool2D(2) for _ in range(self.depth)]
        self.ups = [L.Upsample2D(2) for _ in range(self.depth)]

    def forward(self, inputs, train=False):
        x = inputs[0]
        skips = []
        for lvl in range(self.depth):
            x = self.blocks[f"down{lvl}"].forward(x, train)
            skips.append(x)
            x = self.pools[lvl].forward(x, train)
        x = self.blocks["bottom"].forward(x, train)
        self._skip_sizes = []
        for lvl in reversed(range(self.depth)):
            x = self.ups[lvl].forward(x, train)
            self._skip_sizes.append((x.shape[1], skips[lvl].shape[1]))
            x = L.concat_channels([x, skips[lvl]])
            x = self.blocks[f"up{lvl}"].forward(x, train)
        return self.blocks["head"].forward(x, train)

    def backward(self, dout):
        g = self.blocks["head"].backward(dout)
        dskips = [None] * self.depth
        for lvl in range(self.depth):
            g = self.blocks[f"up{lvl}"].backward(g)
            g, dskip = L.split_channels(g, list(self._skip_sizes[self.depth - 1 - lvl]))
            dskips[lvl] = dskip
            g = self.ups[lvl].backward(g)
        g = self.blocks["bottom"].backward(g)
        for lvl in reversed(range(self.depth)):
            g = self.pools[lvl].backward(g)
            g = self.blocks[f"down{lvl}"].backward(g + dskips[lvl])
        return [g]

    def named_layers(self):
        for block, seq in self.blocks.items():
            yield from seq.named_layers(f"{block}.")


class Model:
    """An instantiated network plus its output transform and training record."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32, zero_head: bool = False):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        if spec.arch == "mini_unet":
            self.net = UNet(spec, rng, dtype)
        else:
            self.net = ColumnNet(spec, rng, dtype, zero_head)
        self.reseed(seed)
        self.loss_curve: list[float] = []

    @classmethod
    def from_spec(cls, spec: NetworkSpec, seed: int = 0, dtype=np.float32, zero_head: bool = False) -> "Model":
        return cls(spec, seed, dtype, zero_head)

    def reseed(self, seed) -> None:
        """Reset the dropout random stream."""
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed).spawn(2)[1]
        rng = np.random.default_rng(ss)
        for _, layer in self.named_layers():
            if isinstance(layer, L.Dropout):
                layer.rng = rng

    def named_layers(self):
        return self.net.named_layers()

    def set_input_grad(self, enabled: bool) -> None:
        """Toggle the gradient with respect to network inputs (backward returns None when off)."""
        firsts = [col.layers[0] for col in self.net.columns] if isinstance(self.net, ColumnNet) else [
            self.net.blocks["down0"].layers[0]
        ]
        for layer in firsts:
            layer.input_grad = enabled

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for lname, layer in self.named_layers():
            for key, value in layer.params.items():
                out.append((f"{lname}.{key}", value))
        return out

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[key] for _, layer in self.named_layers() for key in layer.params]

    def _check_inputs(self, inputs):
        inputs = [np.asarray(x, dtype=self.dtype) for x in inputs]
        for x, shape in zip(inputs, self.spec.input_shapes):
            if x.ndim != 4 or x.shape[1:] != shape:
                raise ShapeError(f"input shape {x.shape[1:]} does not match expected {shape}")
        return inputs

    def forward(self, inputs, train: bool = False) -> np.ndarray:
        """Scores as (n,) for score networks, probabilities (n, 1, h, w) for masks."""
        out = self.net.forward(self._check_inputs(inputs), train)
        if self.spec.task == "score":
            return self.spec.output_offset + self.spec.output_scale * out[:, 0]
        return out

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        if self.spec.task == "score":
            dout = (self.spec.output_scale * np.asarray(dout, dtype=self.dtype))[:, None]
        return self.net.backward(dout)

    def predict(self, inputs, batch_size: int = 64) -> np.ndarray:
        inputs = [np.asarray(x) for x in inputs]
        n = inputs[0].shape[0]
        outs = [self.forward([x[i : i + batch_size] for x in inputs], train=False) for i in range(0, n, batch_size)]
        out = np.concatenate(outs, axis=0) if outs else np.zeros((0,))
        if self.spec.task == "score":
            return np.clip(out.astype(np.float64), 0.0, 300.0)
        return out
