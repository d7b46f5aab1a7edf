"""Network building blocks: convolutional layers, dense blocks and transitions.

Every convolutional layer applies convolution, ReLU, batch normalization and
dropout, in that order.
"""
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .optim import he_init
from .tensor import Tensor

__all__ = [
    "Module", "ConvLayerSpec", "DenseBlockSpec", "ConvLayer", "Bottleneck",
    "DenseBlock", "TransitionDown", "TransitionUp", "Classifier",
]


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    def __init__(self):
        self.training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def _own(self, kind):
        for name, value in vars(self).items():
            if kind == "param" and isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif kind == "buffer" and isinstance(value, np.ndarray):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, p in self._own("param"):
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, b in self._own("buffer"):
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, p in own.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {state[k].shape}")
            p.data[...] = state[k]
        for k, b in bufs.items():
            b[...] = state[k]

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@dataclass(frozen=True)
class ConvLayerSpec:
    """Hyperparameters of one convolutional layer.

    For ``dims == 3`` the kernel spans ``temporal`` frames and the time axis
    is padded according to ``temporal_padding``.
    """

    kernel: int
    maps: int
    stride: int = 1
    dilation: int = 1
    dropout: float = 0.0
    dims: int = 2
    temporal: int = 1
    temporal_padding: str = "same"

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        if self.dims == 3 and self.stride != 1:
            raise ValueError("3D layers are stride 1")


@dataclass(frozen=True)
class DenseBlockSpec:
    layers: int
    growth: int

    def __post_init__(self):
        if self.layers < 1 or self.growth < 1:
            raise ValueError("dense block needs layers >= 1 and growth >= 1")


class ConvLayer(Module):
    """conv -> ReLU -> batch norm -> dropout."""

    def __init__(self, in_maps, spec, rng, momentum=0.9):
        super().__init__()
        self.spec = spec
        self.in_maps = in_maps
        k = spec.kernel
        if spec.dims == 2:
            shape = (spec.maps, in_maps, k, k)
        else:
            shape = (spec.maps, in_maps, spec.temporal, k, k)
        self.weight = he_init(shape, int(np.prod(shape[1:])), rng)
        self.bias = Tensor(np.zeros(spec.maps), requires_grad=True)
        self.gamma = Tensor(np.ones(spec.maps), requires_grad=True)
        self.beta = Tensor(np.zeros(spec.maps), requires_grad=True)
        self.running_mean = np.zeros(spec.maps)
        self.running_var = np.ones(spec.maps)
        self.momentum = momentum
        # switched off only while re-estimating batch-norm statistics
        self.dropout_active = True

    @property
    def out_maps(self):
        return self.spec.maps

    def forward(self, x, rng=None):
        s = self.spec
        if s.dims == 2:
            y = F.conv2d(x, self.weight, self.bias, stride=s.stride, dilation=s.dilation)
        else:
            y = F.conv3d(x, self.weight, self.bias, spatial_dilation=s.dilation,
                         temporal_padding=s.temporal_padding)
        y = F.relu(y)
        y = F.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var,
                         training=self.training, momentum=self.momentum,
                         channel_axis=y.ndim - s.dims - 1)
        if s.dropout and self.training and self.dropout_active:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            y = F.dropout(y, s.dropout, True, rng)
        return y


class Bottleneck(ConvLayer):
    """1x1 convolutional layer used to compress the feature axis."""

    def __init__(self, in_maps, out_maps, rng, dropout=0.0):
        if out_maps < 1:
            raise ValueError("bottleneck needs at least one output map")
        super().__init__(in_maps, ConvLayerSpec(1, out_maps, dropout=dropout), rng)


class DenseBlock(Module):
    """``L`` layers, each seeing the block input plus all earlier layer outputs.

    Each layer is a ``2G`` bottleneck followed by a 3x3 layer emitting ``G``
    maps. The block returns only the ``L * G`` newly computed maps.
    """

    def __init__(self, in_maps, spec, rng, dropout=0.0, kernel=3):
        super().__init__()
        self.spec = spec
        self.in_maps = in_maps
        g = spec.growth
        self.bottlenecks = []
        self.convs = []
        for layer in range(spec.layers):
            c = in_maps + layer * g
            self.bottlenecks.append(Bottleneck(c, 2 * g, rng, dropout))
            self.convs.append(ConvLayer(2 * g, ConvLayerSpec(kernel, g, dropout=dropout), rng))

    @property
    def out_maps(self):
        return self.spec.layers * self.spec.growth

    def forward(self, x, rng=None):
        feats = [x]
        new = []
        for bn, conv in zip(self.bottlenecks, self.convs):
            inp = feats[0] if len(feats) == 1 else F.concat(feats, axis=1)
            y = conv(bn(inp, rng), rng)
            feats.append(y)
            new.append(y)
        return new[0] if len(new) == 1 else F.concat(new, axis=1)


class TransitionDown(Module):
    """Halving bottleneck followed by a 5x5 stride-2 layer."""

    def __init__(self, in_maps, rng, dropout=0.0, kernel=5):
        super().__init__()
        half = max(in_maps // 2, 1)
        self.bottleneck = Bottleneck(in_maps, half, rng, dropout)
        self.conv = ConvLayer(half, ConvLayerSpec(kernel, half, stride=2, dropout=dropout), rng)

    @property
    def out_maps(self):
        return self.conv.out_maps

    def forward(self, x, rng=None):
        return self.conv(self.bottleneck(x, rng), rng)


class TransitionUp(Module):
    """2x2 stride-2 transposed conv, optional skip concat, halving bottleneck, dense block.

    With ``skip_maps=0`` the stage has no skip connection.
    """

    def __init__(self, in_maps, skip_maps, block, rng, dropout=0.0):
        super().__init__()
        self.skip_maps = skip_maps
        self.up_weight = he_init((in_maps, in_maps, 2, 2), in_maps, rng)
        self.up_bias = Tensor(np.zeros(in_maps), requires_grad=True)
        cat = in_maps + skip_maps
        self.bottleneck = Bottleneck(cat, max(cat // 2, 1), rng, dropout)
        self.block = DenseBlock(self.bottleneck.out_maps, block, rng, dropout)

    @property
    def out_maps(self):
        return self.block.out_maps

    def forward(self, x, skip=None, rng=None):
        y = F.transposed_conv2d(x, self.up_weight, self.up_bias, stride=2)
        if self.skip_maps:
            if skip is None:
                raise ValueError("this upsampling stage expects a skip connection")
            if skip.shape[-2:] != y.shape[-2:]:
                raise ValueError(
                    f"skip connection is {skip.shape[-2:]} but upsampled maps are {y.shape[-2:]}"
                )
            y = F.concat([y, skip], axis=1)
        return self.block(self.bottleneck(y, rng), rng)


class Classifier(Module):
    """Final linear 1x1 convolution producing per-class logits."""

    def __init__(self, in_maps, n_classes, rng):
        super().__init__()
        self.weight = he_init((n_classes, in_maps, 1, 1), in_maps, rng)
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True)

    def forward(self, x, rng=None):
        return F.conv2d(x, self.weight, self.bias)
