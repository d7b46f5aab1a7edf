"""Sequential encoder-decoder FCN for crop/weed segmentation of image sequences.

A shared visual encoder turns every frame into a visual code. Each code is
decoded separately into visual features. All codes of a sequence are also
stacked along a time axis and fused by three 3D convolutional layers into a
sequence code. A separate decoder upsamples the sequence code into sequence
features. A merge head combines both and emits per-pixel class distributions.
"""
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .blocks import (
    Bottleneck, Classifier, ConvLayer, ConvLayerSpec, DenseBlock,
    DenseBlockSpec, Module, TransitionDown, TransitionUp,
)
from .preprocess import preprocess_batch
from .tensor import Tensor, as_tensor, no_grad

__all__ = [
    "NetworkConfig", "SequenceSample", "SequentialFCN", "build_network",
    "forward_sequence", "receptive_field", "stack_receptive_field",
]


@dataclass
class NetworkConfig:
    """Architecture hyperparameters and ablation switches.

    ``block_layers`` is either one layer count for every dense block or one
    count per encoder stage (``depth + 1`` entries, the last being the
    bottom block); decoder stages mirror the encoder.
    """

    sequence_length: int = 5
    in_channels: int = 1
    height: int = 96
    width: int = 128
    depth: int = 2
    stem_maps: int = 32
    stem_kernel: int = 5
    block_layers: object = 2
    growth_rate: int = 4
    fusion_kernels: Sequence[int] = (5, 7, 9)
    fusion_dilations: Sequence[int] = (1, 2, 4)
    fusion_maps: int = 16
    merge_maps: int = 12
    merge_kernel: int = 5
    n_classes: int = 3
    dropout: float = 1.0 / 3.0
    bn_momentum: float = 0.9
    preprocessing: bool = True
    sequential_module: bool = True
    spatial_context: bool = True

    def __post_init__(self):
        self.fusion_kernels = tuple(int(k) for k in self.fusion_kernels)
        self.fusion_dilations = tuple(int(d) for d in self.fusion_dilations)
        if isinstance(self.block_layers, (list, tuple)):
            self.block_layers = tuple(int(v) for v in self.block_layers)

    def validate(self):
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if len(self.fusion_kernels) != 3 or len(self.fusion_dilations) != 3:
            raise ValueError("the fusion stack has exactly three kernel sizes and dilations")
        if any(k % 2 == 0 for k in self.fusion_kernels):
            raise ValueError("fusion kernel sizes must be odd")
        f = 2 ** self.depth
        if self.height % f or self.width % f:
            raise ValueError(
                f"height and width must be divisible by 2**depth = {f}, "
                f"got {self.height}x{self.width}"
            )
        layers = self.stage_layers()
        if len(layers) != self.depth + 1:
            raise ValueError(f"block_layers needs depth + 1 = {self.depth + 1} entries")
        if min(layers) < 1 or self.growth_rate < 1:
            raise ValueError("dense blocks need at least one layer and growth >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.in_channels < 1 or self.n_classes < 2:
            raise ValueError("need in_channels >= 1 and n_classes >= 2")
        return self

    def stage_layers(self):
        if isinstance(self.block_layers, tuple):
            return self.block_layers
        return (int(self.block_layers),) * (self.depth + 1)

    def effective_fusion(self):
        """(kernels, dilations) actually used by the fusion stack."""
        if self.spatial_context:
            return self.fusion_kernels, self.fusion_dilations
        return (5, 5, 5), (1, 1, 1)

    def to_dict(self):
        d = asdict(self)
        d["fusion_kernels"] = list(self.fusion_kernels)
        d["fusion_dilations"] = list(self.fusion_dilations)
        if isinstance(self.block_layers, tuple):
            d["block_layers"] = list(self.block_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class SequenceSample:
    """One sequence: frames ``[S, C, H, W]``, labels ``[S, H, W]``, poses ``[S, 3]``.

    Frames are ordered oldest first; the last frame is the current image.
    Poses are planar ``(x, y, heading)`` in cm and radians.
    """

    frames: np.ndarray
    labels: np.ndarray
    poses: np.ndarray = field(default=None)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.poses is None:
            self.poses = np.zeros((self.frames.shape[0], 3))
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError("frames must be [S, C, H, W]")
        s, _, h, w = self.frames.shape
        if self.labels.shape != (s, h, w):
            raise ValueError("labels must be [S, H, W] aligned with frames")
        if self.poses.shape != (s, 3):
            raise ValueError("poses must be [S, 3]")


class SequentialFCN(Module):
    """The full network; use :func:`build_network` to construct it."""

    def __init__(self, config, rng):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        p = cfg.dropout
        g = cfg.growth_rate
        layers = cfg.stage_layers()

        # visual encoder
        self.stem = ConvLayer(cfg.in_channels, ConvLayerSpec(cfg.stem_kernel, cfg.stem_maps, dropout=p), rng)
        c = cfg.stem_maps
        self.enc_blocks, self.downs, skip_maps = [], [], []
        for i in range(cfg.depth):
            blk = DenseBlock(c, DenseBlockSpec(layers[i], g), rng, p)
            self.enc_blocks.append(blk)
            c += blk.out_maps
            skip_maps.append(c)
            down = TransitionDown(c, rng, p)
            self.downs.append(down)
            c = down.out_maps
        self.bottom = DenseBlock(c, DenseBlockSpec(layers[-1], g), rng, p)
        self.code_maps = c + self.bottom.out_maps

        # visual decoder
        self.vis_ups = []
        c = self.code_maps
        for i in reversed(range(cfg.depth)):
            up = TransitionUp(c, skip_maps[i], DenseBlockSpec(layers[i], g), rng, p)
            self.vis_ups.append(up)
            c = up.out_maps
        self.visual_maps = c

        # sequential module
        self.fusion, self.seq_ups = [], []
        merge_in = self.visual_maps
        if cfg.sequential_module:
            ks, ds = cfg.effective_fusion()
            c = self.code_maps
            for j, (k, d) in enumerate(zip(ks, ds)):
                spec = ConvLayerSpec(
                    k, cfg.fusion_maps, dilation=d, dropout=p, dims=3,
                    temporal=cfg.sequence_length,
                    temporal_padding="valid" if j == 2 else "same",
                )
                self.fusion.append(ConvLayer(c, spec, rng, cfg.bn_momentum))
                c = cfg.fusion_maps
            for i in reversed(range(cfg.depth)):
                up = TransitionUp(c, 0, DenseBlockSpec(layers[i], g), rng, p)
                self.seq_ups.append(up)
                c = up.out_maps
            self.sequence_maps = c
            merge_in += c
        else:
            self.sequence_maps = 0

        # merge layer
        self.merge_bottleneck = Bottleneck(merge_in, cfg.merge_maps, rng, p)
        self.merge_convs = [
            ConvLayer(cfg.merge_maps, ConvLayerSpec(cfg.merge_kernel, cfg.merge_maps, dropout=p), rng)
            for _ in range(2)
        ]
        self.classifier = Classifier(cfg.merge_maps, cfg.n_classes, rng)
        for _, m in self._all_modules():
            if isinstance(m, ConvLayer):
                m.momentum = cfg.bn_momentum

    def _all_modules(self, prefix=""):
        stack = [(prefix, self)]
        while stack:
            name, m = stack.pop()
            yield name, m
            stack.extend((f"{name}.{n}" if name else n, c) for n, c in m.children())

    # -- pathway pieces -------------------------------------------------------
    def encode(self, frames, rng=None):
        """frames ``[N, C, H, W]`` -> (visual code, list of skip volumes)."""
        x = self.stem(frames, rng)
        skips = []
        for blk, down in zip(self.enc_blocks, self.downs):
            x = F.concat([x, blk(x, rng)], axis=1)
            skips.append(x)
            x = down(x, rng)
        code = F.concat([x, self.bottom(x, rng)], axis=1)
        return code, skips

    def decode_visual(self, code, skips, rng=None):
        x = code
        for up, skip in zip(self.vis_ups, reversed(skips)):
            x = up(x, skip, rng)
        return x

    def fuse(self, codes, rng=None):
        """codes ``[B, S, C, h, w]`` -> sequence code ``[B, fusion_maps, h, w]``."""
        if codes.ndim != 5:
            raise ValueError("fusion expects codes stacked as [B, S, C, h, w]")
        b, s, c, h, w = codes.shape
        if s != self.config.sequence_length:
            raise ValueError(f"expected {self.config.sequence_length} codes, got {s}")
        x = F.transpose(codes, (0, 2, 1, 3, 4))
        for layer in self.fusion:
            x = layer(x, rng)
        return F.reshape(x, (b, x.shape[1], h, w))

    def decode_sequence(self, seq_code, rng=None):
        x = seq_code
        for up in self.seq_ups:
            x = up(x, None, rng)
        return x

    def merge(self, visual, sequence=None, rng=None):
        """Feature volumes -> class logits ``[N, n_classes, H, W]``."""
        if sequence is not None:
            if sequence.shape[-2:] != visual.shape[-2:]:
                raise ValueError("visual and sequence features differ in spatial size")
            x = F.concat([visual, sequence], axis=1)
        else:
            x = visual
        x = self.merge_bottleneck(x, rng)
        for conv in self.merge_convs:
            x = conv(x, rng)
        return self.classifier(x, rng)

    # -- full pass ------------------------------------------------------------
    def prepare(self, frames):
        """Validate ``[B, S, C, H, W]`` input and apply preprocessing if enabled."""
        frames = np.asarray(frames, dtype=np.float64)
        cfg = self.config
        expect = (cfg.sequence_length, cfg.in_channels, cfg.height, cfg.width)
        if frames.ndim != 5 or frames.shape[1:] != expect:
            raise ValueError(f"expected frames of shape [B, {', '.join(map(str, expect))}], got {frames.shape}")
        if cfg.preprocessing:
            b, s = frames.shape[:2]
            frames = preprocess_batch(frames.reshape((b * s,) + expect[1:])).reshape(frames.shape)
        return frames

    def forward(self, frames, frame_indices=None, rng=None):
        """Logits ``[B, len(frame_indices), n_classes, H, W]``.

        ``frame_indices`` selects which frames of each sequence get a label
        mask (default: all). Frames must already be prepared.
        """
        cfg = self.config
        s = cfg.sequence_length
        if frame_indices is None:
            frame_indices = list(range(s))
        frame_indices = [int(i) % s for i in frame_indices]
        frames = as_tensor(frames)
        b = frames.shape[0]
        n = len(frame_indices)
        flat = F.reshape(frames, (b * s,) + frames.shape[2:])
        sel = [bi * s + t for bi in range(b) for t in frame_indices]
        if cfg.sequential_module:
            code, skips = self.encode(flat, rng)
            sel_code = F.take(code, sel, axis=0)
            sel_skips = [F.take(sk, sel, axis=0) for sk in skips]
            visual = self.decode_visual(sel_code, sel_skips, rng)
            codes = F.reshape(code, (b, s) + code.shape[1:])
            seq_feat = self.decode_sequence(self.fuse(codes, rng), rng)
            seq_feat = F.take(seq_feat, np.repeat(np.arange(b), n), axis=0)
            logits = self.merge(visual, seq_feat, rng)
        else:
            code, skips = self.encode(F.take(flat, sel, axis=0), rng)
            logits = self.merge(self.decode_visual(code, skips, rng), None, rng)
        return F.reshape(logits, (b, n) + logits.shape[1:])

    def predict_proba(self, frames, frame_indices=None, batch_size=4):
        """Eval-mode class distributions ``[B, n, n_classes, H, W]`` (numpy)."""
        was = self.training
        self.eval()
        out = []
        try:
            with no_grad():
                for i in range(0, len(frames), batch_size):
                    x = self.prepare(frames[i:i + batch_size])
                    logits = self.forward(x, frame_indices)
                    out.append(F.softmax(logits, axis=2).data)
        finally:
            self.train(was)
        return np.concatenate(out, axis=0)


def build_network(config, rng):
    """Construct a :class:`SequentialFCN` with freshly initialized weights."""
    if not isinstance(config, NetworkConfig):
        raise TypeError("config must be a NetworkConfig")
    return SequentialFCN(config, rng)


def forward_sequence(net, sample, mode="eval", rng=None):
    """Per-frame label masks (``[n_classes, H, W]`` distributions) for one sample."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    frames = sample.frames if isinstance(sample, SequenceSample) else np.asarray(sample)
    was = net.training
    net.train(mode == "train")
    try:
        x = net.prepare(frames[None])
        if mode == "eval":
            with no_grad():
                logits = net.forward(x, rng=rng)
        else:
            logits = net.forward(x, rng=rng)
        probs = F.softmax(logits, axis=2).data[0]
    finally:
        net.train(was)
    return [probs[t] for t in range(probs.shape[0])]


def stack_receptive_field(layers, rf=1, jump=1):
    """Receptive field of a stack of ``(kernel, stride, dilation)`` layers.

    Returns ``(rf, jump)``: the field size in input cells and the input-cell
    distance between adjacent outputs.
    """
    for k, s, d in layers:
        rf += (k - 1) * d * jump
        jump *= s
    return rf, jump


def receptive_field(config):
    """Closed-form receptive fields (square, in cells) of the named stages.

    ``fusion`` is measured in visual-code cells; the other entries are in
    input pixels and follow the deepest path (through the bottom block).
    """
    cfg = config
    layers = cfg.stage_layers()
    ks, ds = cfg.effective_fusion()

    def block(n):
        return [(1, 1, 1), (3, 1, 1)] * n

    enc = [(cfg.stem_kernel, 1, 1)]
    for i in range(cfg.depth):
        enc += block(layers[i]) + [(1, 1, 1), (5, 2, 1)]
    enc += block(layers[-1])
    rf_enc, jump = stack_receptive_field(enc)

    def decode(rf, jump, skip):
        for i in reversed(range(cfg.depth)):
            jump //= 2
            rf, _ = stack_receptive_field([(1, 1, 1)] + block(layers[i]), rf, jump)
        return rf, jump

    rf_vis, _ = decode(rf_enc, jump, True)
    merge = [(1, 1, 1), (cfg.merge_kernel, 1, 1), (cfg.merge_kernel, 1, 1), (1, 1, 1)]
    rf_visual_head, _ = stack_receptive_field(merge, rf_vis, 1)
    rf_fusion, _ = stack_receptive_field([(k, 1, d) for k, d in zip(ks, ds)])
    out = {
        "visual_encoder": (rf_enc, rf_enc),
        "visual_path": (rf_visual_head, rf_visual_head),
        "fusion": (rf_fusion, rf_fusion),
    }
    if cfg.sequential_module:
        rf_seq, _ = stack_receptive_field([(k, 1, d) for k, d in zip(ks, ds)], rf_enc, jump)
        rf_seq, _ = decode(rf_seq, jump, False)
        rf_seq, _ = stack_receptive_field(merge, rf_seq, 1)
        out["sequence_path"] = (rf_seq, rf_seq)
    return out
