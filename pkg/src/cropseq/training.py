"""Training loop, evaluation and checkpoint round-trips."""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import functional as F
from .container import load_checkpoint, save_checkpoint
from .metrics import aggregate_reports, object_report
from .blocks import ConvLayer
from .network import NetworkConfig, build_network
from .optim import RMSProp, lr_schedule
from .tensor import no_grad

logger = logging.getLogger(__name__)

# epoch-over-epoch loss increases within this many epochs are flagged
EARLY_EPOCHS = 5

__all__ = [
    "TrainConfig", "TrainState", "TrainingDiverged", "train", "evaluate",
    "evaluate_predictions", "predict_masks", "save_state", "load_state",
    "fold_labels", "recalibrate_batch_norm",
]


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes NaN or infinite."""


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    epochs: int = 200
    batch_size: int = 2
    learning_rate: float = 0.01
    lr_milestones: Sequence[int] = (10, 25)
    reference_epochs: int = 200
    class_weights: Sequence[float] = (1.0, 10.0, 10.0)
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    loss_frames: str = "current"
    checkpoint_interval: int = 0
    checkpoint_path: Optional[str] = None

    def validate(self):
        self.network.validate()
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        ms = list(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("learning-rate milestones must be strictly increasing")
        if self.loss_frames not in ("current", "all"):
            raise ValueError("loss_frames must be 'current' or 'all'")
        if len(self.class_weights) != self.network.n_classes:
            raise ValueError("need one class weight per class")
        return self

    def to_dict(self):
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["lr_milestones"] = list(self.lr_milestones)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["network"] = NetworkConfig.from_dict(d["network"])
        d["lr_milestones"] = tuple(d["lr_milestones"])
        d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)

    def lr_at(self, epoch):
        return lr_schedule(epoch, self.epochs, self.learning_rate, tuple(self.lr_milestones),
                           reference_epochs=self.reference_epochs)


@dataclass
class TrainState:
    """Everything needed to continue or reproduce a run."""

    config: TrainConfig
    net: object
    optimizer: RMSProp
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    loss_trace: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)


def fold_labels(labels):
    """Map the evaluation-only intra-row weed class (3) onto weed (2)."""
    labels = np.asarray(labels)
    return np.where(labels == 3, 2, labels)


def _new_state(config):
    rng = np.random.default_rng(config.seed)
    net = build_network(config.network, rng)
    opt = RMSProp(net.parameters(), config.learning_rate, config.rho, config.eps)
    return TrainState(config, net, opt, rng)


def _grad_norms(net):
    return {k: float(np.linalg.norm(p.grad)) for k, p in net.named_parameters() if p.grad is not None}


def train(config, frames, labels, state=None, log: Optional[Callable[[str], None]] = None,
          progress=False):
    """Minimize the weighted cross-entropy with RMSProp; returns a :class:`TrainState`.

    ``frames`` is ``[n, S, C, H, W]`` and ``labels`` ``[n, S, H, W]``.
    Passing ``state`` (e.g. from :func:`load_state`) resumes that run.
    """
    config.validate()
    if state is None:
        state = _new_state(config)
    net, opt, rng = state.net, state.optimizer, state.rng
    cfg = config.network
    s = cfg.sequence_length
    x_all = net.prepare(frames)
    y_all = fold_labels(labels)
    n = len(x_all)
    frame_idx = [s - 1] if config.loss_frames == "current" else list(range(s))
    net.train()
    while state.epoch < config.epochs:
        epoch = state.epoch
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        t0 = time.time()
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            logits = net.forward(x_all[idx], frame_idx, rng)
            b, m = logits.shape[:2]
            flat = F.reshape(logits, (b * m,) + logits.shape[2:])
            target = y_all[idx][:, frame_idx].reshape((b * m,) + y_all.shape[2:])
            loss = F.softmax_cross_entropy(flat, target, config.class_weights)
            value = loss.item()
            if not np.isfinite(value):
                loss.backward()
                norms = _grad_norms(net)
                worst = sorted(norms.items(), key=lambda kv: -np.nan_to_num(kv[1], nan=np.inf))[:5]
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {state.step} (lr={opt.lr:g}); "
                    f"largest grad norms: {worst}"
                )
            loss.backward()
            opt.step()
            opt.zero_grad()
            state.step += 1
            state.loss_trace.append(value)
            losses.append(value)
            if log:
                log(f"epoch={epoch} step={state.step} loss={value:.10g} lr={opt.lr:g}")
        state.epoch += 1
        mean = float(np.mean(losses))
        state.epoch_losses.append(mean)
        if epoch < EARLY_EPOCHS and len(state.epoch_losses) > 1 and mean >= state.epoch_losses[-2]:
            flag = f"loss did not decrease in epoch {epoch} ({state.epoch_losses[-2]:.6g} -> {mean:.6g})"
            state.flags.append(flag)
            logger.warning(flag)
            if log:
                log(f"epoch={epoch} flag=non_decreasing_loss")
        msg = f"epoch {epoch + 1}/{config.epochs} loss {mean:.4f} lr {opt.lr:g} ({time.time() - t0:.0f}s)"
        logger.info(msg)
        if progress:
            print(msg, flush=True)
        if log:
            log(f"epoch={epoch} mean_loss={mean:.10g} lr={opt.lr:g}")
        if (config.checkpoint_interval and config.checkpoint_path
                and state.epoch % config.checkpoint_interval == 0):
            save_state(config.checkpoint_path, state)
    net.eval()
    return state


def recalibrate_batch_norm(net, frames, frame_indices=None, batch_size=2):
    """Re-estimate batch-norm running statistics with dropout switched off.

    Dropout in front of later normalization layers shifts activation
    variance between training and inference; replacing the running
    averages by plain averages of per-batch statistics over ``frames`` (already
    prepared, ``[n, S, C, H, W]``) computed without dropout removes that
    mismatch. Parameters are not touched.
    """
    layers = [m for _, m in net._all_modules() if isinstance(m, ConvLayer)]
    saved = [(m.momentum, m.dropout_active) for m in layers]
    was = net.training
    net.train()
    for m in layers:
        m.dropout_active = False
        m.running_mean[:] = 0.0
        m.running_var[:] = 0.0
    try:
        with no_grad():
            for i, start in enumerate(range(0, len(frames), batch_size)):
                for m in layers:
                    m.momentum = i / (i + 1.0)  # cumulative mean over batches
                net.forward(frames[start:start + batch_size], frame_indices)
    finally:
        for m, (mom, act) in zip(layers, saved):
            m.momentum, m.dropout_active = mom, act
        net.train(was)
    return net


def save_state(path, state):
    meta = {
        "train_config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "loss_trace": [float(v) for v in state.loss_trace],
        "epoch_losses": [float(v) for v in state.epoch_losses],
        "flags": list(state.flags),
    }
    params = {k: p.data for k, p in state.net.named_parameters()}
    buffers = dict(state.net.named_buffers())
    save_checkpoint(path, meta, params, buffers, state.optimizer.state_arrays(),
                    state.rng.bit_generator.state)


def load_state(path):
    """Rebuild the network, optimizer and RNG stored by :func:`save_state`."""
    ck = load_checkpoint(path)
    meta = ck["meta"]
    config = TrainConfig.from_dict(meta["train_config"])
    state = _new_state(config)
    state.net.load_state_dict({**ck["params"], **ck["buffers"]})
    if ck["optimizer"]:
        state.optimizer.load_state_arrays(ck["optimizer"])
    if ck["rng"] is not None:
        state.rng.bit_generator.state = ck["rng"]
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    state.loss_trace = list(meta["loss_trace"])
    state.epoch_losses = list(meta["epoch_losses"])
    state.flags = list(meta.get("flags", []))
    state.optimizer.lr = config.lr_at(max(state.epoch - 1, 0))
    state.net.eval()
    return state


def predict_masks(net, frames, frame_scope="current", batch_size=4):
    """Argmax label masks ``[n, k, H, W]`` for the current (k=1) or all frames."""
    s = net.config.sequence_length
    idx = [s - 1] if frame_scope == "current" else list(range(s))
    probs = net.predict_proba(frames, idx, batch_size)
    return probs.argmax(axis=2).astype(np.uint8)


def evaluate_predictions(pred_masks, gt_masks, resolution_mm, min_area_cm2=0.5, intra_row=None):
    """Aggregate :func:`object_report` over aligned stacks of masks."""
    pred_masks = np.asarray(pred_masks)
    gt_masks = np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ValueError("prediction and ground-truth stacks differ in shape")
    if intra_row is None:
        intra_row = bool(np.any(gt_masks == 3))
    flat_p = pred_masks.reshape((-1,) + pred_masks.shape[-2:])
    flat_g = gt_masks.reshape((-1,) + gt_masks.shape[-2:])
    return aggregate_reports(
        object_report(p, g, resolution_mm, min_area_cm2, intra_row) for p, g in zip(flat_p, flat_g)
    )


def evaluate(net, frames, labels, resolution_mm, frame_scope="current", min_area_cm2=0.5):
    """Eval-mode inference followed by object-wise scoring."""
    if frame_scope not in ("current", "all"):
        raise ValueError("frame_scope must be 'current' or 'all'")
    cfg = net.config
    frames = np.asarray(frames)
    labels = np.asarray(labels)
    if frames.shape[1:] != (cfg.sequence_length, cfg.in_channels, cfg.height, cfg.width):
        raise ValueError(
            f"dataset sequences {frames.shape[1:]} do not match the network configuration"
        )
    pred = predict_masks(net, frames, frame_scope)
    s = cfg.sequence_length
    gt = labels[:, -1:] if frame_scope == "current" else labels
    return evaluate_predictions(pred, gt, resolution_mm, min_area_cm2)
