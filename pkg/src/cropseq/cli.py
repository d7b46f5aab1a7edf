"""Command line interface: ``cropseq <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import os
import sys
import time

import numpy as np

from .container import Dataset, read_rseq, write_rseq
from .network import NetworkConfig
from .rowsim import CameraModel, generate_dataset, shift_blob_brightness, write_pgm
from .training import TrainConfig, evaluate, load_state, predict_masks, save_state, train

__all__ = ["main", "build_parser", "ABLATION_ROWS", "ablation_configs", "ablation_checkpoint",
           "run_ablation", "format_ablation"]

ABLATION_ROWS = ("Vanilla FCN", "+Preprocessing", "+Sequential", "+Spatial Context")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_tuple(text):
    return tuple(int(v) for v in text.split(",") if v)


def _float_tuple(text):
    return tuple(float(v) for v in text.split(",") if v)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=2)
    g.add_argument("--lr", type=float, default=0.01, help="initial learning rate")
    g.add_argument("--lr-milestones", type=_int_tuple, default=(10, 25),
                   help="epochs (of a full-length run) after which the lr drops by 10")
    g.add_argument("--reference-epochs", type=int, default=200,
                   help="run length the milestones refer to; shorter runs scale them")
    g.add_argument("--class-weights", type=_float_tuple, default=(1.0, 10.0, 10.0))
    g.add_argument("--loss-frames", choices=("current", "all"), default="current")
    g.add_argument("--checkpoint-interval", type=int, default=0)
    n = p.add_argument_group("network")
    n.add_argument("--depth", type=int, default=2)
    n.add_argument("--stem-maps", type=int, default=16)
    n.add_argument("--block-layers", type=_int_tuple, default=(2,))
    n.add_argument("--growth-rate", type=int, default=4)
    n.add_argument("--dropout", type=float, default=1 / 3)
    n.add_argument("--no-preprocessing", action="store_true")
    n.add_argument("--no-sequential", action="store_true", help="train the single-frame baseline")
    n.add_argument("--no-spatial-context", action="store_true",
                   help="fusion layers use kernel 5 and dilation 1")


def _add_sim_flags(p):
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--resolution", type=float, default=4.0, help="mm per pixel")
    p.add_argument("--sequence-length", type=int, default=5)


def build_parser():
    parser = _Parser(prog="cropseq", description="Sequential crop/weed segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="render crop-row sequences to an RSEQ file")
    p.add_argument("--sequences", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--brightness-offset", type=float, default=0.0,
                   help="added to the rendered plant blobs")
    p.add_argument("-o", "--output", required=True)
    _add_sim_flags(p)

    p = sub.add_parser("train", help="train a network on an RSEQ dataset")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True, help="checkpoint path (.npz)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log", help="write key=value training records here")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="object-wise evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--frame-scope", choices=("current", "all"), default="current")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kv", help="also write the report as key=value lines")

    p = sub.add_parser("ablate", help="train and score the four ablation configurations")
    p.add_argument("train_set")
    p.add_argument("test_set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir", help="store checkpoints here and reuse existing ones")
    _add_train_flags(p)

    p = sub.add_parser("export-masks", help="write predicted masks as PGM images")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--frame-scope", choices=("current", "all"), default="current")
    p.add_argument("--limit", type=int, default=None, help="number of sequences to export")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _network_config(args, dataset, **overrides):
    s, c, h, w = dataset[0].frames.shape
    layers = args.block_layers[0] if len(args.block_layers) == 1 else args.block_layers
    cfg = NetworkConfig(
        sequence_length=s, in_channels=c, height=h, width=w, depth=args.depth,
        stem_maps=args.stem_maps, block_layers=layers, growth_rate=args.growth_rate,
        dropout=args.dropout, preprocessing=not args.no_preprocessing,
        sequential_module=not args.no_sequential,
        spatial_context=not args.no_spatial_context,
    )
    return cfg.replace(**overrides) if overrides else cfg


def _train_config(args, network, checkpoint_path=None):
    return TrainConfig(
        network=network, epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, lr_milestones=args.lr_milestones,
        reference_epochs=args.reference_epochs, class_weights=args.class_weights,
        seed=args.seed, loss_frames=args.loss_frames,
        checkpoint_interval=args.checkpoint_interval, checkpoint_path=checkpoint_path,
    )


def cmd_simulate(args):
    if args.sequences < 1:
        raise UsageError("--sequences must be >= 1")
    cam = CameraModel(width=args.width, height=args.height, resolution=args.resolution)
    samples = generate_dataset(args.sequences, cam, args.sequence_length, args.seed)
    if args.brightness_offset:
        samples = shift_blob_brightness(samples, args.brightness_offset)
    write_rseq(args.output, Dataset(samples, cam.resolution))
    print(f"wrote {len(samples)} sequences to {args.output}")


def cmd_train(args):
    ds = read_rseq(args.dataset)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        log = (lambda line: log_fh.write(line + "\n")) if log_fh else None
        if args.resume:
            state = load_state(args.resume)
            config = state.config
            config.epochs = args.epochs
            config.checkpoint_path = args.output
        else:
            state = None
            config = _train_config(args, _network_config(args, ds), args.output)
        state = train(config, ds.frames, ds.labels, state=state, log=log, progress=True)
    finally:
        if log_fh:
            log_fh.close()
    save_state(args.output, state)
    print(f"saved checkpoint to {args.output} (final loss {state.epoch_losses[-1]:.4f})")


def cmd_eval(args):
    state = load_state(args.checkpoint)
    ds = read_rseq(args.dataset)
    report = evaluate(state.net, ds.frames, ds.labels, ds.resolution, args.frame_scope)
    sys.stdout.write(report.to_table())
    if args.kv:
        with open(args.kv, "w", encoding="utf-8") as fh:
            fh.write(report.to_kv())


def ablation_configs(base):
    """The four cumulative configurations, keyed by their table row."""
    return {
        "Vanilla FCN": base.replace(preprocessing=False, sequential_module=False),
        "+Preprocessing": base.replace(preprocessing=True, sequential_module=False),
        "+Sequential": base.replace(preprocessing=True, sequential_module=True,
                                    spatial_context=False),
        "+Spatial Context": base.replace(preprocessing=True, sequential_module=True,
                                         spatial_context=True),
    }


def ablation_checkpoint(workdir, row):
    """Where :func:`run_ablation` keeps the checkpoint of ``row``."""
    slug = row.lower().replace("+", "").replace(" ", "_")
    return os.path.join(workdir, f"{slug}.npz")


def run_ablation(train_config, train_set, test_set, workdir=None, progress=False):
    """Train each ablation row with the same budget and seed; returns ``{row: report}``."""
    reports = {}
    for row, net_cfg in ablation_configs(train_config.network).items():
        cfg = TrainConfig.from_dict({**train_config.to_dict(), "network": net_cfg.to_dict()})
        path = ablation_checkpoint(workdir, row) if workdir else None
        state = None
        if path and os.path.exists(path):
            state = load_state(path)
            if state.config.to_dict() != cfg.to_dict() or state.epoch != cfg.epochs:
                state = None
        if state is None:
            if progress:
                print(f"training {row}", flush=True)
            state = train(cfg, train_set.frames, train_set.labels, progress=progress)
            if path:
                save_state(path, state)
        reports[row] = evaluate(state.net, test_set.frames, test_set.labels, test_set.resolution)
    return reports


def format_ablation(reports):
    lines = [f"{'configuration':<20}{'avg F1 [%]':>12}"]
    for row in ABLATION_ROWS:
        lines.append(f"{row:<20}{100 * reports[row].average_f1:>12.1f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    tr = read_rseq(args.train_set)
    te = read_rseq(args.test_set)
    if tr[0].frames.shape != te[0].frames.shape:
        raise ValueError("training and test sequences differ in shape")
    if args.workdir:
        os.makedirs(args.workdir, exist_ok=True)
    config = _train_config(args, _network_config(args, tr))
    reports = run_ablation(config, tr, te, args.workdir, progress=True)
    sys.stdout.write(format_ablation(reports))


def cmd_export_masks(args):
    state = load_state(args.checkpoint)
    ds = read_rseq(args.dataset)
    frames = ds.frames[: args.limit] if args.limit else ds.frames
    masks = predict_masks(state.net, frames, args.frame_scope)
    os.makedirs(args.output_dir, exist_ok=True)
    scale = 255 // max(state.config.network.n_classes - 1, 1)
    s = state.config.network.sequence_length
    first = s - 1 if args.frame_scope == "current" else 0
    for i, seq in enumerate(masks):
        for j, mask in enumerate(seq):
            write_pgm(os.path.join(args.output_dir, f"seq{i:04d}_frame{first + j}.pgm"),
                      mask.astype(np.int64) * scale)
    print(f"wrote {masks.shape[0] * masks.shape[1]} masks to {args.output_dir}")


COMMANDS = {
    "simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "export-masks": cmd_export_masks,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("cropseq: a command is required (simulate, train, eval, ablate, export-masks)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    t0 = time.time()
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cropseq {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"cropseq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(f"done in {time.time() - t0:.1f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
