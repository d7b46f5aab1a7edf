"""RSEQ dataset files and ``.npz`` checkpoints.

RSEQ layout (all integers little-endian)::

    magic        4 bytes  b"RSEQ"
    version      uint8    (1)
    C, H, W, S   uint16 x 4
    count        uint32   number of sequences
    resolution   float64  ground sampling distance, mm/pixel
    checksum     uint32   CRC-32 of the payload
    n_classes    uint8, then per class: id uint8, name length uint8, UTF-8 name
    payload      per sequence: S*C*H*W float32 frames, S*H*W uint8 labels,
                 S*3 float64 poses (x cm, y cm, heading rad)
"""
import io
import json
import struct
import zlib

import numpy as np

from .network import SequenceSample

__all__ = [
    "MAGIC", "VERSION", "DEFAULT_CLASS_MAP", "Dataset", "write_rseq", "read_rseq",
    "save_checkpoint", "load_checkpoint", "ChecksumError",
]

MAGIC = b"RSEQ"
VERSION = 1
DEFAULT_CLASS_MAP = {0: "background", 1: "crop", 2: "weed", 3: "intra_row_weed"}
_HEAD = struct.Struct("<4sB4HIdI")


class ChecksumError(ValueError):
    pass


class Dataset:
    """In-memory collection of sequences with stacked arrays."""

    def __init__(self, samples, resolution=1.0, class_map=None):
        self.samples = list(samples)
        self.resolution = float(resolution)
        self.class_map = dict(class_map or DEFAULT_CLASS_MAP)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def frames(self):
        return np.stack([s.frames for s in self.samples])

    @property
    def labels(self):
        return np.stack([s.labels for s in self.samples])

    @property
    def poses(self):
        return np.stack([s.poses for s in self.samples])


def write_rseq(path, dataset):
    samples = dataset.samples
    if not samples:
        raise ValueError("cannot write an empty dataset")
    s, c, h, w = samples[0].frames.shape
    body = io.BytesIO()
    for smp in samples:
        if smp.frames.shape != (s, c, h, w):
            raise ValueError("all sequences must share one shape")
        body.write(smp.frames.astype("<f4").tobytes())
        body.write(smp.labels.astype(np.uint8).tobytes())
        body.write(smp.poses.astype("<f8").tobytes())
    payload = body.getvalue()
    classes = b"".join(
        struct.pack("<BB", k, len(v.encode())) + v.encode()
        for k, v in sorted(dataset.class_map.items())
    )
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, c, h, w, s, len(samples),
                            dataset.resolution, zlib.crc32(payload)))
        fh.write(struct.pack("<B", len(dataset.class_map)) + classes)
        fh.write(payload)


def read_rseq(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an RSEQ file")
    magic, version, c, h, w, s, count, res, crc = _HEAD.unpack_from(raw)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported RSEQ version {version}")
    pos = _HEAD.size
    n_classes = raw[pos]
    pos += 1
    class_map = {}
    for _ in range(n_classes):
        cid, ln = raw[pos], raw[pos + 1]
        class_map[cid] = raw[pos + 2:pos + 2 + ln].decode()
        pos += 2 + ln
    payload = raw[pos:]
    fsz, lsz, psz = s * c * h * w * 4, s * h * w, s * 3 * 8
    if len(payload) != count * (fsz + lsz + psz):
        raise ValueError(f"{path}: payload length does not match header")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    samples = []
    off = 0
    for _ in range(count):
        frames = np.frombuffer(payload, "<f4", s * c * h * w, off).reshape(s, c, h, w)
        off += fsz
        labels = np.frombuffer(payload, np.uint8, lsz, off).reshape(s, h, w)
        off += lsz
        poses = np.frombuffer(payload, "<f8", s * 3, off).reshape(s, 3)
        off += psz
        samples.append(SequenceSample(frames.astype(np.float64), labels.copy(), poses.copy()))
    return Dataset(samples, res, class_map)


def save_checkpoint(path, meta, params, buffers, optimizer_arrays=(), rng_state=None):
    """Write a checkpoint as ``.npz``.

    ``meta`` (JSON-serializable) holds configs, epoch counters and the loss
    trace; parameters, buffers and RMSProp accumulators are stored as arrays.
    """
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    if rng_state is not None:
        arrays["rng"] = np.frombuffer(json.dumps(rng_state).encode(), dtype=np.uint8)
    for k, v in params.items():
        arrays[f"param/{k}"] = v
    for k, v in buffers.items():
        arrays[f"buffer/{k}"] = v
    for i, v in enumerate(optimizer_arrays):
        arrays[f"opt/{i}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns a dict of its parts."""
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        rng = json.loads(z["rng"].tobytes().decode()) if "rng" in z.files else None
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        buffers = {k[7:]: z[k] for k in z.files if k.startswith("buffer/")}
        opt = [z[f"opt/{i}"] for i in range(sum(k.startswith("opt/") for k in z.files))]
    return {"meta": meta, "rng": rng, "params": params, "buffers": buffers, "optimizer": opt}
