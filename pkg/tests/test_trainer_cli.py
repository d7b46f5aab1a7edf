import numpy as np
import pytest

from cropseq.cli import ABLATION_ROWS, ablation_configs, format_ablation, main
from cropseq.container import read_rseq
from cropseq.metrics import ObjectWiseReport, ClassCounts
from cropseq.network import NetworkConfig

SMALL = ["--width", "32", "--height", "32", "--sequence-length", "3"]
TRAIN = ["--epochs", "1", "--stem-maps", "4", "--depth", "1", "--block-layers", "1",
         "--growth-rate", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--sequences", "4", "--seed", "7", "-o", str(d / "a.rseq")] + SMALL) == 0
    return d


def test_simulate_writes_valid_container(data):
    ds = read_rseq(data / "a.rseq")
    assert len(ds) == 4 and ds[0].frames.shape == (3, 1, 32, 32)


def test_simulate_is_seeded(data, tmp_path):
    main(["simulate", "--sequences", "4", "--seed", "7", "-o", str(tmp_path / "b.rseq")] + SMALL)
    assert (tmp_path / "b.rseq").read_bytes() == (data / "a.rseq").read_bytes()


def test_brightness_offset(data, tmp_path):
    main(["simulate", "--sequences", "4", "--seed", "7", "--brightness-offset", "0.3",
          "-o", str(tmp_path / "c.rseq")] + SMALL)
    a, c = read_rseq(data / "a.rseq"), read_rseq(tmp_path / "c.rseq")
    plant = (a.labels > 0)[:, :, None]
    np.testing.assert_allclose(c.frames, a.frames + 0.3 * plant, atol=1e-6)
    assert np.all(c.frames[~np.broadcast_to(plant, c.frames.shape)] == 0)


def test_train_eval_export(data, tmp_path, capsys):
    ck, log, kv = tmp_path / "m.npz", tmp_path / "t.log", tmp_path / "r.kv"
    assert main(["train", str(data / "a.rseq"), "-o", str(ck), "--log", str(log), "--seed", "1"] + TRAIN) == 0
    lines = log.read_text().splitlines()
    assert lines[0].startswith("epoch=0 step=1 loss=")
    assert main(["eval", str(ck), str(data / "a.rseq"), "--kv", str(kv)]) == 0
    out = capsys.readouterr().out
    assert "avg F1" in out
    assert kv.read_text().startswith("avg_f1=")
    assert main(["export-masks", str(ck), str(data / "a.rseq"), "-o", str(tmp_path / "pgm"),
                 "--limit", "2"]) == 0
    files = sorted(p.name for p in (tmp_path / "pgm").iterdir())
    assert files == ["seq0000_frame2.pgm", "seq0001_frame2.pgm"]


def test_resume_via_cli(data, tmp_path):
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    flags = TRAIN[2:]
    main(["train", str(data / "a.rseq"), "-o", str(a), "--epochs", "2", "--seed", "3",
          "--log", str(tmp_path / "full.log")] + flags)
    main(["train", str(data / "a.rseq"), "-o", str(b), "--epochs", "1", "--seed", "3",
          "--reference-epochs", "200"] + flags)
    main(["train", str(data / "a.rseq"), "-o", str(b), "--epochs", "2", "--resume", str(b),
          "--seed", "3"] + flags)
    from cropseq.training import load_state
    assert load_state(a).loss_trace == load_state(b).loss_trace


def test_usage_errors_exit_1(capsys):
    assert main(["bogus"]) == 1
    assert main([]) == 1
    assert main(["simulate", "--unknown-flag", "-o", "x"]) == 1
    assert "cropseq" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "missing.npz"), str(tmp_path / "x.rseq")]) == 2
    assert "error" in capsys.readouterr().err


def test_ablation_rows():
    cfgs = ablation_configs(NetworkConfig())
    assert tuple(cfgs) == ABLATION_ROWS
    v, p, s, c = cfgs.values()
    assert not v.preprocessing and not v.sequential_module
    assert p.preprocessing and not p.sequential_module
    assert s.sequential_module and not s.spatial_context
    assert c.sequential_module and c.spatial_context
    table = format_ablation({r: ObjectWiseReport({1: ClassCounts(1, 1, 1, 1)}) for r in ABLATION_ROWS})
    assert len(table.splitlines()) == 5


def test_ablate_command(data, capsys):
    assert main(["ablate", str(data / "a.rseq"), str(data / "a.rseq")] + TRAIN) == 0
    out = capsys.readouterr().out.splitlines()
    rows = [l for l in out if any(l.startswith(r) for r in ABLATION_ROWS)]
    assert len(rows) == 4
