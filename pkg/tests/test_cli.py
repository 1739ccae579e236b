import csv
import io

import numpy as np
import pytest

from dista import cli, neuron
from dista.checkpoint import apply_checkpoint, checkpoint_tensors, load_checkpoint, parse_checkpoint, save_checkpoint
from dista.config import ConfigError, RunConfig, load_config, parse_config
from dista.records import FormatError, decode, encode
from dista.training import OptimState, TrainHyper, cosine_lr

TINY = """
syn_train = 96
syn_test = 32
epochs = {epochs}
dim = 16
timesteps = 4
taw_size = 2
batch_size = 32
out_dir = {out}
"""


def write_cfg(tmp_path, epochs=2, name="run", extra=""):
    path = tmp_path / f"{name}.cfg"
    path.write_text(TINY.format(epochs=epochs, out=tmp_path / name) + extra)
    return path


def run(*argv):
    buf = io.StringIO()
    code = cli.main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


# -- config -----------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    cfg = load_config(p, check_paths=False)
    assert cfg == RunConfig()
    assert cfg.tau_init == 2.0 and cfg.denoise_threshold == 3.0 and cfg.lr == 0.003


def test_config_errors_name_the_key():
    with pytest.raises(ConfigError) as e:
        parse_config("taw_size = 9\ntimesteps = 4", check_paths=False)
    assert e.value.key == "taw_size"
    with pytest.raises(ConfigError) as e:
        parse_config("colour = blue", check_paths=False)
    assert e.value.key == "colour"
    with pytest.raises(ConfigError) as e:
        parse_config("dim = many", check_paths=False)
    assert e.value.key == "dim"
    with pytest.raises(ConfigError):
        parse_config("dim = 30\nheads = 4", check_paths=False)


def test_config_comments_and_round_trip():
    cfg = parse_config("denoise_threshold = 3  # the default\nadn = off\n", check_paths=False)
    assert cfg.denoise_threshold == 3.0 and cfg.adn is False
    assert parse_config(cfg.to_text(), check_paths=False) == cfg


# -- container and checkpoints -----------------------------------------------


def test_record_container_round_trip_and_errors():
    tensors = [("a", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b", np.array([1, 2], dtype=np.int64)),
               ("s", np.float64(2.5).reshape(()))]
    raw = encode("hello", tensors)
    header, back = decode(raw)
    assert header == "hello" and [n for n, _ in back] == ["a", "b", "s"]
    assert all(np.array_equal(x, y) and x.dtype == y.dtype for (_, x), (_, y) in zip(tensors, back))
    assert encode(header, back) == raw
    with pytest.raises(FormatError):
        decode(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        decode(raw[:-3])
    with pytest.raises(FormatError):
        decode(raw + b"\0")


def _model_and_optim(tmp_path):
    cfg = parse_config(TINY.format(epochs=1, out=tmp_path / "m"), check_paths=False)
    model = cli.build_model(cfg)
    optim = OptimState()
    return cfg, model, optim


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    cfg, model, optim = _model_and_optim(tmp_path)
    train, _ = cli.build_datasets(cfg)
    from dista.training import train_epoch
    train_epoch(model, train, TrainHyper(epochs=1, batch_size=32), optim, 0)
    save_checkpoint(tmp_path / "a.dsta", model, optim, 1, cli.shuffle_state(0, 1), cfg.to_text())
    ckpt = load_checkpoint(tmp_path / "a.dsta")
    _, fresh, fresh_optim = _model_and_optim(tmp_path)
    apply_checkpoint(ckpt, fresh, fresh_optim)
    save_checkpoint(tmp_path / "b.dsta", fresh, fresh_optim, ckpt.epoch, ckpt.rng_state, ckpt.config_text)
    assert (tmp_path / "a.dsta").read_bytes() == (tmp_path / "b.dsta").read_bytes()


def test_checkpoint_names_match_registry(tmp_path):
    cfg, model, optim = _model_and_optim(tmp_path)
    save_checkpoint(tmp_path / "c.dsta", model, optim, 0, {}, cfg.to_text())
    ckpt = load_checkpoint(tmp_path / "c.dsta")
    params = [f"param/{n}" for n, _ in model.named_parameters()]
    buffers = [f"buffer/{n}.{s}" for n, _ in model.named_buffers() for s in ("running_mean", "running_var")]
    assert ckpt.order == params + buffers
    assert ckpt.order == [n for n, _ in checkpoint_tensors(model, optim)]


def test_bad_magic_leaves_model_untouched(tmp_path):
    cfg, model, optim = _model_and_optim(tmp_path)
    save_checkpoint(tmp_path / "d.dsta", model, optim, 0, {}, cfg.to_text())
    raw = bytearray((tmp_path / "d.dsta").read_bytes())
    raw[0:4] = b"NOPE"
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    with pytest.raises(FormatError):
        apply_checkpoint(parse_checkpoint(bytes(raw)), model)
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())


# -- commands ----------------------------------------------------------------


def test_train_one_epoch_writes_header_and_one_row(tmp_path):
    code, _ = run("train", "--config", write_cfg(tmp_path, epochs=1))
    assert code == 0
    rows = list(csv.reader((tmp_path / "run" / "metrics.csv").open()))
    assert rows[0] == list(cli.MetricsRow.FIELDS) and len(rows) == 2
    vals = dict(zip(rows[0], rows[1]))
    assert 0 <= float(vals["test_acc"]) <= 1 and 1.01 <= float(vals["tau_min"]) <= float(vals["tau_max"]) <= 100
    assert not (tmp_path / "run" / ".lock").exists()


def test_train_twice_gives_identical_metrics(tmp_path):
    a = write_cfg(tmp_path, name="a")
    b = write_cfg(tmp_path, name="b")
    assert run("train", "--config", a)[0] == 0 and run("train", "--config", b)[0] == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_continues_schedule_and_matches_uninterrupted(tmp_path):
    part = write_cfg(tmp_path, epochs=3, name="part")
    assert run("train", "--config", part)[0] == 0
    (tmp_path / "part").rename(tmp_path / "full")
    assert run("train", "--config", part, "--run-epochs", "1")[0] == 0
    code, out = run("train", "--config", part, "--resume", tmp_path / "part" / "checkpoint.dsta")
    assert code == 0 and out.startswith("epoch=1 ")
    rows = list(csv.DictReader((tmp_path / "part" / "metrics.csv").open()))
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert float(rows[1]["lr"]) == cosine_lr(1, 3, TrainHyper())
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    assert (tmp_path / "full" / "checkpoint.dsta").read_bytes() == (tmp_path / "part" / "checkpoint.dsta").read_bytes()


def test_eval_output_format_purity_and_mismatch(tmp_path):
    cfg = write_cfg(tmp_path, epochs=1)
    assert run("train", "--config", cfg)[0] == 0
    ckpt = tmp_path / "run" / "checkpoint.dsta"
    c1, o1 = run("eval", "--config", cfg, "--checkpoint", ckpt)
    c2, o2 = run("eval", "--config", cfg, "--checkpoint", ckpt)
    assert c1 == c2 == 0 and o1 == o2
    line = o1.strip()
    assert line.startswith("test_acc=") and " test_loss=" in line
    acc, loss = (float(part.split("=")[1]) for part in line.split())
    assert 0 <= acc <= 1 and loss > 0
    wide = write_cfg(tmp_path, epochs=1, name="wide", extra="dim = 32\n")
    assert run("eval", "--config", wide, "--checkpoint", ckpt)[0] == cli.EXIT_COMPAT


def test_version_mismatch_is_compat_error(tmp_path):
    cfg = write_cfg(tmp_path, epochs=1)
    run("train", "--config", cfg)
    ckpt = tmp_path / "run" / "checkpoint.dsta"
    raw = bytearray(ckpt.read_bytes())
    raw[4] = 9
    ckpt.write_bytes(bytes(raw))
    assert run("eval", "--config", cfg, "--checkpoint", ckpt)[0] == cli.EXIT_COMPAT


def test_gradcheck_passes_and_reports_tau(tmp_path):
    p = tmp_path / "g.cfg"
    p.write_text("dtype = float64\nblocks = 1\ndim = 8\ntimesteps = 3\nheads = 2\ntaw_size = 2\n"
                 "syn_frame_size = 4\nsyn_classes = 3\nadn = false\n")
    code, out = run("gradcheck", "--config", p)
    assert code == 0, out
    assert any(line.startswith("tau ") for line in out.splitlines())


def test_gradcheck_detects_corrupted_backward(tmp_path, monkeypatch):
    p = tmp_path / "g.cfg"
    p.write_text("dtype = float64\nblocks = 1\ndim = 8\ntimesteps = 3\nheads = 2\ntaw_size = 2\n"
                 "syn_frame_size = 4\nsyn_classes = 3\nadn = false\n")
    real = neuron._spike_backward
    monkeypatch.setattr(neuron, "_spike_backward", lambda *a: 1.5 * real(*a))
    code, out = run("gradcheck", "--config", p)
    assert code == cli.EXIT_GRADCHECK
    assert "failed for" in out


def test_ablate_writes_one_row_per_value(tmp_path):
    cfg = write_cfg(tmp_path, epochs=1)
    code, _ = run("ablate", "--config", cfg, "--axis", "timesteps", "--values", "1,2,4")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "run" / "ablation.csv").open()))
    assert [r["value"] for r in rows] == ["1", "2", "4"]
    code, _ = run("ablate", "--config", cfg, "--axis", "denoise_threshold", "--values", "0,2,3,4")
    rows = list(csv.DictReader((tmp_path / "run" / "ablation.csv").open()))
    assert code == 0 and [r["value"] for r in rows] == ["0", "2", "3", "4"]


def test_exit_codes_for_usage_io_and_lock(tmp_path):
    cfg = write_cfg(tmp_path, epochs=1)
    assert run("fly", "--config", cfg)[0] == cli.EXIT_USAGE
    assert run("train")[0] == cli.EXIT_USAGE
    assert run("train", "--config", tmp_path / "missing.cfg")[0] == cli.EXIT_IO
    bad = tmp_path / "bad.cfg"
    bad.write_text("taw_size = 9\ntimesteps = 4\n")
    assert run("train", "--config", bad)[0] == cli.EXIT_USAGE
    cifar = tmp_path / "cifar.cfg"
    cifar.write_text(f"dataset = cifar10\ndata_dir = {tmp_path / 'nowhere'}\n")
    assert run("train", "--config", cifar)[0] == cli.EXIT_IO
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / ".lock").write_text("123")
    assert run("train", "--config", cfg)[0] == cli.EXIT_IO
    assert run("eval", "--config", cfg, "--checkpoint", tmp_path / "none.dsta")[0] == cli.EXIT_IO


def test_non_finite_loss_exits_numeric(tmp_path, monkeypatch):
    import dista.training as training
    cfg = write_cfg(tmp_path, epochs=1)
    monkeypatch.setattr(training, "cross_entropy", lambda logits, y: training.Tensor(np.array(np.nan)))
    assert run("train", "--config", cfg)[0] == cli.EXIT_NUMERIC
