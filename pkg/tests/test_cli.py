import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fastwave import cli, dsp
from fastwave.config import RunConfig
from fastwave.dsp import AudioClip
from fastwave.synth import toy_corpus
from fastwave.train import load_checkpoint

from goldens import SCHEDULE_N8

TINY = """\
[model]
base_channels = 4
n_blocks = 1
dw_kernel = 3
embed_dim = 4
[train]
segment_length = 1024
batch_size = 2
learning_rate = 0.005
max_steps = 5
checkpoint_every = 2
seed = 11
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    data.mkdir()
    for i, clip in enumerate(toy_corpus(3, 0.3, seed=2)):
        dsp.write_wav(clip, data / f"p{225 + i}_{i:03d}.wav")
    (root / "tiny.cfg").write_text(TINY)
    return root


@pytest.fixture(scope="module")
def prepared(workspace):
    assert cli.main(["prepare", str(workspace / "data"), "--manifest", str(workspace / "man.csv"),
                     "--stats", str(workspace / "stats.json"), "--test-fraction", "0.34"]) == 0
    return workspace


@pytest.fixture(scope="module")
def trained(prepared):
    w = prepared
    assert cli.main(["train", "--config", str(w / "tiny.cfg"), "--manifest", str(w / "man.csv"),
                     "--stats", str(w / "stats.json"), "--checkpoint", str(w / "ck.fwck")]) == 0
    return w


def test_prepare_outputs(prepared, capsys):
    rows = list(csv.reader(open(prepared / "man.csv")))
    assert rows[0] == ["path", "samples", "split"]
    assert len(rows) == 4
    assert [r[2] for r in rows[1:]] == ["train", "train", "test"]
    assert rows[1][0] == "data/p225_000.wav" and rows[1][1] == "14400"
    stats = json.loads((prepared / "stats.json").read_text())
    assert set(stats) == {"sigma_data", "p_mean", "p_std", "n_segments"}
    assert all(np.isfinite(v) for v in stats.values())


def test_prepare_is_deterministic_and_warns(prepared, capsys, tmp_path):
    dsp.write_wav(AudioClip(np.zeros(100) + 0.1, 44100), prepared / "data" / "x_odd.wav")
    try:
        code, out, err = run(capsys, "prepare", prepared / "data", "--manifest", tmp_path / "m.csv",
                             "--stats", tmp_path / "s.json", "--test-fraction", "0.34")
    finally:
        (prepared / "data" / "x_odd.wav").unlink()
    assert code == 0
    assert "warning:" in err and "x_odd.wav" in err
    assert "sigma_data" in out and "p_mean" in out and "p_std" in out
    # manifest paths are relative to the manifest, so compare row contents
    assert json.loads((tmp_path / "s.json").read_text()) == json.loads((prepared / "stats.json").read_text())
    code, *_ = run(capsys, "prepare", prepared / "data", "--manifest", tmp_path / "m2.csv",
                   "--stats", tmp_path / "s2.json", "--test-fraction", "0.34")
    assert (tmp_path / "m.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "s2.json").read_bytes()


def test_prepare_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, out, err = run(capsys, "prepare", tmp_path / "empty", "--manifest", tmp_path / "m.csv",
                         "--stats", tmp_path / "s.json")
    assert code == 2
    assert err.strip() == "error: no input files"


def _log_rows(path):
    return [line.split(",") for line in path.read_text().splitlines()]


def test_train_log_and_checkpoint(trained):
    rows = _log_rows(trained / "ck.fwck.log.csv")
    assert rows[0] == ["step", "loss", "wall_seconds"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]
    net, state = load_checkpoint(trained / "ck.fwck")
    assert state.step == 5 and net.config.base_channels == 4


def test_train_resume_continues(trained, capsys, tmp_path):
    w = trained
    ck, log = tmp_path / "r.fwck", tmp_path / "r.log"
    base = ["train", "--config", w / "tiny.cfg", "--manifest", w / "man.csv", "--stats",
            w / "stats.json", "--checkpoint", ck, "--log", log]
    assert run(capsys, *base)[0] == 0
    assert run(capsys, *base, "--resume", "--max-steps", 10)[0] == 0
    steps = [r[0] for r in _log_rows(log)[1:]]
    assert steps == [str(i) for i in range(1, 11)]
    # the resumed run must match an uninterrupted ten-step run
    ck2, log2 = tmp_path / "u.fwck", tmp_path / "u.log"
    assert run(capsys, *base[:-4], "--checkpoint", ck2, "--log", log2, "--max-steps", 10)[0] == 0
    assert ck.read_bytes() == ck2.read_bytes()
    assert [r[:2] for r in _log_rows(log)] == [r[:2] for r in _log_rows(log2)]


def test_train_deterministic(trained, capsys, tmp_path):
    w = trained
    ck, log = tmp_path / "d.fwck", tmp_path / "d.log"
    assert run(capsys, "train", "--config", w / "tiny.cfg", "--manifest", w / "man.csv", "--stats",
               w / "stats.json", "--checkpoint", ck, "--log", log)[0] == 0
    assert ck.read_bytes() == (w / "ck.fwck").read_bytes()
    assert [r[:2] for r in _log_rows(log)] == [r[:2] for r in _log_rows(w / "ck.fwck.log.csv")]


def test_train_bad_config(prepared, capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nbase_channels = 4\nwidth = 3\n")
    code, _, err = run(capsys, "train", "--config", bad, "--manifest", prepared / "man.csv",
                       "--stats", prepared / "stats.json", "--checkpoint", tmp_path / "x.fwck")
    assert code == 2
    assert err.startswith("error:") and "line 3" in err and err.count("\n") == 1


def test_upsample(trained, capsys, tmp_path):
    low = dsp.downsample(toy_corpus(1, 1.0, seed=9)[0], 6)
    dsp.write_wav(low, tmp_path / "in.wav")
    outs = []
    for name in ("a.wav", "b.wav"):
        code, out, _ = run(capsys, "upsample", "--checkpoint", trained / "ck.fwck", "--input",
                           tmp_path / "in.wav", "--output", tmp_path / name, "--nfe", 3, "--seed", 4)
        assert code == 0 and out.startswith("rtf:")
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    clip = dsp.read_wav(tmp_path / "a.wav")
    assert clip.sample_rate == 48000 and len(clip) == 48000


def test_upsample_passthrough_and_errors(trained, capsys, tmp_path):
    full = toy_corpus(1, 0.1, seed=1)[0]
    dsp.write_wav(full, tmp_path / "full.wav")
    code, _, err = run(capsys, "upsample", "--checkpoint", trained / "ck.fwck", "--input",
                       tmp_path / "full.wav", "--output", tmp_path / "o.wav")
    assert code == 0 and "warning:" in err
    assert (tmp_path / "o.wav").read_bytes() == (tmp_path / "full.wav").read_bytes()

    dsp.write_wav(AudioClip(full.samples[:100], 44100), tmp_path / "odd.wav")
    code, _, err = run(capsys, "upsample", "--checkpoint", trained / "ck.fwck", "--input",
                       tmp_path / "odd.wav", "--output", tmp_path / "o2.wav")
    assert code == 2 and err.startswith("error:")

    raw = (trained / "ck.fwck").read_bytes()
    (tmp_path / "v9.fwck").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    code, _, err = run(capsys, "upsample", "--checkpoint", tmp_path / "v9.fwck", "--input",
                       tmp_path / "full.wav", "--output", tmp_path / "o3.wav")
    assert code == 4 and err.startswith("error:") and "version" in err


def _report(path):
    return {(r[0], r[1]): (r[2], r[3]) for r in list(csv.reader(open(path)))[1:]}


def test_eval(trained, capsys, tmp_path):
    base = ["eval", "--checkpoint", trained / "ck.fwck", "--manifest", trained / "man.csv",
            "--rates", "8000,24000", "--split", "all"]
    reports = {}
    for name, nfe in (("a", 4), ("b", 4), ("c", 8)):
        code, out, _ = run(capsys, *base, "--nfe", nfe, "--out", tmp_path / f"{name}.csv")
        assert code == 0 and "Complexity" in out
        reports[name] = tmp_path / f"{name}.csv"
    assert reports["a"].read_bytes() == reports["b"].read_bytes()
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    rows = list(csv.reader(open(reports["a"])))
    assert rows[0] == ["rate", "metric", "mean", "std"]
    quality = [r for r in rows[1:] if r[0] != "complexity"]
    assert len(quality) == 2 * 4
    a, c = _report(reports["a"]), _report(reports["c"])
    assert a[("complexity", "gflops")] == c[("complexity", "gflops")]
    assert ("complexity", "params") in a
    assert float(c[("complexity", "model_calls")][0]) == 2 * float(a[("complexity", "model_calls")][0])
    assert (tmp_path / "a.timing.csv").read_text().startswith("metric,mean,std\nrtf,")


def test_eval_empty_split(trained, capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "ck.fwck", "--manifest",
                       trained / "man.csv", "--split", "dev", "--out", tmp_path / "r.csv")
    assert code == 2 and err.startswith("error:")


def test_schedule(capsys, tmp_path):
    code, out, _ = run(capsys, "schedule", "--n", 2, "--sigma-min", 0.5, "--sigma-max", 4)
    assert out == "i,sigma\n0,4\n1,0.5\n"
    code, out, _ = run(capsys, "schedule", "--n", 3, "--rho", 1, "--sigma-min", 1, "--sigma-max", 3)
    assert out == "i,sigma\n0,3\n1,2\n2,1\n"
    assert run(capsys, "schedule", "--out", tmp_path / "s.csv")[0] == 0
    rows = list(csv.reader(open(tmp_path / "s.csv")))[1:]
    for (i, v), ref in zip(rows, SCHEDULE_N8):
        assert abs(float(v) / float(ref) - 1) <= 1e-12
    code, _, err = run(capsys, "schedule", "--sigma-min", 3, "--sigma-max", 1)
    assert code == 2 and err.startswith("error:")


def test_bench(trained, capsys):
    code, out, _ = run(capsys, "bench", "--checkpoint", trained / "ck.fwck", "--repeats", 1,
                       "--nfe", 2, "--duration", 0.1)
    assert code == 0 and "params" in out and "gflops" in out and "rtf" in out


@pytest.mark.parametrize("command", ["prepare", "train", "upsample", "eval", "schedule", "bench"])
def test_help_lists_flags_with_defaults(command, capsys):
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    with pytest.raises(SystemExit) as info:
        cli.main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.default not in (None, False, "==SUPPRESS==") \
                and action.help != "==SUPPRESS==":
            assert "default" in text


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["upsample"])
    assert info.value.code == 2
    assert "error:" in capsys.readouterr().err


def test_threads_env_fallback(monkeypatch, capsys):
    monkeypatch.setenv("FASTWAVE_THREADS", "2")
    assert run(capsys, "schedule", "--n", 2)[0] == 0
    assert run(capsys, "schedule", "--n", 2, "--threads", 1)[0] == 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fastwave", "schedule", "--n", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("i,sigma\n0,80\n")
