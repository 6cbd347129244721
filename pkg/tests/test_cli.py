import hashlib
import subprocess
import sys

import pytest
from scipy.io import wavfile

from skqvc.cli import build_parser, resolve_options, run
from skqvc.codebook import load_codebook
from skqvc.features import load_features

FAST_TRAIN = ["--steps", "2", "--batch-size", "2", "--segment-frames", "8", "--gen-channels", "16",
              "--disc-scale", "0.015625"]


@pytest.fixture(scope="module")
def mini_corpus(tmp_path_factory, toy_dir):
    d = tmp_path_factory.mktemp("mini")
    for name in ("spk00_000", "spk00_001", "spk01_000", "spk01_001"):
        (d / f"{name}.wav").write_bytes((toy_dir / f"{name}.wav").read_bytes())
    return d


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_help_shows_paper_defaults(capsys):
    assert run(["build-codebook", "--help"]) == 0
    out = capsys.readouterr().out
    assert "--k K" in out and "(default: 256)" in out and "(default: 1024)" in out
    assert run(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "(default: 2.0)" in out and "(default: 45.0)" in out and "(default: 0.0002)" in out


def test_every_subcommand_help_lists_flags_with_defaults(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.option_strings and action.dest not in ("help",):
                assert action.help, (name, action.dest)
    assert run(["--help"]) == 0


def test_usage_errors_exit_1(capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert "unknown subcommand" in capsys.readouterr().err
    assert run(["build-codebook", "--k", "many", "--out", "x"]) == 1
    assert run(["convert", "--source", "a.wav"]) == 1
    assert "missing required flag" in capsys.readouterr().err
    assert run(["sweep", "--data", "d", "--out", "o", "--svcomp", "sometimes"]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    code = run(["build-codebook", "--features", str(tmp_path), "--out", str(tmp_path / "cb.skqc")])
    assert code == 2
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and "EmptyDataset" in err
    bad = tmp_path / "bad.skqc"
    bad.write_bytes(b"garbage")
    code = run(["convert", "--source", "a.wav", "--target", "b.wav", "--ckpt", "m.bin",
                "--codebook", str(bad), "--out", str(tmp_path / "o.wav")])
    assert code == 2


def test_config_merge_and_env_seed(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("k = 12\nbatch_size = 64  # comment\nseed = 5\n")
    args = build_parser().parse_args(["build-codebook", "--config", str(cfg), "--k", "7", "--out", "x"])
    o = resolve_options("build-codebook", args, env={})
    assert (o["k"], o["batch_size"], o["seed"]) == (7, 64, 5)

    args = build_parser().parse_args(["build-codebook", "--out", "x"])
    assert resolve_options("build-codebook", args, env={"SKQVC_SEED": "9"})["seed"] == 9
    assert resolve_options("build-codebook", args, env={})["seed"] == 0
    args = build_parser().parse_args(["build-codebook", "--out", "x", "--seed", "3"])
    assert resolve_options("build-codebook", args, env={"SKQVC_SEED": "9"})["seed"] == 3


def test_extract_and_build_codebook_reproducible(tmp_path, mini_corpus, capsys):
    feats = tmp_path / "feats"
    assert run(["extract-features", "--data", str(mini_corpus), "--out", str(feats), "--encoder", "pseudo(0)"]) == 0
    files = sorted(feats.glob("*.skqf"))
    assert len(files) == 4 and load_features(files[0]).dim == 1024
    capsys.readouterr()
    a, b = tmp_path / "a.skqc", tmp_path / "b.skqc"
    for out in (a, b):
        assert run(["build-codebook", "--features", str(feats), "--k", "16", "--batch-size", "1024",
                    "--seed", "7", "--max-iters", "10", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "K=16" in printed and "dim=1024" in printed and "frames=" in printed
    assert sha(a) == sha(b)
    assert load_codebook(a).seed == 7

    # passthrough re-encodes the existing feature files unchanged
    again = tmp_path / "again"
    assert run(["extract-features", "--data", str(mini_corpus), "--out", str(again),
                "--encoder", f"skqf({feats})"]) == 0
    assert all(sha(f) == sha(again / f.name) for f in files)


def test_train_convert_evaluate(tmp_path, mini_corpus, capsys):
    cb = tmp_path / "cb.skqc"
    assert run(["build-codebook", "--data", str(mini_corpus), "--k", "16", "--seed", "1",
                "--max-iters", "5", "--out", str(cb)]) == 0
    run_dir = tmp_path / "run"
    assert run(["train", "--data", str(mini_corpus), "--codebook", str(cb), "--out-dir", str(run_dir),
                *FAST_TRAIN]) == 0
    ckpt = run_dir / "final.bin"
    assert ckpt.is_file()
    assert len((run_dir / "train.log").read_text().splitlines()) == 2

    out = tmp_path / "c.wav"
    src = mini_corpus / "spk00_000.wav"
    assert run(["convert", "--source", str(src), "--target", str(mini_corpus / "spk01_001.wav"),
                "--ckpt", str(ckpt), "--codebook", str(cb), "--out", str(out)]) == 0
    sr, y = wavfile.read(out)
    n_src = wavfile.read(src)[1].shape[0]
    assert sr == 16000 and y.shape[0] == (n_src // 320) * 320

    capsys.readouterr()
    table = tmp_path / "eval.csv"
    assert run(["evaluate", "--data", str(mini_corpus), "--ckpt", str(ckpt), "--codebook", str(cb),
                "--heldout", "1", "--out", str(table)]) == 0
    header = table.read_text().splitlines()[0]
    assert header == "recon_mel_l1,f0_pcc,code_agreement,speaker_auc"

    # a different codebook is refused with a runtime error
    other = tmp_path / "other.skqc"
    assert run(["build-codebook", "--data", str(mini_corpus), "--k", "16", "--seed", "2",
                "--max-iters", "5", "--out", str(other)]) == 0
    assert run(["convert", "--source", str(src), "--target", str(src), "--ckpt", str(ckpt),
                "--codebook", str(other), "--out", str(out)]) == 2


def test_train_seed_reproducible(tmp_path, mini_corpus):
    cb = tmp_path / "cb.skqc"
    assert run(["build-codebook", "--data", str(mini_corpus), "--k", "8", "--max-iters", "3", "--out", str(cb)]) == 0
    logs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert run(["train", "--data", str(mini_corpus), "--codebook", str(cb), "--out-dir", str(d),
                    "--seed", "4", *FAST_TRAIN]) == 0
        logs.append((d / "train.log").read_text())
    assert logs[0] == logs[1]


def test_train_config_file(tmp_path, mini_corpus):
    cb = tmp_path / "cb.skqc"
    assert run(["build-codebook", "--data", str(mini_corpus), "--k", "8", "--max-iters", "3", "--out", str(cb)]) == 0
    cfg = tmp_path / "train.cfg"
    cfg.write_text("max_steps = 1\nsvcomp_enabled = false\ngen_resblock_kernels = 3\nlambda_mel = 30\n")
    d = tmp_path / "r"
    assert run(["train", "--config", str(cfg), "--data", str(mini_corpus), "--codebook", str(cb),
                "--out-dir", str(d), "--batch-size", "2", "--segment-frames", "8", "--gen-channels", "16",
                "--disc-scale", "0.015625"]) == 0
    saved = (d / "config.txt").read_text()
    assert "svcomp_enabled = false" in saved and "lambda_mel = 30.0" in saved
    assert "gen_resblock_kernels = 3\n" in saved
    assert len((d / "train.log").read_text().splitlines()) == 1


def test_toy_corpus_subcommand(tmp_path):
    assert run(["toy-corpus", "--out", str(tmp_path / "t"), "--speakers", "2", "--clips", "2", "--seed", "1"]) == 0
    assert len(list((tmp_path / "t").glob("*.wav"))) == 4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "skqvc", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
    proc = subprocess.run([sys.executable, "-m", "skqvc", "sweep", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "128,256,512,1024,4096,8192" in proc.stdout
