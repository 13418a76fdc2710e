import filecmp
from pathlib import Path

import pytest

from sadfn.cli import build_parser, main
from sadfn.io import read_config
from sadfn.mri import SamplingMask
from sadfn.networks import load_checkpoint
from sadfn.phantom import HistogramTable


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_mask_full_size_rows(tmp_path):
    out = tmp_path / "mask.pgm"
    assert run("gen-mask", "--kind", "cartesian1d", "--fraction", "0.30", "--size", "240",
               "--seed", "1", "--out", out) == 0
    m = SamplingMask.load(out)
    assert len(m.rows()) == 72
    assert (tmp_path / "run.log").exists()


def test_evaluate_empty_directory(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = run("evaluate", "--data", tmp_path / "empty", "--mask", tmp_path / "m.pgm",
               "--seg", tmp_path / "seg", "--out", tmp_path / "ev")
    assert code != 0
    err = capsys.readouterr().err
    assert "no samples found" in err
    assert len(err.strip().splitlines()) == 1


def test_missing_mask_file(tmp_path, capsys):
    run("gen-data", "--out", tmp_path / "d", "--count", "2", "--size", "16")
    code = run("train-rec", "--data", tmp_path / "d", "--mask", tmp_path / "nope.pgm",
               "--out", tmp_path / "r")
    assert code == 1
    assert "mask file not found" in capsys.readouterr().err


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        run("gen-data", "--out", "x", "--bogus", "1")
    assert info.value.code != 0


def test_invalid_config_value(tmp_path, capsys):
    run("gen-data", "--out", tmp_path / "d", "--count", "2", "--size", "16")
    run("gen-mask", "--out", tmp_path / "m.pgm", "--size", "16")
    code = run("train-rec", "--data", tmp_path / "d", "--mask", tmp_path / "m.pgm",
               "--out", tmp_path / "r", "--lr", "-1")
    assert code == 1
    assert "learning rate" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", ["gen-data", "gen-mask", "train-rec", "train-seg", "train-wos",
                                 "finetune-sadfn", "finetune-cascade", "reconstruct",
                                 "evaluate", "histogram", "dump-features", "timeit"])
def test_help_lists_flags(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        run(cmd, "--help")
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "--config" in text
    if cmd.startswith(("train", "finetune")):
        assert "--iterations" in text and "default" in text


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("count = 3\nsize = 16\nseed = 4\n")
    assert run("gen-data", "--out", tmp_path / "a", "--config", cfg) == 0
    assert read_config(tmp_path / "a" / "manifest.txt")["count"] == 3
    assert run("gen-data", "--out", tmp_path / "b", "--config", cfg, "--count", "2") == 0
    assert read_config(tmp_path / "b" / "manifest.txt")["count"] == 2
    log = read_config(tmp_path / "b" / "run.log")
    assert log["config.size"] == 16 and log["seed"] == 4
    assert "version" in log and "wall_seconds" in log


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("colour = red\n")
    assert run("gen-data", "--out", tmp_path / "a", "--config", cfg) == 1
    assert "unknown config keys" in capsys.readouterr().err


def _pipeline(root: Path):
    common = ["--iterations", "3", "--eval-every", "3", "--scale", "0.25", "--n-blocks", "1",
              "--seed", "2"]
    steps = [
        ["gen-data", "--out", root / "train", "--count", "6", "--size", "16", "--seed", "2"],
        ["gen-data", "--out", root / "hold", "--count", "2", "--size", "16", "--seed", "2",
         "--start", "50"],
        ["gen-mask", "--out", root / "mask.pgm", "--size", "16", "--seed", "2"],
        ["train-rec", "--data", root / "train", "--holdout", root / "hold", "--mask",
         root / "mask.pgm", "--out", root / "rec", *common],
        ["train-seg", "--data", root / "train", "--holdout", root / "hold", "--out",
         root / "seg", "--batch-size", "2", *common],
        ["finetune-sadfn", "--data", root / "train", "--holdout", root / "hold", "--mask",
         root / "mask.pgm", "--rec", root / "rec", "--seg", root / "seg", "--out",
         root / "sadfn", *common],
        ["finetune-cascade", "--data", root / "train", "--mask", root / "mask.pgm", "--rec",
         root / "rec", "--seg", root / "seg", "--out", root / "cascade", *common],
        ["train-wos", "--data", root / "train", "--mask", root / "mask.pgm", "--out",
         root / "wos", *common],
        ["reconstruct", "--model", root / "sadfn", "--data", root / "hold", "--mask",
         root / "mask.pgm", "--out", root / "recon"],
        ["evaluate", "--data", root / "hold", "--mask", root / "mask.pgm", "--seg", root / "seg",
         "--model", root / "rec", "--model", root / "sadfn", "--model", root / "wos",
         "--model", root / "cascade", "--out", root / "eval"],
        ["histogram", "--data", root / "train", "--mask", root / "mask.pgm", "--out",
         root / "hist" / "table.tsv", "--bins", "16"],
        ["dump-features", "--model", root / "sadfn", "--data", root / "hold", "--mask",
         root / "mask.pgm", "--out", root / "feats"],
    ]
    for argv in steps:
        assert run(*argv) == 0, argv


def _artifacts(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*")
                  if p.is_file() and p.name != "run.log")


def test_end_to_end_and_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    files = _artifacts(a)
    assert files == _artifacts(b)
    for rel in files:
        assert filecmp.cmp(a / rel, b / rel, shallow=False), rel

    table = (a / "eval" / "table.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in table[1:]] == ["ZF", "Pre-RecNet", "SADFN", "SADFN-WOS",
                                                     "Liu", "Full-sampled"]
    hist = HistogramTable.from_text((a / "hist" / "table.tsv").read_text())
    assert hist.counts["Whole"].sum() == 6 * 16 * 16
    assert (a / "feats" / "mlfa.tns").exists()
    params, scalars = load_checkpoint(a / "sadfn")
    assert scalars["stage"] == "sadfn"
    assert any(k.startswith("pre_seg.") for k in params)
    assert len(list((a / "recon").glob("recon_*.tns"))) == 2


def test_timeit_reports_models(tmp_path, capsys):
    root = tmp_path
    run("gen-data", "--out", root / "d", "--count", "1", "--size", "16")
    run("gen-mask", "--out", root / "m.pgm", "--size", "16")
    run("train-rec", "--data", root / "d", "--mask", root / "m.pgm", "--out", root / "rec",
        "--iterations", "1", "--scale", "0.25", "--n-blocks", "1")
    capsys.readouterr()
    assert run("timeit", "--data", root / "d", "--mask", root / "m.pgm", "--model", root / "rec",
               "--repeat", "1", "--out", root / "t.tsv") == 0
    rows = (root / "t.tsv").read_text().splitlines()
    assert rows[0] == "model\tseconds" and rows[2].startswith("Pre-RecNet\t")
    assert float(rows[2].split("\t")[1]) >= 0


def test_dump_features_needs_sadfn(tmp_path, capsys):
    root = tmp_path
    run("gen-data", "--out", root / "d", "--count", "1", "--size", "16")
    run("gen-mask", "--out", root / "m.pgm", "--size", "16")
    run("train-rec", "--data", root / "d", "--mask", root / "m.pgm", "--out", root / "rec",
        "--iterations", "0", "--scale", "0.25", "--n-blocks", "1")
    assert run("dump-features", "--model", root / "rec", "--data", root / "d", "--mask",
               root / "m.pgm", "--out", root / "f") == 1
    assert "sadfn checkpoint" in capsys.readouterr().err


def test_parser_has_all_subcommands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert {"gen-data", "gen-mask", "train-rec", "train-seg", "finetune-sadfn",
            "finetune-cascade", "reconstruct", "evaluate", "histogram", "dump-features",
            "timeit"} <= set(sub.choices)
