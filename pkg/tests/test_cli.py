"""Command-line driver: end-to-end tiny pipeline, exit codes, determinism,
and report structure."""

import json
import os

import numpy as np
import pytest

from mvpt import cli
from mvpt import data as dt

TINY = ["--image_size", "32", "--embed_dim", "16", "--depths", "1,1",
        "--heads", "2,2", "--prompt_len", "2", "--n_subjects", "30",
        "--pretrain_epochs", "1", "--pretrain_batch", "8",
        "--tune_epochs", "1", "--tune_batch", "8", "--augment", "false"]


def args(cmd, tmp_path, *extra):
    return [cmd, "--data_dir", str(tmp_path / "data"),
            "--out_dir", str(tmp_path / "runs")] + TINY + list(extra)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny synth+pretrain+tune+eval pipeline shared by the tests."""
    tmp_path = tmp_path_factory.mktemp("pipe")
    assert cli.main(args("synth", tmp_path)) == 0
    assert cli.main(args("pretrain", tmp_path)) == 0
    assert cli.main(args("tune", tmp_path, "--stage1",
                         str(tmp_path / "runs" / "stage1.ckpt"),
                         "--fold", "0")) == 0
    assert cli.main(args("eval", tmp_path, "--ckpt",
                         str(tmp_path / "runs" / "stage2_fold0.ckpt"),
                         "--report", str(tmp_path / "runs" / "report.json"))) == 0
    return tmp_path


def test_pipeline_artifacts(pipeline):
    runs = pipeline / "runs"
    for f in ("stage1.ckpt", "stage2_fold0.ckpt", "pretrain_log.json",
              "tune_log_fold0.json", "trainable_report_fold0.json", "report.json"):
        assert (runs / f).exists(), f
    assert (pipeline / "data" / "manifest.csv").exists()
    assert (pipeline / "data" / "split.csv").exists()


def test_eval_report_structure(pipeline):
    rep = json.loads((pipeline / "runs" / "report.json").read_text())
    assert set(rep["single_view"]) == {"mlo", "cc", "averaged"}
    for block in (*rep["single_view"].values(), rep["multi_view"]):
        assert {"accuracy", "auroc", "f1_macro",
                "precision_macro", "recall_macro"} <= set(block)


def test_trainable_report_fraction(pipeline):
    rep = json.loads((pipeline / "runs" / "trainable_report_fold0.json").read_text())
    hand = sum(r["elements"] for r in rep["tensors"] if not r["frozen"])
    assert rep["learnable"] == hand
    assert rep["trainable_fraction"] == pytest.approx(hand / rep["total"])


def test_synth_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["synth", "--data_dir", str(d / "data"),
                         "--out_dir", str(d / "runs")] + TINY) == 0
    fa = (a / "data" / "manifest.csv").read_bytes()
    fb = (b / "data" / "manifest.csv").read_bytes()
    assert fa == fb
    assert (a / "data" / "split.csv").read_bytes() == (b / "data" / "split.csv").read_bytes()
    ia = (a / "data" / "images" / "subj00000_mlo.pgm").read_bytes()
    ib = (b / "data" / "images" / "subj00000_mlo.pgm").read_bytes()
    assert ia == ib


def test_pretrain_deterministic_bytes(tmp_path):
    assert cli.main(args("synth", tmp_path)) == 0
    assert cli.main(args("pretrain", tmp_path)) == 0
    first = (tmp_path / "runs" / "stage1.ckpt").read_bytes()
    first_log = (tmp_path / "runs" / "pretrain_log.json").read_bytes()
    assert cli.main(args("pretrain", tmp_path)) == 0
    assert (tmp_path / "runs" / "stage1.ckpt").read_bytes() == first
    assert (tmp_path / "runs" / "pretrain_log.json").read_bytes() == first_log


def test_unknown_config_key_exit_1(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"not_a_key": 1}))
    assert cli.main(["synth", "--config", str(cfg)]) == 1


def test_bad_scheme_exit_1(tmp_path):
    assert cli.main(args("synth", tmp_path, "--scheme", "lattice")) == 1


def test_missing_data_dir_exit_2(tmp_path):
    assert cli.main(args("pretrain", tmp_path)) == 2


def test_mismatched_checkpoint_config_fails(pipeline, tmp_path):
    # eval with a config whose shapes disagree with the checkpoint
    rc = cli.main(["eval", "--data_dir", str(pipeline / "data"),
                   "--out_dir", str(tmp_path)] + TINY +
                  ["--embed_dim", "32", "--ckpt",
                   str(pipeline / "runs" / "stage1.ckpt")])
    assert rc == 2


def test_lambda_alias_maps_to_lam(tmp_path):
    parser = cli.build_parser()
    ns = parser.parse_args(["tune", "--stage1", "x", "--lambda", "0.3"])
    run = cli._build_config(ns)
    assert run.lam == pytest.approx(0.3)


def test_config_json_round_trip(tmp_path):
    from mvpt.config import RunConfig
    cfg = RunConfig(prompt_len=7, lam=0.25, depths=(1, 1), heads=(2, 2),
                    embed_dim=16, image_size=32)
    p = tmp_path / "cfg.json"
    cfg.save(p)
    back = RunConfig.load(p)
    assert back == cfg


def test_audit_exit_zero(capsys):
    assert cli.main(["audit"] + TINY) == 0
    out = capsys.readouterr().out
    assert "fraction" in out
    assert cli.main(["audit", "--full-scale"]) == 0
    out = capsys.readouterr().out
    assert "0.0683" in out
