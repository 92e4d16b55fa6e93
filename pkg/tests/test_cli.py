import json
import os

import pytest

from conftest import tiny_config
from hnet import cli
from hnet import io as hio


@pytest.fixture
def corpus_file(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_bytes(b"the quick brown fox jumps over the lazy dog. " * 120)
    return str(p)


@pytest.fixture
def tiny_config_file(tmp_path):
    p = tmp_path / "model.json"
    p.write_text(tiny_config(widths=(8, 12)).to_json())
    return str(p)


def _train(tmp_path, corpus_file, tiny_config_file, steps, extra=()):
    out = str(tmp_path / f"run{steps}")
    argv = [
        "train",
        "--config",
        tiny_config_file,
        "--corpus",
        corpus_file,
        "--out",
        out,
        "--steps",
        str(steps),
        "--seq-len",
        "64",
        "--batch-size",
        "2",
        "--eval-interval",
        "5",
        "--log-interval",
        "1",
        "--quiet",
        *extra,
    ]
    assert cli.main(argv) == 0
    return out


def test_train_zero_steps_emits_initial_checkpoint_only(
    tmp_path, corpus_file, tiny_config_file, capsys
):
    out = _train(tmp_path, corpus_file, tiny_config_file, steps=0)
    assert os.path.exists(os.path.join(out, "checkpoint.hnet"))
    assert os.path.getsize(os.path.join(out, "metrics.jsonl")) == 0
    ck = hio.load_checkpoint(os.path.join(out, "checkpoint.hnet"))
    assert ck.step == 0


def test_train_writes_metrics_config_and_plot(
    tmp_path, corpus_file, tiny_config_file, capsys
):
    out = _train(tmp_path, corpus_file, tiny_config_file, steps=6)
    lines = open(os.path.join(out, "metrics.jsonl")).read().strip().split("\n")
    recs = [json.loads(x) for x in lines]
    assert recs[0]["step"] == 0 and "loss" in recs[0]
    assert any("bpb" in r for r in recs)
    assert os.path.exists(os.path.join(out, "config.json"))
    assert os.path.exists(os.path.join(out, "plots", "bpb.tsv"))
    summary = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert summary["steps"] == 6 and "seed" in summary


def test_train_resume_from_checkpoint(tmp_path, corpus_file, tiny_config_file, capsys):
    out = _train(tmp_path, corpus_file, tiny_config_file, steps=3)
    ckpt = os.path.join(out, "checkpoint.hnet")
    out2 = str(tmp_path / "resumed")
    assert (
        cli.main(
            [
                "train",
                "--config",
                tiny_config_file,
                "--corpus",
                corpus_file,
                "--out",
                out2,
                "--steps",
                "5",
                "--seq-len",
                "64",
                "--batch-size",
                "2",
                "--resume",
                ckpt,
                "--quiet",
            ]
        )
        == 0
    )
    ck = hio.load_checkpoint(os.path.join(out2, "checkpoint.hnet"))
    assert ck.step == 5


def test_train_cleans_created_output_dir_on_abort(tmp_path, tiny_config_file):
    out = str(tmp_path / "doomed")
    with pytest.raises(FileNotFoundError):
        cli.main(
            [
                "train",
                "--config",
                tiny_config_file,
                "--corpus",
                str(tmp_path / "missing.txt"),
                "--out",
                out,
                "--steps",
                "1",
                "--quiet",
            ]
        )
    assert not os.path.exists(out)


def test_unknown_flag_rejected(corpus_file):
    with pytest.raises(SystemExit):
        cli.main(["train", "--corpus", corpus_file, "--frobnicate", "1"])


def test_eval_command_reports_bpb(tmp_path, corpus_file, tiny_config_file, capsys):
    out = _train(tmp_path, corpus_file, tiny_config_file, steps=2)
    capsys.readouterr()
    assert (
        cli.main(
            [
                "eval",
                "--checkpoint",
                os.path.join(out, "checkpoint.hnet"),
                "--corpus",
                corpus_file,
                "--seq-len",
                "64",
                "--windows",
                "3",
            ]
        )
        == 0
    )
    res = json.loads(capsys.readouterr().out.strip())
    assert "bpb" in res and "realized_ratio" in res and "seed" in res
    assert res["bpb"] > 0


def test_generate_temperature_zero_deterministic(
    tmp_path, corpus_file, tiny_config_file, capsys
):
    out = _train(tmp_path, corpus_file, tiny_config_file, steps=2)
    capsys.readouterr()
    texts = []
    for _ in range(2):
        assert (
            cli.main(
                [
                    "generate",
                    "--checkpoint",
                    os.path.join(out, "checkpoint.hnet"),
                    "--prompt",
                    "the ",
                    "--max-bytes",
                    "24",
                    "--temperature",
                    "0",
                    "--trace",
                    str(tmp_path / "trace.jsonl"),
                ]
            )
            == 0
        )
        texts.append(capsys.readouterr().out)
    assert texts[0] == texts[1]
    trace = [json.loads(x) for x in open(tmp_path / "trace.jsonl").read().strip().split("\n")]
    assert len(trace) >= 24 and set(trace[0]) == {"byte", "fired", "p", "blocks"}


def test_segment_command_renders_boundaries(
    tmp_path, corpus_file, tiny_config_file, capsys
):
    out = _train(tmp_path, corpus_file, tiny_config_file, steps=2)
    capsys.readouterr()
    seg_out = str(tmp_path / "seg.jsonl")
    assert (
        cli.main(
            [
                "segment",
                "--checkpoint",
                os.path.join(out, "checkpoint.hnet"),
                "--text",
                "the quick brown fox",
                "--out",
                seg_out,
            ]
        )
        == 0
    )
    printed = capsys.readouterr().out
    assert "stage 0" in printed
    assert "word_start_base_rate" in printed
    recs = [json.loads(x) for x in open(seg_out).read().strip().split("\n")]
    assert len(recs) == len("the quick brown fox")


def test_segment_without_input_errors(tmp_path, corpus_file, tiny_config_file):
    out = _train(tmp_path, corpus_file, tiny_config_file, steps=0)
    with pytest.raises(SystemExit):
        cli.main(["segment", "--checkpoint", os.path.join(out, "checkpoint.hnet")])


def test_flops_command_matches_module_oracle(tmp_path, capsys):
    json_out = str(tmp_path / "flops.json")
    assert (
        cli.main(
            ["flops", "--preset", "desk1", "--seq-len", "512", "--json-out", json_out]
        )
        == 0
    )
    printed = capsys.readouterr().out
    assert "FLOPs/byte" in printed
    report = json.load(open(json_out))
    assert report["total_forward"] == 197_152_536  # hand spreadsheet value
    assert report["lengths"] == [512, 85] and report["planning"]
