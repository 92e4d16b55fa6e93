import json
import os

import numpy as np
import pytest

from conftest import tiny_model
from hnet import io as hio
from hnet import trainer as tr


# -- corpus -------------------------------------------------------------------


def test_corpus_contiguous_split(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(bytes(range(100)))
    c = hio.load_corpus(p, 0.9)
    assert len(c.train) == 90 and len(c.val) == 10
    assert c.train[0] == 0 and c.val[0] == 90


def test_corpus_same_seed_same_windows(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(os.urandom(4096))
    a = hio.load_corpus(p, 0.9, seed=5).windows(64, 8)
    b = hio.load_corpus(p, 0.9, seed=5).windows(64, 8)
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa, wb)


def test_corpus_windows_are_bytes_not_characters(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes("héllo wörld ".encode("utf-8") * 300)
    c = hio.load_corpus(p, 1.0, seed=0)
    w = c.windows(9, 4)
    assert all(len(x) == 10 for x in w)  # raw byte windows, multi-byte chars split


def test_corpus_empty_rejected(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    with pytest.raises(ValueError, match="empty"):
        hio.load_corpus(p, 0.9)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip_byte_identical(tmp_path):
    net = tiny_model(seed=3)
    gen = np.random.default_rng(1)
    gen.integers(0, 10, 3)
    p1 = tmp_path / "a.hnet"
    p2 = tmp_path / "b.hnet"
    hio.save_checkpoint(
        str(p1), net, step=7, rng_state=hio.rng_state_to_json(gen)
    )
    ck = hio.load_checkpoint(str(p1))
    assert ck.step == 7
    net2 = hio.restore_model(ck)
    hio.save_checkpoint(str(p2), net2, step=ck.step, rng_state=ck.rng_state)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_restores_exact_weights(tmp_path):
    net = tiny_model(seed=3)
    p = tmp_path / "w.hnet"
    hio.save_checkpoint(str(p), net)
    net2 = hio.restore_model(hio.load_checkpoint(str(p)), seed=99)
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), net2.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)


def test_checkpoint_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.hnet"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        hio.load_checkpoint(str(p))


def test_checkpoint_shape_validation(tmp_path):
    net = tiny_model(seed=3)
    p = tmp_path / "w.hnet"
    hio.save_checkpoint(str(p), net)
    ck = hio.load_checkpoint(str(p))
    ck.arrays["embed.table"] = ck.arrays["embed.table"][:, :2]
    with pytest.raises(ValueError, match="shape"):
        hio.restore_model(ck)


def test_checkpoint_rng_state_round_trip(tmp_path):
    gen = np.random.default_rng(42)
    gen.integers(0, 1000, 17)
    net = tiny_model(seed=0)
    p = tmp_path / "r.hnet"
    hio.save_checkpoint(str(p), net, rng_state=hio.rng_state_to_json(gen))
    restored = hio.rng_from_json(hio.load_checkpoint(str(p)).rng_state)
    np.testing.assert_array_equal(
        gen.integers(0, 1000, 8), restored.integers(0, 1000, 8)
    )


def test_checkpoint_carries_optimizer_state(tmp_path):
    net = tiny_model(seed=3)
    tc = tr.TrainConfig()
    opt = tr.AdamW(net, tc, tr.stage_lambdas(net, tc))
    for _, p in net.named_parameters():
        p.grad = np.ones_like(p.data)
    opt.step(1.0)
    path = tmp_path / "o.hnet"
    hio.save_checkpoint(
        str(path), net, optimizer_arrays=opt.state_arrays(), adam_t=opt.t
    )
    ck = hio.load_checkpoint(str(path))
    assert ck.has_optimizer and ck.adam_t == 1
    opt2 = tr.AdamW(hio.restore_model(ck), tc, tr.stage_lambdas(net, tc))
    opt2.load_state_arrays(ck.arrays, ck.adam_t)
    for name in opt.m:
        np.testing.assert_array_equal(opt.m[name], opt2.m[name])
        np.testing.assert_array_equal(opt.v[name], opt2.v[name])


# -- metrics / plots -------------------------------------------------------------


def test_jsonl_writer_line_delimited(tmp_path):
    p = tmp_path / "m.jsonl"
    with hio.JsonlWriter(p) as w:
        w.write({"step": 0, "loss": 1.5})
        w.write({"step": 1, "loss": 1.2})
    lines = p.read_text().strip().split("\n")
    assert [json.loads(x)["step"] for x in lines] == [0, 1]


def test_plot_data_format(tmp_path):
    p = tmp_path / "bpb.tsv"
    hio.write_plot_data(p, [(0, 8.0), (100, 3.5)])
    lines = p.read_text().strip().split("\n")
    assert lines[0] == "step\tvalue"
    assert lines[1].startswith("0\t8.0")


# -- robustness score -------------------------------------------------------------


def test_robustness_score_examples():
    assert hio.robustness_score(0.55, 0.65) == pytest.approx(75.0)
    assert hio.robustness_score(0.65, 0.65) == pytest.approx(100.0)


def test_robustness_score_undefined_at_chance():
    assert hio.robustness_score(0.3, 0.25) is None
    assert hio.robustness_score(0.3, 0.20) is None


def test_robustness_score_validates_range():
    with pytest.raises(ValueError):
        hio.robustness_score(1.5, 0.5)


# -- boundary visualization ---------------------------------------------------------


def test_visualization_structurally_valid_untrained(rng):
    net = tiny_model(seed=2, n_stages=2, widths=(8, 8, 12))
    data = np.frombuffer(b"hello world, this is a byte stream.", dtype=np.uint8)
    viz = hio.visualize_boundaries(net, data.astype(np.int64))
    assert len(viz.records) == len(data)
    r0 = viz.records[0]
    assert r0["flags"][0] is True  # first position is always a boundary
    assert set(r0) == {"pos", "byte", "char", "flags", "p"}
    text = viz.render_text()
    assert "stage 0" in text and "stage 1" in text
    jsonl = viz.to_jsonl().split("\n")
    assert len(jsonl) == len(data)
    json.loads(jsonl[0])


def test_visualization_flags_match_decisions(rng):
    net = tiny_model(seed=2)
    data = rng.integers(32, 127, 40)
    viz = hio.visualize_boundaries(net, data)
    dec = net.forward(data).decisions[0]
    flags = np.array([r["flags"][0] for r in viz.records])
    np.testing.assert_array_equal(flags, dec.b)


def test_word_start_overlap_statistics():
    text = b"the cat sat on the mat"
    flags = np.zeros(len(text), dtype=bool)
    flags[[0, 4, 8, 12, 15, 19]] = True  # exactly the word starts
    stats = hio.word_start_overlap(np.frombuffer(text, dtype=np.uint8), flags)
    assert stats["boundary_word_start_precision"] == 1.0
    assert 0 < stats["word_start_base_rate"] < 0.5
    assert stats["lift"] > 2.0
