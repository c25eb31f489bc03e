"""Vocabulary round trips and checkpoint serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minicxr.autodiff import param
from minicxr.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from minicxr.vocab import BOS, EOS, PAD, SEP, TokenSeq, Vocabulary


def test_reserved_ids():
    v = Vocabulary.default()
    assert (PAD, BOS, EOS, SEP) == (0, 1, 2, 3)
    assert v.word_of(0) == "<pad>" and v.word_of(3) == "<sep>"


def test_default_size_and_bijection():
    v = Vocabulary.default()
    assert len(v) == 256
    words = [v.word_of(i) for i in range(len(v))]
    assert len(set(words)) == len(words)
    for i in range(len(v)):
        assert v.id_of(v.word_of(i)) == i


@settings(max_examples=50)
@given(st.lists(st.integers(min_value=0, max_value=255), max_size=30))
def test_encode_decode_round_trip(ids):
    v = Vocabulary.default()
    words = v.decode(ids)
    assert list(v.encode_words(words).ids) == ids


def test_unknown_token_raises():
    v = Vocabulary.default()
    with pytest.raises(KeyError):
        v.id_of("definitely-not-a-token")


def test_vocab_file_round_trip(tmp_path):
    v = Vocabulary.default()
    v.save(tmp_path / "vocab.txt")
    v2 = Vocabulary.load(tmp_path / "vocab.txt")
    assert [v2.word_of(i) for i in range(len(v2))] == [v.word_of(i) for i in range(len(v))]
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[BOS] == "<bos>"


def test_content_ids_strip_reserved():
    seq = TokenSeq((BOS, 10, 11, EOS, PAD))
    assert seq.content_ids() == (10, 11)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "lm.w": param(rng.standard_normal((3, 4))),
        "lm.b": param(rng.standard_normal(4)),
        "scalar": param(np.float64(2.5)),
    }
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, params, tag="mle-only")
    loaded, tag = load_checkpoint(p)
    assert tag == "mle-only"
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k].values, params[k].values)


def test_checkpoint_magic_is_versioned(tmp_path):
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, {"w": param(np.ones(2))}, tag="t")
    raw = p.read_bytes()
    assert raw.startswith(b"CGAFT1\n")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC\n" + raw[7:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)


def test_checkpoint_header_is_human_readable(tmp_path):
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, {"enc.w": param(np.zeros((2, 3)))}, tag="phase2")
    header = p.read_bytes().split(b"\n\n")[0].decode()
    assert "enc.w\t2,3\t0" in header
    assert "tag=phase2" in header
