"""Synthetic corpus construction, label checks and record persistence."""
import numpy as np
import pytest

from elastic_hybrid.corpus import (
    BOS, COPY_BASE, DIGIT_BASE, MODULUS, QUERY, SEP, BatchStream, CorpusSpec, Sample, copy_span_mask, generate,
    load_records, markov_table, modchain_answer, save_records, stage_specs, to_batch, verify_sample,
)


def test_copy_sample_repeats_content_after_separator():
    spec = CorpusSpec(weights={"copy": 1.0}, seq_len=64, copy_k=(16, 16))
    s = generate(spec, 1, rng=3)[0]
    x = s.tokens
    assert x[0] == BOS and x[17] == SEP
    np.testing.assert_array_equal(x[18:34], x[1:17])
    np.testing.assert_array_equal(x[34:50], x[1:17])


def test_same_seed_same_corpus():
    spec = CorpusSpec(seq_len=32)
    a = [s.tokens for s in generate(spec, 20, rng=5)]
    b = [s.tokens for s in generate(spec, 20, rng=5)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_modchain_answers_match_running_sum():
    spec = CorpusSpec(weights={"modchain": 1.0}, seq_len=128)
    checked = 0
    for s in generate(spec, 30, rng=1):
        x = s.tokens.tolist()
        start = 1
        for i in range(1, len(x) - 1):
            if x[i] == QUERY:
                digits = [t - DIGIT_BASE for t in x[start:i]]
                assert x[i + 1] - DIGIT_BASE == sum(digits) % MODULUS == modchain_answer(digits)
                start = i + 2
                checked += 1
    assert checked > 100


def test_tokens_stay_in_byte_range_and_verify():
    for spec in stage_specs(64, 256):
        for s in generate(spec, 60, rng=0):
            assert 0 <= s.tokens.min() and s.tokens.max() <= 255
            assert len(s.tokens) == spec.seq_len + 1


def test_verify_sample_catches_corruption():
    s = generate(CorpusSpec(weights={"copy": 1.0}, seq_len=32), 1, rng=0)[0]
    bad = Sample(s.tokens.copy(), "copy", s.k)
    bad.tokens[-1] = COPY_BASE + (bad.tokens[-1] - COPY_BASE + 1) % 64
    with pytest.raises(ValueError):
        verify_sample(bad)
    m = generate(CorpusSpec(weights={"modchain": 1.0}, seq_len=32), 1, rng=0)[0]
    i = int(np.where(m.tokens == QUERY)[0][0])
    m.tokens[i + 1] = DIGIT_BASE + (m.tokens[i + 1] - DIGIT_BASE + 1) % MODULUS
    with pytest.raises(ValueError):
        verify_sample(m)


def test_copy_span_is_determined_by_context():
    """Every target inside the copy span is the matching content token."""
    spec = stage_specs(64, 256)[1]
    for s in generate(spec, 20, rng=2, task="copy"):
        x, y = to_batch([s])
        m = copy_span_mask(s)
        pos = np.where(m)[0]
        assert len(pos) > 0
        content = x[0, 1 : 1 + s.k]
        np.testing.assert_array_equal(y[0, pos], content[(pos + 1 - s.k - 2) % s.k])


def test_stage_two_copies_need_more_than_stage_one_context():
    s1, s2 = stage_specs(64, 256)
    lo, hi = s2.k_range
    assert lo >= s1.seq_len - s1.seq_len // 8 and hi <= (s2.seq_len - 1) // 2
    assert s2.weights["copy"] > s1.weights["copy"]


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(seq_len=4)
    with pytest.raises(ValueError):
        CorpusSpec(weights={"copy": 0.5})
    with pytest.raises(ValueError):
        CorpusSpec(weights={"poetry": 1.0})
    with pytest.raises(ValueError):
        CorpusSpec(seq_len=16, copy_k=(4, 12))
    with pytest.raises(ValueError):
        CorpusSpec(vocab=512)


def test_markov_table_rows_are_distributions():
    t = markov_table(0)
    assert t.shape == (32, 32, 32)
    np.testing.assert_allclose(t.sum(-1), 1.0)


def test_records_round_trip(tmp_path):
    samples = generate(CorpusSpec(seq_len=40), 25, rng=4)
    save_records(samples, tmp_path / "c.bin")
    back = load_records(tmp_path / "c.bin")
    assert [(s.task, s.k) for s in back] == [(s.task, s.k) for s in samples]
    assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(samples, back))
    (tmp_path / "t.bin").write_bytes((tmp_path / "c.bin").read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_records(tmp_path / "t.bin")


def test_batch_stream_is_reproducible():
    spec = CorpusSpec(seq_len=16)
    a, b = BatchStream(spec, 4, 1), BatchStream(spec, 4, 1)
    for _ in range(3):
        xa, ya = a.next()
        xb, yb = b.next()
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
        assert xa.shape == (4, 16)
        np.testing.assert_array_equal(xa[:, 1:], ya[:, :-1])
