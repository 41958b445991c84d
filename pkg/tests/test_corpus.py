import numpy as np
import pytest
from scipy import stats

from quacklab.corpus import (DELIMITER, SyntheticCorpusSpec, generate_corpus, sample_batch,
                             transition_table)


@pytest.mark.parametrize("kind", ["copy", "markov"])
def test_deterministic_and_in_range(kind):
    spec = SyntheticCorpusSpec(vocab_size=17, kind=kind, length=5000, seed=3)
    a, b = generate_corpus(spec), generate_corpus(spec)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() < 17 and a.size == 5000
    other = generate_corpus(SyntheticCorpusSpec(vocab_size=17, kind=kind, length=5000, seed=4))
    assert not np.array_equal(a, other)


def test_copy_segments_repeat():
    corpus = generate_corpus(SyntheticCorpusSpec(vocab_size=50, length=3000, seed=1))
    cuts = np.flatnonzero(corpus == DELIMITER)
    pieces = np.split(corpus, cuts)
    # pieces: seg, DELIM+seg, DELIM+seg', DELIM+seg', ...
    segs = [pieces[0]] + [p[1:] for p in pieces[1:]]
    for first, second in zip(segs[0:-2:2], segs[1:-2:2]):
        assert np.array_equal(first, second)
        assert 4 <= first.size <= 16


def test_markov_bigrams_match_table():
    spec = SyntheticCorpusSpec(vocab_size=8, kind="markov", length=1_000_000, seed=5,
                               concentration=1.0)
    corpus = generate_corpus(spec)
    table = transition_table(spec)
    counts = np.zeros((8, 8))
    np.add.at(counts, (corpus[:-1], corpus[1:]), 1)
    for state in range(8):
        row = counts[state]
        expected = table[state] * row.sum()
        keep = expected >= 5
        chi2 = ((row[keep] - expected[keep]) ** 2 / expected[keep]).sum()
        # Bonferroni over the 8 rows keeps the family-wise level at 1%
        assert chi2 <= stats.chi2.ppf(1 - 0.01 / 8, keep.sum() - 1), state


def test_sample_batch_windows(rng):
    corpus = np.arange(100)
    batch = sample_batch(corpus, rng, 5, 10)
    assert batch.shape == (5, 10)
    assert np.all(np.diff(batch, axis=1) == 1)
    with pytest.raises(ValueError):
        sample_batch(corpus, rng, 1, 101)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(kind="zipf")
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(vocab_size=1)
    with pytest.raises(ValueError):
        SyntheticCorpusSpec(min_segment=5, max_segment=4)
