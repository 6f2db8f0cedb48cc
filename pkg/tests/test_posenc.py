import numpy as np
import pytest
from scipy.stats import spearmanr

from scenemrf.posenc import (
    FrequencySet,
    decode_on_grid,
    encode_box,
    encode_boxes,
    envelope,
    expand_encoding,
    low_disc,
    make_frequency_set,
    overlap_score,
    shift_encoding,
)


@pytest.fixture(scope="module")
def freqs():
    return make_frequency_set(48, 6, 128, seed=0)


def test_disc_count_and_frequency_set(freqs):
    disc = {(x, y) for x in range(-48, 49) for y in range(0, 7) if x * x + y * y <= 36}
    pairs = {tuple(p) for p in freqs.pairs.tolist()}
    assert len(freqs) == 128 and len(pairs) == 128
    assert disc <= pairs
    assert {tuple(p) for p in low_disc(48, 6).tolist()} == disc
    assert np.all(np.abs(freqs.pairs[:, 0]) <= 48) and np.all((freqs.pairs[:, 1] >= 0) & (freqs.pairs[:, 1] <= 48))


def test_theta_low_zero_forces_only_origin():
    assert low_disc(48, 0).tolist() == [[0, 0]]
    f = make_frequency_set(48, 0, 10, seed=1)
    assert [0, 0] in f.pairs.tolist()


def test_frequency_set_determinism_and_errors(freqs):
    assert make_frequency_set(48, 6, 128, seed=0) == freqs
    assert make_frequency_set(48, 6, 128, seed=1) != freqs
    assert FrequencySet.from_dict(freqs.to_dict()) == freqs
    with pytest.raises(ValueError):
        make_frequency_set(48, 6, 10, seed=0)


def test_point_box_and_zero_frequency(freqs):
    e = encode_box([0.0, 0.0, 0.0, 0.0], freqs)
    n = len(freqs)
    assert np.allclose(e[:n], 1.0) and np.allclose(e[n:], 0.0)
    zero = int(np.flatnonzero((freqs.pairs == 0).all(axis=1))[0])
    e = encode_box([0.3, 0.8, 0.2, 0.1], freqs)
    assert e[zero] == 1.0 and e[n + zero] == 0.0
    assert np.all(np.abs(e) <= 1.0)
    with pytest.raises(ValueError):
        encode_box([0.5, 0.5, -0.1, 0.1], freqs)


def test_envelope_value():
    f = FrequencySet(np.array([[1, 0]]), 48, 6, 0)
    narrow = encode_box([0.0, 0.0, 0.0, 0.0], f)
    wide = encode_box([0.0, 0.0, 1.0, 0.0], f)
    assert np.isclose(wide[0] / narrow[0], np.exp(-(1 - np.cos(1))))
    assert abs(wide[0] - 0.6314) < 1e-4


def test_shift_identity_and_composition(freqs):
    rng = np.random.default_rng(0)
    for _ in range(100):
        box = np.r_[rng.uniform(0, 1, 2), rng.uniform(0, 0.5, 2)]
        d1, d2 = rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.5, 0.5, 2)
        e = encode_box(box, freqs)
        moved = encode_box(box + np.r_[d1, 0, 0], freqs)
        assert np.max(np.abs(shift_encoding(e, *d1, freqs) - moved)) < 1e-12
        twice = shift_encoding(shift_encoding(e, *d1, freqs), *d2, freqs)
        assert np.max(np.abs(twice - shift_encoding(e, *(d1 + d2), freqs))) < 1e-12
    assert np.array_equal(shift_encoding(e, 0.0, 0.0, freqs), e)
    with pytest.raises(ValueError):
        shift_encoding(e[:-1], 0.1, 0.1, freqs)


def test_envelope_multiplicativity(freqs):
    rng = np.random.default_rng(1)
    boxes = np.c_[rng.uniform(0, 1, (50, 2)), rng.uniform(0, 0.5, (50, 2))]
    extra = rng.uniform(0, 0.5, (50, 2))
    base = encode_boxes(boxes, freqs)
    wide = encode_boxes(boxes + np.c_[np.zeros((50, 2)), extra], freqs)
    for k in range(50):
        assert np.max(np.abs(expand_encoding(base[k], *extra[k], freqs) - wide[k])) < 1e-12
    env = envelope(extra[:, 0], extra[:, 1], freqs)
    assert env.shape == (50, 128)


def test_identical_boxes_score_highest(freqs):
    box = np.array([0.5, 0.5, 0.1, 0.1])
    own = overlap_score(encode_box(box, freqs), encode_box(box, freqs))
    for dx in np.linspace(-0.4, 0.4, 9):
        for dy in np.linspace(-0.4, 0.4, 9):
            other = encode_box(box + [dx, dy, 0, 0], freqs)
            assert overlap_score(encode_box(box, freqs), other) <= own + 1e-12


def test_far_small_boxes_nearly_orthogonal(freqs):
    a = encode_box([0.25, 0.5, 0.02, 0.02], freqs)
    b = encode_box([0.75, 0.5, 0.02, 0.02], freqs)
    assert abs(overlap_score(a, b)) / overlap_score(a, a) < 0.1
    with pytest.raises(ValueError):
        overlap_score(a, b[:-1])


def test_overlap_ranks_match_spatial_overlap():
    disc = low_disc(48, 6)
    f = make_frequency_set(48, 6, len(disc), seed=0)
    axis = np.arange(256) / 128.0
    rng = np.random.default_rng(2)
    scores, integrals = [], []
    for _ in range(200):
        a = np.r_[rng.uniform(0, 1, 2), rng.uniform(0.02, 0.3, 2)]
        b = np.r_[rng.uniform(0, 1, 2), rng.uniform(0.02, 0.3, 2)]
        ea, eb = encode_box(a, f), encode_box(b, f)
        scores.append(overlap_score(ea, eb))
        integrals.append(np.mean(decode_on_grid(ea, f, axis, axis) * decode_on_grid(eb, f, axis, axis)))
    assert spearmanr(scores, integrals)[0] > 0.9
