import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from streamsplat.memory import (EmptyBankError, MemoryBank, UndefinedCoverageError, direction_key_from_angles,
                                direction_query, softmax_rows, temperature)

seeds = st.integers(0, 2**31 - 1)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def filled_bank(rng, views, P=4, C=8, capacity=None, dirs=None):
    bank = MemoryBank(C, P, capacity or views * P)
    for t in range(views):
        d = unit(rng.normal(size=3)) if dirs is None else dirs[t]
        bank.write(rng.normal(size=(P, C)), d, rng.normal(size=(P, C)), t)
    return bank


def test_direction_key_examples():
    np.testing.assert_allclose(direction_key_from_angles(1.234, 0.0), [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(direction_key_from_angles(0.0, math.pi / 2), [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(direction_key_from_angles(math.pi / 2, math.pi / 2), [0, 1, 0], atol=1e-15)
    with pytest.raises(ValueError):
        direction_key_from_angles(float("nan"), 0.0)


def test_direction_query_examples():
    np.testing.assert_allclose(direction_query([0, 0, 1], [0, 0, 1]), [0, 0, 1])
    np.testing.assert_allclose(direction_query([1, 0, 0], [0, 1, 0]), [0.70710678, 0.70710678, 0], atol=1e-8)
    np.testing.assert_array_equal(direction_query([1, 0, 0], [-1, 0, 0]), [1, 0, 0])
    with pytest.raises(ValueError):
        direction_query([1.01, 0, 0], [0, 1, 0])


def test_temperature():
    assert temperature(1) == 1.5 and temperature(0) == 2.5 and temperature(0.5) == 2.0
    assert temperature(3.0) == 1.5 and temperature(-1) == 2.5


def test_score_examples():
    bank = MemoryBank(2, 1, 4)
    bank.write([[1.0, 0.0]], [0, 0, 1], [[0.0, 0.0]], 0)
    assert bank.aligned_scores([[1.0, 0.0]], [0, 0, 1], 2.0)[0, 0] == 0.5
    assert bank.aligned_scores([[1.0, 0.0]], [1, 0, 0], 2.0)[0, 0] == 0.0
    assert bank.complementary_scores([[1.0, 0.0]], [0, 0, 1], 2.0)[0, 0] == -0.5
    assert bank.complementary_scores([[1.0, 0.0]], [0, 0, -1], 1.0)[0, 0] == 1.0
    with pytest.raises(EmptyBankError):
        MemoryBank(2, 1, 4).aligned_scores([[1.0, 0.0]], [0, 0, 1], 1.0)


def test_scores_match_loop_oracle():
    rng = np.random.default_rng(0)
    bank = filled_bank(rng, 1, P=4)
    qL, qD = rng.normal(size=(3, 8)), unit(rng.normal(size=3))
    for sign, fn in ((1.0, bank.aligned_scores), (-1.0, bank.complementary_scores)):
        ref = oracles.scores_loop(qL, qD, bank.latent_keys, bank.direction_keys, 1.7, sign)
        np.testing.assert_allclose(fn(qL, qD, 1.7), ref, atol=1e-12)
    np.testing.assert_array_equal(bank.complementary_scores(qL, qD, 1.7), bank.aligned_scores(qL, -qD, 1.7))


def test_read_examples():
    bank = MemoryBank(3, 1, 4)
    bank.write([[1.0, 2, 3]], [0, 0, 1], [[4.0, 5, 6]], 0)
    r = bank.read(np.ones((2, 3)), [0, 0, 1], [0, 1, 0], 1.0)
    np.testing.assert_array_equal(r.aligned, [[4, 5, 6]] * 2)
    np.testing.assert_array_equal(r.complementary, [[4, 5, 6]] * 2)
    bank = MemoryBank(3, 2, 4)
    bank.write(np.ones((2, 3)), [0, 0, 1], np.tile([1.0, -1, 2], (2, 1)), 0)
    r = bank.read(np.ones((2, 3)), [0, 0, 1], [0, 0, 1], 1.0)
    np.testing.assert_allclose(r.attention_aligned, 0.5)
    np.testing.assert_allclose(r.aligned, [[1, -1, 2]] * 2)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_read_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    bank = filled_bank(rng, 2, P=4)
    qL = rng.normal(size=(4, 8))
    k0, kt = unit(rng.normal(size=3)), unit(rng.normal(size=3))
    sigma = float(rng.uniform())
    r = bank.read(qL, k0, kt, sigma)
    qD = unit(np.asarray(k0) + np.asarray(kt))
    tau = 2.5 - sigma
    for sign, got, att in ((1.0, r.aligned, r.attention_aligned), (-1.0, r.complementary, r.attention_comp)):
        ref, A = oracles.read_loop(qL, qD, bank.latent_keys, bank.direction_keys, bank.values, tau, sign)
        np.testing.assert_allclose(got, ref, atol=1e-10)
        np.testing.assert_allclose(att, A, atol=1e-12)
        np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_readout_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    bank = filled_bank(rng, 3, P=4)
    qL, k0, kt = rng.normal(size=(4, 8)), unit(rng.normal(size=3)), unit(rng.normal(size=3))
    other = bank.copy()
    perm = rng.permutation(len(bank))
    for name in ("latent_keys", "direction_keys", "values", "usage_sum", "read_count", "birth_t", "token_ids"):
        setattr(other, name, getattr(other, name)[perm])
    a, b = bank.read(qL, k0, kt, 0.7), other.read(qL, k0, kt, 0.7)
    np.testing.assert_allclose(a.aligned, b.aligned, atol=1e-12)
    np.testing.assert_allclose(a.complementary, b.complementary, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(3, 10)) * 5
    np.testing.assert_allclose(softmax_rows(s.copy()), softmax_rows(s + c), atol=1e-12)
    np.testing.assert_allclose(softmax_rows(s.copy())[0], oracles.softmax_loop(list(s[0])), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(0.05, 1.0))
def test_lower_confidence_flattens_attention(seed, sigma):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(1, 12))
    dist = lambda tau: np.abs(softmax_rows(s / tau) - 1 / 12).max()  # noqa: E731
    assert dist(temperature(sigma - 0.05)) < dist(temperature(sigma))


def test_usage_examples():
    bank = MemoryBank(2, 1, 4)
    bank.write([[1.0, 0]], [0, 0, 1], [[0.0, 0]], 0)
    assert bank.usage(0) == 0.0
    bank.usage_sum[0], bank.read_count[0] = 0.75, 1
    assert bank.usage(0) == 0.75
    bank.usage_sum[0], bank.read_count[0] = 0.6, 2
    assert bank.usage(0) == pytest.approx(0.3)


def test_usage_matches_loop_oracle():
    rng = np.random.default_rng(2)
    bank = filled_bank(rng, 3, P=4)
    reads = []
    for _ in range(3):
        r = bank.read(rng.normal(size=(4, 8)), unit(rng.normal(size=3)), unit(rng.normal(size=3)), 0.4)
        reads.append((r.attention_aligned, r.attention_comp))
    np.testing.assert_allclose(bank.usage(), oracles.usage_loop(reads, len(bank)), atol=1e-10)
    # a token written after some reads only averages over its own reads
    bank2 = filled_bank(rng, 1, P=2, C=8, capacity=8)
    r = bank2.read(rng.normal(size=(2, 8)), [0, 0, 1], [0, 0, 1], 1.0)
    bank2.write(rng.normal(size=(2, 8)), [1, 0, 0], rng.normal(size=(2, 8)), 1)
    assert bank2.usage(2) == 0.0 and bank2.read_count.tolist() == [1, 1, 0, 0]


def test_coverage_examples():
    bank = filled_bank(np.random.default_rng(0), 3, P=1, dirs=np.eye(3))
    np.testing.assert_allclose(bank.coverage(), 0.0)
    bank = filled_bank(np.random.default_rng(0), 2, P=1, dirs=[[0, 0, 1], [0, 0, -1]])
    np.testing.assert_allclose(bank.coverage(), -1.0)
    with pytest.raises(UndefinedCoverageError):
        filled_bank(np.random.default_rng(0), 1, P=1).coverage()
    rng = np.random.default_rng(4)
    bank = filled_bank(rng, 16, P=1)
    np.testing.assert_allclose(bank.coverage(), oracles.coverage_loop(bank.direction_keys), atol=1e-12)


def test_write_examples():
    rng = np.random.default_rng(0)
    bank = MemoryBank(8, 5, 100)
    d = unit([1, 2, 3])
    bank.write(rng.normal(size=(5, 8)), d, rng.normal(size=(5, 8)), 0)
    assert len(bank) == 5
    np.testing.assert_allclose(bank.direction_keys, np.tile(d, (5, 1)))
    with pytest.raises(ValueError):
        bank.write(rng.normal(size=(4, 8)), d, rng.normal(size=(4, 8)), 1)
    for t in range(1, 20):
        bank.write(rng.normal(size=(5, 8)), unit(rng.normal(size=3)), rng.normal(size=(5, 8)), t)
    assert len(bank) == 100
    removed = bank.write(rng.normal(size=(5, 8)), d, rng.normal(size=(5, 8)), 20)
    assert len(removed) == 20 and len(bank) == 100 - 20 + 5


def test_sparsify_identical_keys_drops_lowest_usage():
    bank = filled_bank(np.random.default_rng(0), 100, P=1, dirs=[[0, 0, 1]] * 100)
    bank.usage_sum[:] = np.random.default_rng(1).permutation(100) / 100.0
    bank.read_count[:] = 1
    expected = set(bank.token_ids[np.argsort(bank.usage_sum)[:20]].tolist())
    assert set(bank.sparsify()) == expected and len(bank) == 80


def test_sparsify_prefers_dense_cluster():
    rng = np.random.default_rng(7)
    cluster = [unit([0, 0, 1] + 0.05 * rng.normal(size=3)) for _ in range(30)]
    outliers = [unit(rng.normal(size=3)) for _ in range(20)]
    dirs = cluster + outliers
    order = rng.permutation(50)
    bank = filled_bank(rng, 50, P=1, dirs=[dirs[i] for i in order])
    bank.usage_sum[:] = rng.uniform(size=50)
    bank.read_count[:] = 1
    ref, _ = oracles.prune_loop(bank.coverage(), bank.usage(), bank.birth_t, bank.token_ids)
    removed_rows, _ = bank.prune_plan()
    assert set(removed_rows.tolist()) == ref
    in_cluster = {i for i in range(50) if order[i] < 30}
    assert set(removed_rows.tolist()) <= in_cluster


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 256))
def test_sparsify_matches_oracle(seed, n):
    rng = np.random.default_rng(seed)
    bank = filled_bank(rng, n, P=1)
    # coarse usage levels create ties that exercise the tie-break rules
    bank.usage_sum[:] = rng.integers(0, 4, n) / 4.0
    bank.read_count[:] = rng.integers(0, 3, n)
    rows, dense = bank.prune_plan()
    ref, ref_dense = oracles.prune_loop(bank.coverage(), bank.usage(), bank.birth_t, bank.token_ids)
    assert set(rows.tolist()) == ref and set(dense.tolist()) == ref_dense
    assert len(rows) == math.ceil(0.2 * n) and set(rows.tolist()) <= set(dense.tolist())


def test_capacity_invariant_under_stream():
    rng = np.random.default_rng(3)
    bank = MemoryBank(8, 16, 16 * 5)
    for t in range(40):
        if len(bank):
            bank.read(rng.normal(size=(16, 8)), [0, 0, 1], unit(rng.normal(size=3)), 0.8)
        bank.write(rng.normal(size=(16, 8)), unit(rng.normal(size=3)), rng.normal(size=(16, 8)), t)
        assert len(bank) <= bank.capacity_tokens


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    bank = filled_bank(rng, 5, P=4)
    bank.read(rng.normal(size=(4, 8)), [0, 0, 1], [1, 0, 0], 0.5)
    bank.snapshot(tmp_path / "b.bin")
    back = MemoryBank.restore(tmp_path / "b.bin")
    assert len(back) == len(bank) and back._next_id == bank._next_id
    np.testing.assert_array_equal(back.token_ids, bank.token_ids)
    np.testing.assert_array_equal(back.read_count, bank.read_count)
    np.testing.assert_allclose(back.values, bank.values, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(back.usage(), bank.usage(), rtol=1e-6)
    (tmp_path / "c.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-3])
    with pytest.raises(ValueError):
        MemoryBank.restore(tmp_path / "c.bin")
