import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfakit.ivfpq import (INDEX_MAGIC, IndexFormatError, adc_tables, build_index, default_nlist,
                          default_nprobe, deserialize_index, encode, exact_knn, load_index,
                          normalize_rows, save_index, search, serialize_index, train_index, train_pq)
from lfakit.kmeans import kmeans
from lfakit.synth import clustered_vectors, lossless_pq_dataset


def brute_force(q, x, k):
    """Independent oracle: sort (distance, id) tuples in plain Python."""
    pairs = sorted((float(((row.astype(np.float64) - q) ** 2).sum()), i) for i, row in enumerate(x))
    return [i for _, i in pairs[:k]]


@pytest.fixture(scope="module")
def lossless():
    x, _ = lossless_pq_dataset(n=2000, dim=32, nlist=20, m=8, seed=4)
    return x, build_index(x, nlist=20, m=8, seed=0)


def test_normalize_rows():
    out = normalize_rows(np.array([[3, 4], [0, 2]], dtype=np.float32))
    np.testing.assert_allclose(out.data, [[0.6, 0.8], [0.0, 1.0]], atol=1e-7)
    with pytest.raises(ValueError, match="zero-norm"):
        normalize_rows(np.array([[0, 0], [1, 0]], dtype=np.float32))


def test_defaults():
    assert default_nlist(10_000) == 400
    assert default_nlist(4) == 4
    assert default_nlist(10**8) == 1024
    assert default_nprobe(64) == 8 and default_nprobe(4) == 1


def test_dimension_not_divisible(rng):
    x = rng.standard_normal((300, 128)).astype(np.float32)
    with pytest.raises(ValueError, match="not divisible"):
        train_index(x, nlist=4, m=7)


def test_m1_single_subspace(rng):
    x = rng.standard_normal((300, 6)).astype(np.float32)
    idx = build_index(x, nlist=4, m=1, seed=0)
    assert idx.pq.codebooks.shape == (1, 256, 6) and idx.ntotal == 300


def test_pq_exact_on_256_distinct_residuals(rng):
    x = rng.integers(-8, 8, size=(256, 4)).astype(np.float32)
    while len(np.unique(x, axis=0)) < 256:
        x = rng.integers(-8, 8, size=(256, 4)).astype(np.float32)
    coarse = kmeans(np.zeros((1, 4)), 1)
    pq = train_pq(x, np.zeros(256, dtype=np.int64), coarse, m=1, seed=0)
    got = {tuple(r) for r in pq.codebooks[0].tolist()}
    assert got == {tuple(r) for r in x.tolist()}


def test_k_pq_capped_with_warning(rng, caplog):
    x = rng.standard_normal((40, 8)).astype(np.float32)
    with caplog.at_level("WARNING"):
        idx = build_index(x, nlist=2, m=2)
    assert idx.pq.k_pq == 40 and "capping" in caplog.text


def test_encode_is_per_subspace_argmin(lossless, rng):
    _, idx = lossless
    q = rng.standard_normal(32) * 10
    l1, c1 = encode(q, idx)
    l2, c2 = encode(q, idx)
    assert l1 == l2 and np.array_equal(c1, c2)
    cents = idx.coarse.centroids.astype(np.float64)
    assert l1 == int(np.argmin(((cents - q) ** 2).sum(1)))
    table = adc_tables(q - cents[l1], idx)
    assert np.array_equal(c1, table.argmin(1))


def test_adc_distance_equals_reconstruction_distance(rng):
    x = clustered_vectors(20, 30, 16, 0.4, seed=2)[0]
    idx = build_index(x, nlist=8, m=4, seed=1)
    q = rng.standard_normal(16)
    res = search(q, idx, 20, nprobe=8)
    where = {int(i): (l, j) for l in range(idx.nlist) for j, i in enumerate(idx.list_ids[l])}
    for i, d in res.neighbors:
        l, j = where[i]
        recon = idx.reconstruct(l, idx.list_codes[l][j])
        assert d == pytest.approx(((q - recon) ** 2).sum(), abs=1e-4)


def test_lossless_regime_matches_brute_force(lossless, rng):
    x, idx = lossless
    for _ in range(20):
        q = x[rng.integers(len(x))] + rng.uniform(-1.2, 1.2, size=32)
        got = search(q, idx, 10, nprobe=idx.nlist)
        assert got.ids.tolist() == brute_force(q, x, 10)
        np.testing.assert_array_equal(got.ids, exact_knn(q, x, 10).ids)


def test_k_larger_than_n(rng):
    x = rng.standard_normal((30, 4)).astype(np.float32)
    idx = build_index(x, nlist=3, m=2)
    res = search(x[0], idx, 100, nprobe=3)
    assert sorted(res.ids.tolist()) == list(range(30))
    assert np.all(np.diff(res.distances) >= 0)


def test_search_errors(lossless):
    _, idx = lossless
    with pytest.raises(ValueError, match="dimension mismatch"):
        search(np.zeros(31), idx, 5)
    with pytest.raises(ValueError, match="nprobe"):
        search(np.zeros(32), idx, 5, nprobe=0)
    with pytest.raises(ValueError):
        search(np.zeros(32), idx, 0)


def test_more_probes_never_worsen_adc_topk():
    # recall itself can dip (quantized distances may let a new candidate displace
    # a true neighbour), but each ADC top-k distance is monotone in nprobe
    x, _, q, _ = clustered_vectors(100, 10, 32, 0.5, seed=9, n_queries=50)
    idx = build_index(x, nlist=16, m=8, seed=0)
    for v in q:
        prev = None
        for nprobe in (1, 2, 4, 8, 16):
            d = search(v, idx, 10, nprobe).distances
            if prev is not None:
                assert len(d) >= len(prev)
                assert np.all(d[:len(prev)] <= prev + 1e-12)
            prev = d


def test_full_probe_recall_beats_single_probe():
    x, _, q, _ = clustered_vectors(100, 10, 32, 0.5, seed=9, n_queries=50)
    idx = build_index(x, nlist=16, m=8, seed=0)
    truth = [set(exact_knn(v, x, 10).ids.tolist()) for v in q]

    def recall(nprobe):
        return sum(len(t & set(search(v, idx, 10, nprobe).ids.tolist())) for t, v in zip(truth, q))

    assert recall(16) >= recall(1)


def test_build_is_byte_deterministic(rng):
    x = rng.standard_normal((500, 16)).astype(np.float32)
    assert serialize_index(build_index(x, nlist=8, m=4, seed=3)) == \
        serialize_index(build_index(x, nlist=8, m=4, seed=3))


def test_round_trip(tmp_path, lossless, rng):
    x, idx = lossless
    save_index(idx, tmp_path / "i.bin")
    back = load_index(tmp_path / "i.bin")
    assert serialize_index(back) == serialize_index(idx)
    for _ in range(10):
        q = rng.standard_normal(32) * 10
        a, b = search(q, idx, 10, 4), search(q, back, 10, 4)
        assert np.array_equal(a.ids, b.ids) and np.array_equal(a.distances, b.distances)


def test_empty_index_round_trip(rng):
    idx = train_index(rng.standard_normal((300, 8)).astype(np.float32), nlist=4, m=2)
    assert idx.ntotal == 0
    back = deserialize_index(serialize_index(idx))
    assert back.ntotal == 0 and len(search(np.zeros(8), back, 5, 4)) == 0


def test_corrupt_headers(lossless):
    raw = serialize_index(lossless[1])
    assert raw.startswith(INDEX_MAGIC)
    with pytest.raises(IndexFormatError, match="magic"):
        deserialize_index(b"X" + raw[1:])
    bumped = bytearray(raw)
    bumped[len(INDEX_MAGIC)] ^= 0x7F
    with pytest.raises(IndexFormatError, match="version"):
        deserialize_index(bytes(bumped))
    with pytest.raises(IndexFormatError, match="truncated"):
        deserialize_index(raw[:-3])
    with pytest.raises(IndexFormatError, match="trailing"):
        deserialize_index(raw + b"\0")


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.integers(1, 25))
def test_search_results_are_sorted_subset(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((80, 8)).astype(np.float32)
    idx = build_index(x, nlist=4, m=4, seed=seed, k_pq=16)
    res = search(rng.standard_normal(8), idx, k, nprobe=2)
    assert len(res) <= k and len(set(res.ids.tolist())) == len(res)
    keys = list(zip(res.distances.tolist(), res.ids.tolist()))
    assert keys == sorted(keys)
