import math

import numpy as np
import pytest

from gwnet.data import (
    NormStats,
    SignalStore,
    SyntheticSpec,
    denormalize,
    edge_recovery_score,
    export_synthetic,
    generate_synthetic,
    load_signals,
    make_windows,
    normalize,
    random_directed_graph,
    save_signals_binary,
    save_signals_csv,
    simulate_diffusion,
    split_boundaries,
)
from gwnet.errors import ParseError, ValidationError
from gwnet.graph import Graph, read_matrix_csv


def ramp_store(total, n=2):
    """Series whose value encodes its own time index (offset so nothing is missing)."""
    v = np.arange(1, total + 1, dtype=float)[:, None] * np.ones((1, n))
    return SignalStore.from_values(v + np.arange(n) * 1e-3)


# --- loading -------------------------------------------------------------------------

def test_minimal_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("a,b\n1,2\n3,0\n5,6\n")
    s = load_signals(p)
    assert (s.num_steps, s.num_nodes, s.num_features) == (3, 2, 1)
    assert s.node_ids == ["a", "b"]
    assert s.mask[:, :, 0].tolist() == [[True, True], [True, False], [True, True]]


def test_csv_with_timestamp_column(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,s1,s2\n2012-03-01 00:00,1.5,2\n2012-03-01 00:05,3,4\n")
    s = load_signals(p)
    assert s.values[:, :, 0].tolist() == [[1.5, 2.0], [3.0, 4.0]]
    assert s.timestamps == ["2012-03-01 00:00", "2012-03-01 00:05"]


def test_ragged_row_reports_line(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("a,b\n1,2\n3\n5,6\n")
    with pytest.raises(ParseError) as info:
        load_signals(p)
    assert info.value.line == 3 and "line 3" in str(info.value)


def test_non_numeric_cell_reports_line(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("a,b\n1,2\n3,4\n5,abc\n")
    with pytest.raises(ParseError) as info:
        load_signals(p)
    assert info.value.line == 4 and "abc" in str(info.value)


def test_csv_round_trip_is_exact(tmp_path, rng):
    store = SignalStore.from_values(rng.normal(size=(7, 3)))
    p = tmp_path / "s.csv"
    save_signals_csv(store, p)
    assert np.array_equal(load_signals(p).values, store.values)


def test_binary_round_trip_and_bad_length(tmp_path, rng):
    store = SignalStore.from_values(rng.normal(size=(6, 4, 2)))
    p = tmp_path / "s.bin"
    save_signals_binary(store, p)
    back = load_signals(p)
    assert np.array_equal(back.values, store.values)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ParseError):
        load_signals(p, fmt="raw-binary")


@pytest.mark.parametrize("nodes, steps", [(207, 34272), (325, 52116)])
def test_table_sized_files_load_and_split_cleanly(nodes, steps, tmp_path):
    values = np.random.default_rng(nodes).uniform(1, 70, size=(steps, nodes))
    p = tmp_path / "sig.bin"
    save_signals_binary(SignalStore.from_values(values), p)
    store = load_signals(p)
    del values
    assert (store.num_steps, store.num_nodes, store.num_features) == (steps, nodes, 1)
    ds = make_windows(store, 12, 12)
    assert ds.boundaries == (7 * steps // 10, 8 * steps // 10)
    assert_no_leakage(ds)
    b1, b2 = ds.boundaries
    assert len(ds.train) == b1 - 23 and len(ds.val) == b2 - b1 - 23
    assert len(ds.test) == steps - b2 - 23


# --- windowing -----------------------------------------------------------------------

def assert_no_leakage(ds):
    b1, b2 = ds.boundaries
    for sp, lo, hi in ((ds.train, 0, b1), (ds.val, b1, b2), (ds.test, b2, None)):
        if sp.empty:
            continue
        assert sp.span(0)[0] >= lo
        if hi is not None:
            assert sp.span(len(sp) - 1)[1] < hi
    if not ds.val.empty:
        assert ds.train.span(len(ds.train) - 1)[1] < ds.val.span(0)[0]
    if not ds.val.empty and not ds.test.empty:
        assert ds.val.span(len(ds.val) - 1)[1] < ds.test.span(0)[0]


def test_window_count_example():
    with pytest.warns(UserWarning, match="too short"):
        ds = make_windows(ramp_store(100), 12, 12)
    assert ds.boundaries == (70, 80)
    assert len(ds.train) == 47
    assert ds.val.empty and ds.test.empty


def test_all_train_ratio():
    ds = make_windows(ramp_store(40), 4, 3, ratios=(1, 0, 0))
    assert len(ds.train) == 34
    assert ds.val.empty and ds.test.empty


def test_split_boundaries_use_exact_ratios():
    # 0.7 * 10 is 7.000000000000001 in floats; exact arithmetic keeps it at 7
    assert split_boundaries(10, (0.7, 0.1, 0.2)) == (7, 8)
    assert split_boundaries(34272, (0.7, 0.1, 0.2)) == (23990, 27417)


def test_short_train_split_is_an_error():
    with pytest.raises(ValidationError):
        make_windows(ramp_store(20), 12, 12)


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.3, -0.1), (0.5, 0.1, 0.1)])
def test_bad_ratios(ratios):
    with pytest.raises(ValidationError):
        make_windows(ramp_store(100), 2, 2, ratios=ratios)


def test_windows_reconstruct_source_slices():
    store = ramp_store(200, n=3)
    ds = make_windows(store, 5, 4)
    raw = denormalize(ds.train.series, ds.norm)
    for sp in (ds.train, ds.val, ds.test):
        for i in (0, len(sp) // 2, len(sp) - 1):
            x, y, _ = sp.sample(i)
            lo, hi = sp.span(i)
            joined = np.concatenate([x.transpose(2, 1, 0), y], axis=0)  # [S+T, N, D]
            assert np.array_equal(joined, ds.train.series[lo:hi + 1])
            assert np.allclose(denormalize(joined, ds.norm), store.values[lo:hi + 1],
                               rtol=0, atol=1e-12)
    assert raw.shape == store.values.shape


def test_norm_uses_training_span_only():
    store = ramp_store(100, n=1)
    ds = make_windows(store, 2, 2)
    train = store.values[:70, 0, 0]
    assert ds.norm.mean == pytest.approx(train.mean(), abs=1e-12)
    assert ds.norm.std == pytest.approx(train.std(), abs=1e-12)


def test_norm_ignores_missing_entries():
    v = np.array([[1.0], [0.0], [3.0]])
    st = NormStats.fit(v, v != 0)
    assert st.mean == 2.0 and st.std == 1.0


def test_norm_examples():
    st = NormStats.fit(np.array([1.0, 2.0, 3.0]))
    assert st.mean == 2.0 and st.std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert normalize([1, 2, 3], st) == pytest.approx([-1.2247, 0, 1.2247], abs=1e-4)
    flat = NormStats.fit(np.full(5, 4.0))
    assert flat.std == 1e-8
    assert not normalize(np.full(5, 4.0), flat).any()


def test_denormalize_inverts_normalize(rng):
    for _ in range(100):
        x = rng.normal(loc=rng.uniform(-50, 50), scale=rng.uniform(0.1, 20), size=30)
        st = NormStats.fit(x)
        assert np.max(np.abs(denormalize(normalize(x, st), st) - x)) <= 1e-12


# --- synthetic ---------------------------------------------------------------------------

def test_identity_dynamics_without_noise_are_constant(rng):
    x0 = rng.normal(size=4)
    out = simulate_diffusion(np.eye(4), x0, 50, 0.0, rng)
    assert np.array_equal(out, np.tile(x0, (50, 1)))


def test_synthetic_is_deterministic():
    a, ga = generate_synthetic(SyntheticSpec(seed=3, steps=300))
    b, gb = generate_synthetic(SyntheticSpec(seed=3, steps=300))
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(ga.adjacency, gb.adjacency)
    c, _ = generate_synthetic(SyntheticSpec(seed=4, steps=300))
    assert not np.array_equal(a.values, c.values)


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_series_is_bounded(seed):
    store, g = generate_synthetic(SyntheticSpec(n=10, steps=2000, noise_std=0.01, seed=seed))
    assert store.values.shape == (2000, 10, 1)
    assert np.all(np.isfinite(store.values)) and np.max(np.abs(store.values)) < 1e6
    assert g.directed and g.n == 10


def test_generated_graph_has_out_edges_everywhere(rng):
    for _ in range(50):
        g = random_directed_graph(10, 0.05, rng)
        assert np.all(g.adjacency.sum(axis=1) > 0)
        assert not np.any(np.diag(g.adjacency))


def test_synthetic_spec_validation():
    with pytest.raises(ValidationError):
        generate_synthetic(SyntheticSpec(edge_prob=1.0))
    with pytest.raises(ValidationError):
        generate_synthetic(SyntheticSpec(noise_std=-1.0))


def test_synthetic_uses_supplied_graph():
    g = Graph.from_adjacency(np.roll(np.eye(4), 1, axis=1), directed=True)
    _, got = generate_synthetic(SyntheticSpec(n=4, steps=10, true_graph=g))
    assert got is g


def test_export_synthetic(tmp_path):
    store, g = generate_synthetic(SyntheticSpec(steps=20))
    export_synthetic(store, g, tmp_path / "s.csv", tmp_path / "g.csv")
    assert np.array_equal(load_signals(tmp_path / "s.csv").values, store.values)
    assert np.array_equal(read_matrix_csv(tmp_path / "g.csv"), g.adjacency)


# --- edge recovery ---------------------------------------------------------------------------

FIXTURE = Graph.from_adjacency(np.array([
    [0, 1, 0, 0, 1],
    [1, 0, 1, 0, 0],
    [0, 0, 0, 1, 0],
    [0, 0, 1, 0, 0],
    [0, 0, 0, 1, 0],
], dtype=float))


def test_recovery_of_truth_is_perfect():
    assert edge_recovery_score(FIXTURE.adjacency, FIXTURE) == 1.0


def test_recovery_of_transpose_counts_bidirectional_edges():
    # edges: 0-1 both ways, 2-3 both ways, 1->2, 0->4, 4->3 one way
    assert FIXTURE.num_edges == 7
    assert edge_recovery_score(FIXTURE.adjacency.T, FIXTURE) == 4 / 7


def test_recovery_of_uniform_matrix_matches_hypergeometric_mean():
    n, e = FIXTURE.n, FIXTURE.num_edges
    pop = n * n - n
    p = e / pop
    var = e * p * (1 - p) * (pop - e) / (pop - 1) / e ** 2  # variance of hits / e
    rng = np.random.default_rng(0)
    scores = [edge_recovery_score(np.ones((n, n)), FIXTURE, rng) for _ in range(100)]
    assert abs(np.mean(scores) - p) <= 3 * math.sqrt(var / 100)


def test_recovery_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        edge_recovery_score(np.ones((3, 3)), FIXTURE)
