import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from learnedlsh.vecdata import (
    LLSHBIN_HEADER,
    Dataset,
    DatasetSpec,
    VectorFormatError,
    generate,
    read_vectors,
    split,
    write_vectors,
)


def _cdf(kind: str, x: np.ndarray) -> np.ndarray:
    erf = np.vectorize(math.erf)
    if kind == "uniform":
        return np.clip(x, 0.0, 1.0)
    if kind == "normal":
        return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    if kind == "lognormal":
        return 0.5 * (1.0 + erf(np.log(x) / math.sqrt(2.0)))
    return 1.0 - np.exp(-x)


def _ks(sample: np.ndarray, kind: str) -> float:
    x = np.sort(sample.astype(np.float64))
    f = _cdf(kind, x)
    n = x.size
    upper = np.arange(1, n + 1) / n - f
    lower = f - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


class TestDataset:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[0.0, np.nan]]), [0])
        with pytest.raises(ValueError):
            Dataset(np.array([[np.inf]]), [0])

    def test_rejects_duplicate_or_negative_ids(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), [1, 1])
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 3)), [-1])

    def test_arrays_are_read_only(self):
        ds = Dataset.from_points(np.ones((3, 2)))
        with pytest.raises(ValueError):
            ds.points[0, 0] = 5.0

    def test_equality_is_bitwise(self):
        a = Dataset.from_points(np.array([[0.0]], np.float32))
        b = Dataset.from_points(np.array([[-0.0]], np.float32))
        assert a != b
        assert a == Dataset.from_points(np.array([[0.0]], np.float32))


class TestGenerate:
    @pytest.mark.parametrize("kind", ["uniform", "normal", "lognormal", "exponential"])
    def test_ks_against_analytic_cdf(self, kind):
        ds = generate(DatasetSpec(kind, 1000, 100, seed=7))
        assert _ks(ds.points.ravel(), kind) < 0.01

    def test_uniform_moments(self):
        x = generate(DatasetSpec("uniform", 10**5, 100, seed=1)).points.astype(np.float64)
        assert abs(x.mean() - 0.5) <= 0.01
        assert abs(x.std() - 0.29) <= 0.01

    def test_lognormal_moments(self):
        x = generate(DatasetSpec("lognormal", 10**5, 100, seed=1)).points.astype(np.float64)
        assert abs(x.mean() - 1.65) <= 0.05
        assert abs(x.std() - 2.16) <= 0.05

    def test_deterministic(self):
        spec = DatasetSpec("normal", 50, 8, seed=3)
        assert generate(spec) == generate(spec)
        assert generate(spec) != generate(DatasetSpec("normal", 50, 8, seed=4))

    def test_ids_are_positions(self):
        np.testing.assert_array_equal(generate(DatasetSpec("exponential", 5, 2)).ids, np.arange(5))

    def test_spec_validation(self):
        for bad in [("cauchy", 1, 1), ("uniform", 0, 1), ("uniform", 1, 0)]:
            with pytest.raises(ValueError):
                DatasetSpec(*bad)


class TestFileIO:
    def test_llshbin_roundtrip_bitexact(self, tmp_path):
        pts = np.array([[0.1, -0.0, 3.4028235e38], [1e-45, -7.5, 2.0]], np.float32)
        ds = Dataset.from_points(pts)
        write_vectors(ds, tmp_path / "a.llshbin")
        back = read_vectors(tmp_path / "a.llshbin")
        assert back == ds
        np.testing.assert_array_equal(back.points.view(np.uint32), pts.view(np.uint32))

    def test_csv_roundtrip_exact(self, tmp_path):
        ds = generate(DatasetSpec("lognormal", 20, 7, seed=2))
        write_vectors(ds, tmp_path / "a.csv")
        assert read_vectors(tmp_path / "a.csv") == ds

    def test_llshbin_layout(self, tmp_path):
        ds = Dataset.from_points(np.array([[1.0, 2.0]], np.float32))
        write_vectors(ds, tmp_path / "x.llshbin")
        raw = (tmp_path / "x.llshbin").read_bytes()
        assert LLSHBIN_HEADER.unpack_from(raw) == (b"LLSH", 1, 1, 2)
        assert raw[LLSHBIN_HEADER.size :] == np.array([1.0, 2.0], "<f4").tobytes()

    def test_empty_llshbin(self, tmp_path):
        (tmp_path / "e.llshbin").write_bytes(LLSHBIN_HEADER.pack(b"LLSH", 1, 0, 100))
        ds = read_vectors(tmp_path / "e.llshbin")
        assert ds.n == 0 and ds.dim == 100

    def test_zero_point_dataset_writes_header_only(self, tmp_path):
        ds = Dataset(np.zeros((0, 4), np.float32), [])
        write_vectors(ds, tmp_path / "z.llshbin")
        assert (tmp_path / "z.llshbin").stat().st_size == LLSHBIN_HEADER.size
        assert read_vectors(tmp_path / "z.llshbin") == ds

    def test_csv_ragged_row_names_line_2(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text(",".join(["1"] * 100) + "\n" + ",".join(["1"] * 99) + "\n")
        with pytest.raises(VectorFormatError, match="line 2"):
            read_vectors(p)

    def test_csv_header_rejected(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("x,y\n1,2\n")
        with pytest.raises(VectorFormatError, match="line 1"):
            read_vectors(p)

    def test_csv_non_finite(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text("1,2\n3,nan\n")
        with pytest.raises(VectorFormatError, match="line 2"):
            read_vectors(p)

    def test_empty_csv_needs_dim(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(VectorFormatError):
            read_vectors(p)
        assert read_vectors(p, dim=3).dim == 3

    def test_llshbin_errors_name_offsets(self, tmp_path):
        p = tmp_path / "bad.llshbin"
        p.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(VectorFormatError, match="byte offset 0"):
            read_vectors(p)
        p.write_bytes(LLSHBIN_HEADER.pack(b"LLSH", 1, 2, 2) + bytes(8))
        with pytest.raises(VectorFormatError, match="byte offset 22"):
            read_vectors(p)
        p.write_bytes(LLSHBIN_HEADER.pack(b"LLSH", 1, 1, 2) + np.array([0, np.inf], "<f4").tobytes())
        with pytest.raises(VectorFormatError, match="byte offset 18"):
            read_vectors(p)

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(0, 6).flatmap(
            lambda n: st.integers(1, 5).flatmap(
                lambda d: st.lists(
                    st.floats(width=32, allow_nan=False, allow_infinity=False), min_size=n * d, max_size=n * d
                ).map(lambda v: np.array(v, np.float32).reshape(n, d))
            )
        )
    )
    def test_roundtrip_property(self, tmp_path_factory, pts):
        path = tmp_path_factory.mktemp("rt") / "p.llshbin"
        ds = Dataset.from_points(pts)
        write_vectors(ds, path)
        assert read_vectors(path) == ds


class TestSplit:
    def test_sizes_and_partition(self):
        ds = Dataset.from_points(np.arange(10, dtype=np.float32)[:, None])
        train, hold = split(ds, 0.1, seed=0)
        assert (train.n, hold.n) == (9, 1)
        assert set(train.ids) | set(hold.ids) == set(range(10))
        assert not set(train.ids) & set(hold.ids)

    def test_deterministic(self):
        ds = generate(DatasetSpec("uniform", 100, 3))
        a, b = split(ds, 0.3, seed=5), split(ds, 0.3, seed=5)
        assert a[0] == b[0] and a[1] == b[1]

    def test_halves_have_matching_means(self):
        ds = generate(DatasetSpec("uniform", 10**4, 100, seed=11))
        train, hold = split(ds, 0.5, seed=2)
        assert abs(train.points.mean() - 0.5) < 0.02
        assert abs(hold.points.mean() - 0.5) < 0.02

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
    def test_fraction_bounds(self, frac):
        with pytest.raises(ValueError):
            split(generate(DatasetSpec("uniform", 10, 2)), frac)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 60), st.floats(0.01, 0.99), st.integers(0, 2**32))
    def test_partition_property(self, n, frac, seed):
        ds = Dataset(np.zeros((n, 1), np.float32), np.arange(n) * 3 + 1)
        train, hold = split(ds, frac, seed)
        assert hold.n == math.floor(frac * n + 0.5)
        ids = np.concatenate([train.ids, hold.ids])
        np.testing.assert_array_equal(np.sort(ids), ds.ids)
