import numpy as np
import pytest

from gexrestore.data_io import (DataError, ExpressionMatrix, SplitSpec, SurvivalRecord,
                                filter_low_variance, gene_stats, load_expression, load_labels,
                                load_survival, save_expression, save_labels, save_survival, split,
                                zscore_normalize)


def matrix(values, present=None):
    values = np.asarray(values, dtype=float)
    n, g = values.shape
    present = np.isfinite(values) if present is None else present
    return ExpressionMatrix([f"s{i}" for i in range(n)], [f"g{j}" for j in range(g)], values, present)


class TestLoadExpression:
    def test_na_cell(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("sample_id,g1,g2\ns1,1.0,NA\ns2,2.5,3\n")
        m = load_expression(p)
        assert m.present.sum() == 3 and not m.present[0, 1]
        assert np.isnan(m.values[0, 1])

    @pytest.mark.parametrize("marker", ["", "na", "NaN", "nan"])
    def test_missing_markers(self, tmp_path, marker):
        p = tmp_path / "x.csv"
        p.write_text(f"sample_id,g1,g2\ns1,1.0,{marker}\n")
        assert not load_expression(p).present[0, 1]

    def test_tab_delimited(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("sample_id\tg1\ns1\t4.0\n")
        assert load_expression(p).values[0, 0] == 4.0

    def test_duplicate_gene_names_it(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("sample_id,gA,gA\ns1,1,2\n")
        with pytest.raises(DataError, match="gA"):
            load_expression(p)

    def test_bad_number_reports_line(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("sample_id,g1\ns1,1\ns2,abc\n")
        with pytest.raises(DataError, match=":3:"):
            load_expression(p)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        v = rng.normal(size=(4, 3)) * 1e3
        v[1, 2] = np.nan
        m = matrix(v)
        save_expression(m, tmp_path / "m.csv")
        back = load_expression(tmp_path / "m.csv")
        assert back.equals(m)
        assert np.array_equal(back.values[m.present], m.values[m.present])


class TestSurvivalAndLabels:
    def test_parse_row(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("sample_id,time,event\ns1,10.5,1\n")
        assert load_survival(p).records == [SurvivalRecord("s1", 10.5, True)]

    def test_zero_time_rejected(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("sample_id,time,event\ns1,0,1\n")
        with pytest.raises(DataError):
            load_survival(p)

    def test_unmatched_reported(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("sample_id,time,event\ns1,1,1\nzz,2,0\n")
        tab = load_survival(p, ["s1"])
        assert tab.unmatched == ["zz"]
        idx, recs = tab.aligned(["s0", "s1"])
        assert idx.tolist() == [1] and recs[0].sample_id == "s1"

    def test_round_trips(self, tmp_path):
        recs = [SurvivalRecord("a", 1.25, True), SurvivalRecord("b", 3.0, False)]
        save_survival(recs, tmp_path / "s.csv")
        assert load_survival(tmp_path / "s.csv").records == recs
        save_labels({"a": "x", "b": "y"}, tmp_path / "l.csv")
        assert load_labels(tmp_path / "l.csv") == {"a": "x", "b": "y"}


class TestNormalization:
    def test_hand_zscore(self):
        z, st = zscore_normalize(matrix([[1.0], [2.0], [3.0]]))
        assert np.allclose(z.values[:, 0], [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
        assert np.isclose(st.std[0], np.sqrt(2.0 / 3.0), rtol=1e-15)

    def test_idempotent(self, rng):
        z, _ = zscore_normalize(matrix(rng.normal(size=(20, 3))))
        z2, _ = zscore_normalize(z)
        assert np.allclose(z.values, z2.values, atol=1e-12)

    def test_constant_gene_untouched(self):
        z, st = zscore_normalize(matrix([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]]))
        assert st.constant.tolist() == [True, False]
        assert np.array_equal(z.values[:, 0], [5.0, 5.0, 5.0])

    def test_moments_over_present(self, rng):
        v = rng.normal(3, 2, size=(50, 4))
        v[rng.random(v.shape) < 0.2] = np.nan
        z, _ = zscore_normalize(matrix(v))
        st = gene_stats(z)
        assert np.all(np.abs(st.mean) < 1e-10) and np.allclose(st.std, 1.0, atol=1e-10)

    def test_stats_from_subset_only(self, rng):
        v = rng.normal(size=(10, 2))
        m = matrix(v)
        a, _ = zscore_normalize(m, np.arange(5))
        v2 = v.copy()
        v2[5:] += 100.0
        b, _ = zscore_normalize(matrix(v2), np.arange(5))
        assert np.array_equal(a.values[:5], b.values[:5])

    def test_filter_low_variance(self, rng):
        m = matrix(np.column_stack([rng.normal(size=10), np.full(10, 2.0), rng.normal(size=10)]))
        assert filter_low_variance(m, 0.0) is m
        kept = filter_low_variance(m, 1e-6)
        assert kept.gene_ids == ["g0", "g2"]
        assert np.all(gene_stats(kept).std >= 1e-6)


class TestSplit:
    ids = [f"s{i:03d}" for i in range(100)]

    def test_sizes_and_determinism(self):
        a = split(self.ids, SplitSpec(seed=3))
        b = split(self.ids, SplitSpec(seed=3))
        assert len(a["test"]) == 30
        assert len(a["pretrain"]) + len(a["pretrain_monitor"]) == 70
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_partition(self):
        s = split(self.ids, SplitSpec(seed=1))
        allidx = np.concatenate(list(s.values()))
        assert sorted(allidx.tolist()) == list(range(100))

    def test_stratified_shares(self):
        labels = ["a"] * 37 + ["b"] * 63
        s = split(self.ids, SplitSpec(seed=2), labels)
        for lab, n in (("a", 37), ("b", 63)):
            got = sum(labels[i] == lab for i in s["test"])
            assert abs(got - 0.3 * n) <= 1

    def test_order_invariance(self, rng):
        perm = rng.permutation(100)
        shuffled = [self.ids[i] for i in perm]
        a = split(self.ids, SplitSpec(seed=4))
        b = split(shuffled, SplitSpec(seed=4))
        for k in a:
            assert sorted(self.ids[i] for i in a[k]) == sorted(shuffled[i] for i in b[k])
