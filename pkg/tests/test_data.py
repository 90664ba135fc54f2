from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chprec import data
from chprec.errors import EmptyAfterFilter, EmptyFile, FormatError, ParseError

ML100K = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"
needs_ml100k = pytest.mark.skipif(not ML100K.exists(), reason="run scripts/fetch_ml100k.py first")


def raws_from(edges, rating=5.0):
    return [data.RawInteraction(str(u), str(i), rating, 0) for u, i in edges]


class TestLoadRatings:
    def test_tab_line(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("196\t242\t3\t881250949\n")
        assert data.load_ratings(p, "tab") == [data.RawInteraction("196", "242", 3.0, 881250949)]

    def test_double_colon_line(self, tmp_path):
        p = tmp_path / "ratings.dat"
        p.write_text("1::1193::5::978300760\n\n")
        assert data.load_ratings(p, "double-colon") == [
            data.RawInteraction("1", "1193", 5.0, 978300760)]

    def test_parse_error_line_number(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1\t2\t3\t4\n1\t2\tfive\t4\n")
        with pytest.raises(ParseError) as exc:
            data.load_ratings(p, "tab")
        assert exc.value.line_no == 2

    def test_too_few_fields(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1\t2\n")
        with pytest.raises(ParseError):
            data.load_ratings(p, "tab")

    def test_empty(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("\n")
        with pytest.raises(EmptyFile):
            data.load_ratings(p, "tab")

    @needs_ml100k
    def test_full_file(self):
        assert len(data.load_ratings(ML100K, "tab")) == 100_000


class TestPreprocess:
    def test_fixed_point_unchanged(self):
        edges = [(u, i) for u in range(3) for i in range(3)]
        g, kept, ui, ii = data.preprocess(raws_from(edges), 1.0, 3)
        assert len(kept) == 9 and g.n_users == 3 and g.n_items == 3

    def test_star_cascade(self):
        star = [(0, i) for i in range(10)]
        with pytest.raises(EmptyAfterFilter):
            data.preprocess(raws_from(star), 1.0, 2)

    def test_rating_threshold(self):
        raws = raws_from([(0, 0)], 4.0) + raws_from([(0, 1)], 5.0)
        _, kept, _, ii = data.preprocess(raws, 5.0, 1)
        assert kept == [(0, 0)] and list(ii) == ["1"]

    def test_separate_item_core(self):
        edges = [(0, 0), (0, 1), (1, 0), (1, 2)]
        _, kept, _, _ = data.preprocess(raws_from(edges), 1.0, 2, item_core=1)
        assert len(kept) == 4

    def test_duplicates_collapse(self):
        _, kept, _, _ = data.preprocess(raws_from([(0, 0), (0, 0)]), 1.0, 1)
        assert kept == [(0, 0)]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=80),
           st.integers(1, 3))
    def test_core_and_bijection(self, edges, core):
        try:
            g, kept, ui, ii = data.preprocess(raws_from(edges), 1.0, core)
        except EmptyAfterFilter:
            return
        assert all(d >= core for d in g.user_degrees()) and all(d >= core for d in g.item_degrees())
        assert sorted(ui.values()) == list(range(g.n_users))
        assert sorted(ii.values()) == list(range(g.n_items))
        inv_u = {k: t for t, k in ui.items()}
        inv_i = {k: t for t, k in ii.items()}
        assert {(inv_u[u], inv_i[i]) for u, i in kept} <= {(str(u), str(i)) for u, i in edges}

    @needs_ml100k
    def test_ml100k_counts(self):
        fmt, thr, core, icore = data.DATASET_PREP["ml100k"]
        g, kept, _, _ = data.preprocess(data.load_ratings(ML100K, fmt), thr, core, icore)
        assert (g.n_users, g.n_items, len(kept)) == (779, 1169, 20805)


class TestSplit:
    def test_ten_edges(self):
        s = data.split([(0, i) for i in range(10)], 1, 10, seed=3)
        assert (len(s.train_edges), len(s.val_edges), len(s.test_edges)) == (7, 1, 2)

    def test_deterministic(self):
        edges = [(u, i) for u in range(5) for i in range(6)]
        a, b = data.split(edges, 5, 6, seed=1), data.split(edges, 5, 6, seed=1)
        assert (a.train_edges, a.val_edges, a.test_edges) == (b.train_edges, b.val_edges, b.test_edges)
        c = data.split(edges, 5, 6, seed=2)
        assert c.train_edges != a.train_edges

    def test_degenerate_user_warning(self):
        s = data.split([(0, 0), (1, 0)], 3, 1, seed=0)
        assert "user 2 has no training interactions" in s.warnings

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            data.split([(0, 0)], 1, 1, fractions=(0.5, 0.2, 0.2))

    @settings(max_examples=40, deadline=None)
    @given(st.sets(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=60),
           st.integers(0, 1000))
    def test_disjoint_and_conserving(self, edges, seed):
        s = data.split(sorted(edges), 10, 10, seed=seed)
        tr, va, te = set(s.train_edges), set(s.val_edges), set(s.test_edges)
        assert not (tr & va or tr & te or va & te)
        assert tr | va | te == edges
        assert len(tr) + len(va) + len(te) == len(edges)

    @needs_ml100k
    def test_ml100k_sizes(self):
        fmt, thr, core, icore = data.DATASET_PREP["ml100k"]
        g, kept, _, _ = data.preprocess(data.load_ratings(ML100K, fmt), thr, core, icore)
        s = data.split(kept, g.n_users, g.n_items, seed=0)
        sizes = (len(s.train_edges), len(s.val_edges), len(s.test_edges))
        for got, reported in zip(sizes, (14585, 2068, 4152)):
            assert abs(got - reported) <= 0.01 * reported


class TestPersistence:
    def make(self):
        raws = raws_from([(10, 5), (10, 7), (11, 5), (12, 9), (11, 7), (12, 5)])
        g, kept, ui, ii = data.preprocess(raws, 1.0, 1)
        return data.split(kept, g.n_users, g.n_items, seed=4, user_index=ui, item_index=ii)

    def test_round_trip(self, tmp_path):
        s = self.make()
        data.save_splits(s, tmp_path / "s.txt")
        back = data.load_splits(tmp_path / "s.txt")
        assert back.graph == s.graph
        assert back.val_edges == s.val_edges and back.test_edges == s.test_edges
        assert back.user_index == s.user_index and back.item_index == s.item_index

    def test_empty_val(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("2 2\n#train\n0 0\n1 1\n#val\n#test\n0 1\n")
        s = data.load_splits(p)
        assert s.val_edges == [] and s.test_edges == [(0, 1)]

    def test_header_mismatch(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("2 2\n#train\n0 5\n")
        with pytest.raises(FormatError):
            data.load_splits(p)

    @pytest.mark.parametrize("body", ["", "x y\n", "2 2\n0 0\n", "2 2\n#bogus\n", "2 2\n#train\n0\n"])
    def test_malformed(self, tmp_path, body):
        p = tmp_path / "s.txt"
        p.write_text(body)
        with pytest.raises(FormatError):
            data.load_splits(p)
