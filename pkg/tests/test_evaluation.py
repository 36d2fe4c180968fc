import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.interpolate import PchipInterpolator
from scipy.stats import entropy as sp_entropy

from condvc.evaluation import (
    BdRateError,
    RDCurve,
    RDPoint,
    RDWarning,
    average_per_sequence,
    bd_rate,
    bd_report_json,
    bd_table,
    bpp,
    curves_from_rows,
    empirical_entropy_check,
    pchip_eval,
    pchip_integral,
    pchip_slopes,
    plot_rd_curves,
    plot_tradeoff,
    psnr_rgb,
    read_rd_csv,
    render_bd_table,
    write_rd_csv,
)


def random_curve(rng, label="c", n=4):
    bpps = np.sort(rng.uniform(0.02, 1.5, n))
    while np.any(np.diff(bpps) < 1e-3):
        bpps = np.sort(rng.uniform(0.02, 1.5, n))
    psnrs = np.sort(rng.uniform(26, 42, n))
    while np.any(np.diff(psnrs) < 1e-3):
        psnrs = np.sort(rng.uniform(26, 42, n))
    return RDCurve([RDPoint(b, p) for b, p in zip(bpps, psnrs)], label)


def bd_oracle(anchor: RDCurve, test: RDCurve, n=100_000) -> float:
    """Dense trapezoidal integration of scipy's PCHIP interpolants of log10(bpp) over PSNR."""
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    grid = np.linspace(lo, hi, n)
    fa = PchipInterpolator(anchor.psnrs, np.log10(anchor.bpps))(grid)
    ft = PchipInterpolator(test.psnrs, np.log10(test.bpps))(grid)
    return (10 ** (np.trapezoid(ft - fa, grid) / (hi - lo)) - 1) * 100


class TestMetrics:
    def test_psnr_examples(self):
        x = np.zeros((3, 4, 4))
        assert psnr_rgb(x, x) == 100.0
        assert psnr_rgb(x, np.full_like(x, math.sqrt(650.25) / 255)) == pytest.approx(20.0)
        assert psnr_rgb(x, np.ones_like(x)) == pytest.approx(0.0)
        with pytest.raises(ValueError):
            psnr_rgb(x, x[:, :2])

    def test_bpp(self):
        assert bpp(4096, 64, 64) == 1.0
        assert bpp(0, 64, 64) == 0.0
        assert bpp(96 * 2 * 64 * 48, 96 * 64, 48) == pytest.approx(2.0)


class TestCurves:
    def test_point_validation(self):
        with pytest.raises(ValueError):
            RDPoint(0.0, 30)
        with pytest.raises(ValueError):
            RDPoint(0.1, float("nan"))

    def test_curve_rules(self):
        with pytest.raises(ValueError):
            RDCurve([(0.1, 30), (0.2, 31), (0.3, 32)])
        with pytest.raises(ValueError):
            RDCurve([(0.1, 30), (0.1, 31), (0.3, 32), (0.4, 33)])
        c = RDCurve([(0.4, 33), (0.1, 30), (0.3, 32), (0.2, 31)])
        assert list(c.bpps) == [0.1, 0.2, 0.3, 0.4]
        with pytest.warns(RDWarning):
            RDCurve([(0.1, 30), (0.2, 32), (0.3, 31), (0.4, 33)])


class TestPchip:
    @given(st.integers(0, 10_000))
    def test_matches_scipy(self, seed):
        rng = np.random.default_rng(seed)
        x = np.sort(rng.uniform(0, 10, 6))
        if np.any(np.diff(x) < 1e-3):
            return
        y = rng.normal(size=6)
        np.testing.assert_allclose(pchip_slopes(x, y), PchipInterpolator(x, y).derivative()(x), atol=1e-9)
        q = np.linspace(x[0], x[-1], 57)
        np.testing.assert_allclose(pchip_eval(x, y, q), PchipInterpolator(x, y)(q), atol=1e-9)
        lo, hi = np.sort(rng.uniform(x[0], x[-1], 2))
        assert pchip_integral(x, y, lo, hi) == pytest.approx(PchipInterpolator(x, y).integrate(lo, hi), abs=1e-9)

    @given(st.integers(0, 10_000))
    def test_no_overshoot_on_monotone(self, seed):
        rng = np.random.default_rng(seed)
        x = np.cumsum(rng.uniform(0.1, 2, 5))
        y = np.cumsum(rng.uniform(0.0, 1, 5))
        v = pchip_eval(x, y, np.linspace(x[0], x[-1], 400))
        assert v.min() >= y[0] - 1e-12 and v.max() <= y[-1] + 1e-12
        assert np.all(np.diff(v) >= -1e-12)


class TestBdRate:
    def test_identical(self):
        c = random_curve(np.random.default_rng(0))
        assert bd_rate(c, c) == 0.0

    @pytest.mark.parametrize("k", [2.0, 0.5, 1.37])
    def test_scaled(self, k):
        c = random_curve(np.random.default_rng(1))
        assert bd_rate(c, c.scaled(k)) == pytest.approx((k - 1) * 100, abs=1e-9)

    @given(st.integers(0, 10_000), st.floats(0.2, 5))
    def test_duality(self, seed, k):
        c = random_curve(np.random.default_rng(seed))
        t = c.scaled(k)
        assert (1 + bd_rate(c, t) / 100) * (1 + bd_rate(t, c) / 100) == pytest.approx(1.0, abs=1e-9)

    def test_against_oracle(self):
        rng = np.random.default_rng(2024)
        done = 0
        while done < 100:
            a, t = random_curve(rng, "a"), random_curve(rng, "t")
            lo, hi = max(a.psnrs.min(), t.psnrs.min()), min(a.psnrs.max(), t.psnrs.max())
            if hi - lo < 0.5:
                continue
            assert abs(bd_rate(a, t) - bd_oracle(a, t)) <= 0.01
            done += 1

    def test_no_overlap(self):
        a = RDCurve([(0.1, 20), (0.2, 21), (0.3, 22), (0.4, 23)], "low")
        b = RDCurve([(0.1, 30), (0.2, 31), (0.3, 32), (0.4, 33)], "high")
        with pytest.raises(BdRateError, match="low.*20.000, 23.000"):
            bd_rate(a, b)

    def test_sign(self):
        c = random_curve(np.random.default_rng(5))
        assert bd_rate(c, c.scaled(0.9)) < 0 < bd_rate(c, c.scaled(1.1))


class TestAverage:
    def test_examples(self):
        assert average_per_sequence({"a": -2.0, "b": 4.0}).dataset_average == 1.0
        assert average_per_sequence({"a": 3.25}).dataset_average == 3.25
        with pytest.raises(ValueError):
            average_per_sequence({})

    @given(st.dictionaries(st.text(min_size=1, max_size=4), st.floats(-100, 100), min_size=1, max_size=8),
           st.randoms())
    def test_order_invariant(self, d, rnd):
        keys = list(d)
        rnd.shuffle(keys)
        r = average_per_sequence({k: d[k] for k in keys})
        assert r.dataset_average == average_per_sequence(d).dataset_average
        assert r.per_sequence == d


def conditional_oracle(p):
    """H(X | Y) = sum_y p(y) H(X | Y=y), via scipy."""
    py = p.sum(axis=0)
    return sum(py[j] * sp_entropy(p[:, j] / py[j], base=2) for j in range(p.shape[1]) if py[j] > 0)


class TestEntropy:
    def test_perfect_predictor(self):
        px = np.array([0.1, 0.2, 0.3, 0.4])
        t = empirical_entropy_check(np.diag(px))
        assert t.h_x == pytest.approx(sp_entropy(px, base=2))
        assert t.h_residual == 0.0 and t.h_conditional == 0.0

    def test_independent_uniform(self):
        t = empirical_entropy_check(np.full((4, 4), 1 / 16))
        assert t.h_x == pytest.approx(2.0) and t.h_conditional == pytest.approx(2.0)
        oracle = sp_entropy(np.array([1, 2, 3, 4, 3, 2, 1]) / 16, base=2)
        assert t.h_residual == pytest.approx(oracle, abs=1e-12)
        assert t.h_residual == pytest.approx(2.6556, abs=1e-4)

    def test_symmetric_noise(self):
        n = 8
        p = np.zeros((n, n + 2))
        for x in range(n):
            for e, pe in ((-1, 0.25), (0, 0.5), (1, 0.25)):
                p[x, x + e + 1] = pe / n
        t = empirical_entropy_check(p, xt_values=np.arange(n), xc_values=np.arange(-1, n + 1))
        assert t.h_conditional < t.h_residual
        assert t.h_conditional == pytest.approx(conditional_oracle(p), abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            empirical_entropy_check(np.full((2, 2), 0.3))
        with pytest.raises(ValueError):
            empirical_entropy_check(np.array([[1.5, -0.5], [0, 0]]))
        with pytest.raises(ValueError):
            empirical_entropy_check(np.ones(4) / 4)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 6))
    def test_laws(self, seed, a, b):
        rng = np.random.default_rng(seed)
        p = rng.random((a, b)) * (rng.random((a, b)) < 0.7)
        if p.sum() == 0:
            p[0, 0] = 1
        p /= p.sum()
        t = empirical_entropy_check(p, atol=1e-9)
        assert t.h_conditional <= t.h_x + 1e-9
        assert t.h_conditional <= t.h_residual + 1e-9
        assert t.h_conditional == pytest.approx(conditional_oracle(p), abs=1e-9)


class TestInterchange:
    def _rows(self):
        rng = np.random.default_rng(0)
        base = {seq: random_curve(rng, seq) for seq in ("s1", "s2")}
        rows = []
        for lab, k in (("A", 1.0), ("B", 1.2)):
            for seq, c in base.items():
                for lam, pt in zip((256, 512, 1024, 2048), c.points):
                    rows.append({"label": lab, "sequence_id": seq, "lambda": lam, "bpp": pt.bpp * k, "psnr": pt.psnr})
        return rows

    def test_csv_round_trip_and_table(self, tmp_path):
        rows = self._rows()
        write_rd_csv(tmp_path / "rd.csv", rows)
        back = read_rd_csv(tmp_path / "rd.csv")
        assert len(back) == 16 and set(back[0]) == {"label", "sequence_id", "lambda", "bpp", "psnr"}
        curves = curves_from_rows(back)
        reps = bd_table(curves, "A")
        assert reps["A"].dataset_average == 0.0
        assert reps["B"].dataset_average == pytest.approx(20.0, abs=1e-9)
        doc = json.loads(bd_report_json(reps, "A"))
        assert doc["anchor"] == "A" and doc["reports"]["B"]["per_sequence"]["s1"] == pytest.approx(20.0)
        text = render_bd_table(reps, "A")
        assert "Average" in text and "20.00" in text
        plot_rd_curves({lab: seqs["s1"] for lab, seqs in curves.items()}, tmp_path / "rd.png")
        plot_tradeoff([{"label": "A", "bd_rate": 0.0, "dec_kmacs_per_pixel": 10.0},
                       {"label": "B", "bd_rate": 20.0, "dec_kmacs_per_pixel": 11.0}], tmp_path / "t.png")
        assert (tmp_path / "rd.png").stat().st_size > 0 and (tmp_path / "t.png").stat().st_size > 0

    def test_missing_columns(self, tmp_path):
        (tmp_path / "x.csv").write_text("label,bpp\nA,0.1\n")
        with pytest.raises(ValueError, match="missing"):
            read_rd_csv(tmp_path / "x.csv")

    def test_non_strict_table(self):
        lo = RDCurve([(0.1, 20), (0.2, 21), (0.3, 22), (0.4, 23)])
        hi = RDCurve([(0.1, 30), (0.2, 31), (0.3, 32), (0.4, 33)])
        curves = {"A": {"s": lo}, "B": {"s": hi}}
        with pytest.raises(BdRateError):
            bd_table(curves, "A")
        with warnings.catch_warnings(record=True):
            warnings.simplefilter("always")
            reps = bd_table(curves, "A", strict=False)
        assert math.isnan(reps["B"].dataset_average)
        with pytest.raises(BdRateError):
            bd_table(curves, "Z")

    def test_non_strict_drops_degenerate_curves(self):
        rows = [{"label": lab, "sequence_id": seq, "lambda": lam, "bpp": b, "psnr": 30 + i}
                for lab in ("A", "B") for seq in ("s1", "s2")
                for i, (lam, b) in enumerate(zip((256, 512, 1024, 2048), (0.1, 0.2, 0.4, 0.8)))]
        for r in rows:
            if r["label"] == "B" and r["sequence_id"] == "s2":
                r["bpp"] = 0.5  # identical byte counts at every lambda
        with pytest.raises(ValueError, match="repeated bpp"):
            curves_from_rows(rows)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            curves = curves_from_rows(rows, strict=False)
            reps = bd_table(curves, "A", strict=False)
        assert set(curves["B"]) == {"s1"}
        assert reps["B"].per_sequence["s1"] == 0.0 and math.isnan(reps["B"].per_sequence["s2"])
        assert reps["A"].dataset_average == 0.0
        assert any(issubclass(w.category, RDWarning) for w in caught)
