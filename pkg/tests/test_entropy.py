import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy.stats import norm

from condvc.config import SIGMA_MIN
from condvc.entropy.bitstream import (
    HEADER_SIZE,
    Bitstream,
    BitstreamError,
    FrameRecord,
    FrameType,
    Header,
)
from condvc.entropy.models import (
    EntropyParams,
    PriorFusion,
    estimate_rate,
    gaussian_cdf_table,
    gaussian_likelihood,
    quantize,
    scale_index,
    scale_levels,
    symbols_of,
)
from condvc.entropy.rangecoder import (
    TOTAL,
    CdfTable,
    CodingError,
    DecodeError,
    ideal_bits,
    quantize_pmf,
    range_decode,
    range_encode,
)


def _params(mu, sigma):
    return EntropyParams(torch.as_tensor(mu, dtype=torch.float64), torch.as_tensor(sigma, dtype=torch.float64))


class TestQuantize:
    def test_eval_rounding(self):
        assert quantize(torch.tensor([1.4]), "eval").item() == 1.0

    def test_mean_centred(self):
        y, mu = torch.tensor([1.4]), torch.tensor([1.3])
        assert symbols_of(y, mu).item() == 0
        assert quantize(y, "eval", mu).item() == pytest.approx(1.3)

    def test_train_noise_unbiased(self):
        g = torch.Generator().manual_seed(0)
        y = torch.zeros(100_000)
        d = quantize(y, "train", generator=g) - y
        assert abs(d.mean().item()) < 0.01
        assert d.min() >= -0.5 and d.max() < 0.5

    def test_bad_phase(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(1), "test")

    @given(st.floats(-1e3, 1e3), st.floats(-10, 10))
    def test_eval_error_bound(self, y, mu):
        yh = quantize(torch.tensor([y], dtype=torch.float64), "eval", torch.tensor([mu], dtype=torch.float64))
        assert abs(yh.item() - y) <= 0.5 + 1e-9


class TestRate:
    def test_unit_gaussian_at_zero(self):
        # oracle: p = 2*Phi(0.5) - 1 from scipy's normal CDF
        p = 2 * norm.cdf(0.5) - 1
        assert p == pytest.approx(0.382925, abs=1e-6)
        bits = estimate_rate(torch.zeros(1, dtype=torch.float64), _params([0.0], [1.0])).item()
        assert bits == pytest.approx(-math.log2(p), abs=1e-3)
        assert bits == pytest.approx(1.3849, abs=1e-3)

    def test_floor(self):
        bits = estimate_rate(torch.tensor([100.0], dtype=torch.float64), _params([0.0], [0.01])).item()
        assert bits == 16.0

    def test_additive(self):
        a = estimate_rate(torch.tensor([0.3], dtype=torch.float64), _params([0.1], [0.7]))
        b = estimate_rate(torch.tensor([-2.0], dtype=torch.float64), _params([0.5], [2.0]))
        both = estimate_rate(torch.tensor([0.3, -2.0], dtype=torch.float64), _params([0.1, 0.5], [0.7, 2.0]))
        assert both.item() == pytest.approx((a + b).item(), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            estimate_rate(torch.zeros(2), _params([0.0], [1.0]))

    def test_sigma_clamped(self):
        p = _params([0.0], [-5.0])
        assert p.sigma.item() == SIGMA_MIN

    @given(st.floats(-3, 3), st.floats(0.05, 20))
    def test_likelihoods_sum_below_one(self, mu, sigma):
        ys = torch.arange(-200, 201, dtype=torch.float64)
        p = gaussian_likelihood(ys, torch.full_like(ys, mu), torch.full_like(ys, sigma))
        # the floor can add at most 2^-16 per symbol on top of a total mass of 1
        assert p.sum().item() <= 1.0 + 401 * 2.0 ** -16

    def test_gradient_finite_difference(self):
        torch.manual_seed(0)
        y = torch.randn(8, dtype=torch.float64, requires_grad=True)
        mu = (0.3 * torch.randn(8, dtype=torch.float64)).requires_grad_()
        sigma = (0.5 + torch.rand(8, dtype=torch.float64)).requires_grad_()

        def f(y, mu, sigma):
            return estimate_rate(y, EntropyParams(mu, sigma))

        assert torch.autograd.gradcheck(f, (y, mu, sigma), eps=1e-6, atol=1e-8, rtol=1e-3)


class TestTables:
    @given(st.integers(0, 255), st.integers(1, 40))
    def test_table_contract(self, level, bound):
        t = gaussian_cdf_table(level, bound)
        assert t.cdf[0] == 0 and t.cdf[-1] == TOTAL
        assert all(b > a for a, b in zip(t.cdf, t.cdf[1:]))

    def test_scale_levels(self):
        lv = scale_levels()
        assert len(lv) == 256 and lv[0] == pytest.approx(SIGMA_MIN) and lv[-1] == pytest.approx(256.0)
        assert list(scale_index(np.array([SIGMA_MIN, 256.0, 1e-9, 1e9]))) == [0, 255, 0, 255]

    def test_largest_remainder(self):
        cdf = quantize_pmf(np.array([1 / 3, 1 / 3, 1 / 3]))
        counts = np.diff(cdf)
        assert counts.sum() == TOTAL and counts.max() - counts.min() <= 1
        # tie goes to the lowest index
        assert counts[0] >= counts[2]

    def test_bad_table(self):
        with pytest.raises(CodingError):
            CdfTable((0, 5, 5, TOTAL), 1)
        with pytest.raises(CodingError):
            CdfTable((0, TOTAL), 1)


class TestRangeCoder:
    def test_empty(self):
        payload = range_encode([], [])
        assert len(payload) <= 8
        assert range_decode(payload, []) == []

    def test_skewed_source_rate(self):
        rng = np.random.default_rng(0)
        pmf = np.array([0.25, 0.5, 0.25])
        table = CdfTable.from_pmf(pmf, 1)
        syms = rng.choice([-1, 0, 1], size=1000, p=pmf)
        payload = range_encode(syms, [table] * 1000)
        ideal = -np.log2(pmf[syms + 1]).sum()
        assert 8 * len(payload) <= 1.02 * ideal + 32 * 8
        # the empirical information content should itself be near 1500 bits
        assert abs(ideal - 1500) < 60
        assert range_decode(payload, [table] * 1000) == list(syms)

    def test_length_bound(self):
        rng = np.random.default_rng(1)
        tables = [gaussian_cdf_table(int(l), 12) for l in rng.integers(60, 200, 500)]
        syms = [int(np.clip(round(rng.normal(0, 2)), -12, 12)) for _ in tables]
        payload = range_encode(syms, tables)
        assert len(payload) <= ideal_bits(syms, tables) / 8 + 32

    def test_out_of_range(self):
        t = CdfTable.from_pmf(np.ones(3), 1)
        with pytest.raises(CodingError):
            range_encode([2], [t])

    def test_truncated(self):
        t = CdfTable.from_pmf(np.ones(201), 100)
        syms = list(np.random.default_rng(0).integers(-100, 101, 200))
        payload = range_encode(syms, [t] * 200)
        with pytest.raises(DecodeError):
            range_decode(payload[: len(payload) // 2], [t] * 200)

    def test_mismatched_tables_detected(self):
        a = CdfTable.from_pmf(np.array([0.9, 0.05, 0.05]), 1)
        b = CdfTable.from_pmf(np.array([0.05, 0.05, 0.9]), 1)
        syms = [0] * 50 + [1, -1] * 10
        payload = range_encode(syms, [a] * len(syms))
        try:
            out = range_decode(payload, [b] * len(syms))
        except DecodeError:
            return
        assert out != syms

    def test_deterministic(self):
        t = gaussian_cdf_table(120, 10)
        syms = [3, -2, 0, 0, 1, 10, -10]
        assert range_encode(syms, [t] * 7) == range_encode(syms, [t] * 7)

    @given(st.data())
    def test_round_trip(self, data):
        n = data.draw(st.integers(0, 60))
        tables, syms = [], []
        for _ in range(n):
            bound = data.draw(st.integers(0, 20))
            pmf = data.draw(st.lists(st.floats(0, 1), min_size=2 * bound + 1, max_size=2 * bound + 1))
            tables.append(CdfTable.from_pmf(np.array(pmf), bound))
            syms.append(data.draw(st.integers(-bound, bound)))
        assert range_decode(range_encode(syms, tables), tables) == syms


class TestContainer:
    def _stream(self):
        h = Header(mode=2, channels=8, digest=b"abcdefgh", width=64, height=48)
        return Bitstream(h, [FrameRecord(FrameType.INTRA_PASSTHROUGH, b"", b"\x01" * 10),
                             FrameRecord(FrameType.INTER, b"mm", b"iii")])

    def test_layout(self):
        data = self._stream().to_bytes()
        assert data[:4] == b"NRDC" and data[5] == 2 and data[6] == 8 and data[7:15] == b"abcdefgh"
        rec = data[HEADER_SIZE:]
        assert rec[0] == 0 and int.from_bytes(rec[1:5], "big") == 0 and int.from_bytes(rec[5:9], "big") == 10
        assert len(data) == len(self._stream())

    def test_round_trip(self):
        s = self._stream()
        back = Bitstream.from_bytes(s.to_bytes())
        assert back.header == s.header and back.records == s.records

    def test_errors(self):
        data = self._stream().to_bytes()
        with pytest.raises(BitstreamError, match="magic"):
            Bitstream.from_bytes(b"XXXX" + data[4:])
        with pytest.raises(BitstreamError, match="byte offset"):
            Bitstream.from_bytes(data[:-1])
        with pytest.raises(BitstreamError):
            Bitstream.from_bytes(data[:10])
        with pytest.raises(BitstreamError, match="version"):
            Bitstream.from_bytes(data[:4] + b"\x09" + data[5:])
        with pytest.raises(BitstreamError):
            Header(0, 8, b"short", 64, 64).pack()


class TestPriors:
    def test_bias_only_output(self):
        torch.manual_seed(0)
        pf = PriorFusion(4, 4, 6)
        p = pf(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2))
        assert torch.allclose(p.mu, p.mu[..., :1, :1].expand_as(p.mu))
        assert torch.allclose(p.sigma, p.sigma[..., :1, :1].expand_as(p.sigma))

    def test_sigma_min_adversarial(self):
        torch.manual_seed(0)
        pf = PriorFusion(4, 4, 6)
        p = pf(-1e6 * torch.ones(1, 4, 2, 2), 1e6 * torch.randn(1, 4, 2, 2))
        assert p.sigma.min().item() >= np.float32(SIGMA_MIN)
