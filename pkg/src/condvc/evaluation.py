"""PSNR-RGB, bpp, BD-rate with monotone piecewise-cubic interpolation, and the discrete entropy checker."""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSNR_CAP = 100.0


class BdRateError(ValueError):
    pass


class RDWarning(UserWarning):
    pass


# --------------------------------------------------------------------------- quality and rate

def psnr_rgb(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR on the 0..255 scale of two [0, 1] frames, capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((255.0 * (x - x_hat)) ** 2))
    return psnr_from_mse(mse)


def psnr_from_mse(mse: float) -> float:
    """``mse`` on the 0..255 scale."""
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def bpp(total_bits: float, width: int, height: int) -> float:
    return total_bits / (width * height)


# --------------------------------------------------------------------------- RD curves

@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and math.isfinite(self.psnr)):
            raise ValueError(f"non-finite RD point ({self.bpp}, {self.psnr})")
        if self.bpp <= 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


@dataclass
class RDCurve:
    points: list
    label: str = ""

    def __post_init__(self):
        pts = [p if isinstance(p, RDPoint) else RDPoint(*p) for p in self.points]
        if len(pts) < 4:
            raise ValueError(f"curve {self.label!r} needs at least 4 points, got {len(pts)}")
        pts.sort(key=lambda p: p.bpp)
        if any(b.bpp <= a.bpp for a, b in zip(pts, pts[1:])):
            raise ValueError(f"curve {self.label!r} has repeated bpp values")
        if any(b.psnr <= a.psnr for a, b in zip(pts, pts[1:])):
            warnings.warn(f"curve {self.label!r}: PSNR is not strictly increasing with bpp", RDWarning)
        self.points = pts

    @property
    def bpps(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])

    def scaled(self, k: float, label: str | None = None) -> "RDCurve":
        return RDCurve([RDPoint(p.bpp * k, p.psnr) for p in self.points], label or self.label)


# --------------------------------------------------------------------------- PCHIP

def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson derivatives: weighted harmonic mean inside, shape-preserving ends."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h = np.diff(x)
    m = np.diff(y) / h
    n = len(x)
    d = np.zeros(n)
    if n == 2:
        d[:] = m[0]
        return d
    for k in range(1, n - 1):
        if m[k - 1] * m[k] <= 0:
            d[k] = 0.0
        else:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k])
    d[0] = _edge_slope(h[0], h[1], m[0], m[1])
    d[-1] = _edge_slope(h[-1], h[-2], m[-1], m[-2])
    return d


def _edge_slope(h0, h1, m0, m1) -> float:
    d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    if np.sign(d) != np.sign(m0):
        return 0.0
    if np.sign(m0) != np.sign(m1) and abs(d) > abs(3 * m0):
        return 3 * m0
    return d


def pchip_integral(x: np.ndarray, y: np.ndarray, lo: float, hi: float) -> float:
    """Exact integral over [lo, hi] of the PCHIP interpolant through (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = pchip_slopes(x, y)
    total = 0.0
    for k in range(len(x) - 1):
        a, b = max(lo, x[k]), min(hi, x[k + 1])
        if b <= a:
            continue
        h = x[k + 1] - x[k]
        m = (y[k + 1] - y[k]) / h
        c = (y[k], d[k], (3 * m - 2 * d[k] - d[k + 1]) / h, (d[k] + d[k + 1] - 2 * m) / h ** 2)

        def prim(s):
            return c[0] * s + c[1] * s ** 2 / 2 + c[2] * s ** 3 / 3 + c[3] * s ** 4 / 4

        total += prim(b - x[k]) - prim(a - x[k])
    return total


def pchip_eval(x: np.ndarray, y: np.ndarray, xq: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xq = np.asarray(xq, dtype=np.float64)
    d = pchip_slopes(x, y)
    k = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    t = (xq - x[k]) / h
    h00 = (1 + 2 * t) * (1 - t) ** 2
    h10 = t * (1 - t) ** 2
    h01 = t ** 2 * (3 - 2 * t)
    h11 = t ** 2 * (t - 1)
    return h00 * y[k] + h10 * h * d[k] + h01 * y[k + 1] + h11 * h * d[k + 1]


# --------------------------------------------------------------------------- BD-rate

def _log_rate_vs_psnr(curve: RDCurve) -> tuple[np.ndarray, np.ndarray]:
    psnr, rate = curve.psnrs, np.log10(curve.bpps)
    order = np.argsort(psnr, kind="stable")
    psnr, rate = psnr[order], rate[order]
    if np.any(np.diff(psnr) <= 0):
        raise BdRateError(f"curve {curve.label!r} has repeated PSNR values {psnr.tolist()}")
    return psnr, rate


def overlap(anchor: RDCurve, test: RDCurve) -> tuple[float, float]:
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    return lo, hi


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference (%) of ``test`` against ``anchor`` at equal PSNR.

    log10(bpp) is interpolated as a function of PSNR and integrated over the
    overlapping PSNR interval. Positive means the test curve needs more rate.
    """
    lo, hi = overlap(anchor, test)
    if not hi > lo:
        raise BdRateError(
            f"no PSNR overlap: {anchor.label!r} spans [{anchor.psnrs.min():.3f}, {anchor.psnrs.max():.3f}] dB, "
            f"{test.label!r} spans [{test.psnrs.min():.3f}, {test.psnrs.max():.3f}] dB")
    pa, ra = _log_rate_vs_psnr(anchor)
    pt, rt = _log_rate_vs_psnr(test)
    diff = (pchip_integral(pt, rt, lo, hi) - pchip_integral(pa, ra, lo, hi)) / (hi - lo)
    return (10.0 ** diff - 1.0) * 100.0


@dataclass
class BdReport:
    per_sequence: dict
    dataset_average: float
    label: str = ""


def average_per_sequence(reports: dict, label: str = "") -> BdReport:
    if not reports:
        raise ValueError("no per-sequence BD-rates to average")
    vals = [reports[k] for k in sorted(reports)]
    return BdReport(dict(reports), float(math.fsum(vals) / len(vals)), label)


# --------------------------------------------------------------------------- entropy checker

@dataclass(frozen=True)
class EntropyTriple:
    h_x: float
    h_residual: float
    h_conditional: float


def _entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return max(0.0, float(-(p * np.log2(p)).sum()))


def empirical_entropy_check(joint: np.ndarray, xt_values: np.ndarray | None = None,
                            xc_values: np.ndarray | None = None, atol: float = 1e-12) -> EntropyTriple:
    """Exact H(x_t), H(x_t - x_c) and H(x_t | x_c) from a joint table P[x_t, x_c].

    Alphabets default to 0..n-1 on each axis and must be integers so that the
    difference lives on an integer alphabet.
    """
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"joint must be a 2-D table, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("joint has negative or non-finite entries")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"joint sums to {p.sum()!r}, not 1")
    xt = np.arange(p.shape[0]) if xt_values is None else np.asarray(xt_values)
    xc = np.arange(p.shape[1]) if xc_values is None else np.asarray(xc_values)
    if xt.shape != (p.shape[0],) or xc.shape != (p.shape[1],):
        raise ValueError("alphabet sizes disagree with the joint table")
    h_x = _entropy(p.sum(axis=1))
    h_cond = _entropy(p) - _entropy(p.sum(axis=0))
    diffs = (xt[:, None] - xc[None, :]).ravel()
    hist = defaultdict(float)
    for dv, pv in zip(diffs.tolist(), p.ravel().tolist()):
        hist[dv] += pv
    h_res = _entropy(np.array(list(hist.values())))
    return EntropyTriple(h_x, h_res, max(h_cond, 0.0))


# --------------------------------------------------------------------------- interchange

RD_FIELDS = ("label", "sequence_id", "lambda", "bpp", "psnr")


def write_rd_csv(path: str | Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RD_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in RD_FIELDS})


def read_rd_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(RD_FIELDS) - set(rows[0] if rows else RD_FIELDS)
    if missing:
        raise ValueError(f"{path}: missing RD columns {sorted(missing)}")
    return [{"label": r["label"], "sequence_id": r["sequence_id"], "lambda": float(r["lambda"]),
             "bpp": float(r["bpp"]), "psnr": float(r["psnr"])} for r in rows]


def curves_from_rows(rows: list[dict], strict: bool = True) -> dict:
    """{label: {sequence_id: RDCurve}}

    With ``strict=False`` an invalid curve (too few points, repeated bpp) is
    dropped with a warning; undertrained models can produce identical byte
    counts at different lambdas.
    """
    grouped = defaultdict(lambda: defaultdict(list))
    for r in rows:
        grouped[r["label"]][r["sequence_id"]].append(RDPoint(r["bpp"], r["psnr"]))
    out = {}
    for lab, seqs in grouped.items():
        out[lab] = {}
        for seq, pts in seqs.items():
            try:
                out[lab][seq] = RDCurve(pts, f"{lab}/{seq}")
            except ValueError as exc:
                if strict:
                    raise
                warnings.warn(str(exc), RDWarning)
    return out


def bd_table(curves: dict, anchor: str, strict: bool = True) -> dict:
    """BdReport per label against ``anchor`` over the sequences both share.

    With ``strict=False`` a sequence whose curves do not overlap, or that is
    missing on one side, gets NaN and a warning instead of aborting the table.
    """
    if anchor not in curves:
        raise BdRateError(f"anchor {anchor!r} not among labels {sorted(curves)}")
    out = {}
    for label, seqs in curves.items():
        shared = sorted(set(seqs) & set(curves[anchor]))
        if strict and not shared:
            raise BdRateError(f"{label!r} shares no sequences with anchor {anchor!r}")
        per = {}
        for s in sorted(set(seqs) | set(curves[anchor])):
            if s not in shared:
                if strict:
                    continue
                warnings.warn(f"{label} / {s}: no valid curve on both sides", RDWarning)
                per[s] = float("nan")
                continue
            try:
                per[s] = bd_rate(curves[anchor][s], seqs[s])
            except BdRateError as exc:
                if strict:
                    raise
                warnings.warn(f"{label} / {s}: {exc}", RDWarning)
                per[s] = float("nan")
        out[label] = average_per_sequence(per, label) if per else BdReport({}, float("nan"), label)
    return out


def bd_report_json(reports: dict, anchor: str) -> str:
    return json.dumps({
        "anchor": anchor,
        "reports": {lab: {"per_sequence": r.per_sequence, "dataset_average": r.dataset_average}
                    for lab, r in reports.items()},
    }, indent=2, sort_keys=True)


def render_bd_table(reports: dict, anchor: str | None = None) -> str:
    """Rows are labels, columns the sequences followed by the average."""
    seqs = sorted({s for r in reports.values() for s in r.per_sequence})
    width = max([len("label")] + [len(l) for l in reports]) + 2
    head = "label".ljust(width) + "".join(s[:12].rjust(13) for s in seqs) + "Average".rjust(10)
    lines = [f"BD-rate (%) vs anchor {anchor}" if anchor else "BD-rate (%)", head, "-" * len(head)]
    for lab, r in reports.items():
        cells = "".join((f"{r.per_sequence[s]:.2f}" if s in r.per_sequence else "-").rjust(13) for s in seqs)
        lines.append(lab.ljust(width) + cells + f"{r.dataset_average:.2f}".rjust(10))
    return "\n".join(lines)


def plot_rd_curves(curves: dict, path: str | Path, title: str = ""):
    """``curves`` maps label -> RDCurve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for lab, c in curves.items():
        ax.plot(c.bpps, c.psnrs, marker="o", label=lab)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR-RGB (dB)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tradeoff(points: list[dict], path: str | Path, x_key: str = "dec_kmacs_per_pixel"):
    """BD-rate against complexity; each point needs ``label``, ``bd_rate`` and ``x_key``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for p in points:
        ax.scatter(p[x_key], p["bd_rate"])
        ax.annotate(p["label"], (p[x_key], p["bd_rate"]), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.set_xlabel(x_key.replace("_", " "))
    ax.set_ylabel("BD-rate (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
