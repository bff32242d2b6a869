"""Pixel ratio, accuracy, confidence intervals and the paired permutation test."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from itertools import groupby

import numpy as np

Z95 = 1.96
EXACT_MAX_PAIRS = 20


class NoPositiveAttribution(ValueError):
    pass


@dataclass(frozen=True)
class SummaryStat:
    mean: float
    ci_half_width: float
    n: int


@dataclass(frozen=True)
class PermutationResult:
    statistic: float
    p_value: float
    n_pairs: int
    resamples: int | str  # count, or "exact"
    null_hypothesis: str = "mu_U >= mu_C"

    @property
    def mode(self) -> str:
        return "exact" if self.resamples == "exact" else "monte_carlo"

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "n_pairs": self.n_pairs,
                "resamples": self.resamples, "mode": self.mode,
                "null_hypothesis": self.null_hypothesis}


def pixel_ratio(pixel_attr, mask, denominator: str = "positive") -> float:
    """Share of positive attribution mass that falls inside ``mask``.

    ``denominator="absolute"`` divides by the total absolute attribution
    instead of the total positive attribution.
    """
    a = np.asarray(pixel_attr, dtype=float)
    m = np.asarray(mask, dtype=bool)
    if a.shape != m.shape:
        raise ValueError(f"attribution {a.shape} and mask {m.shape} differ")
    pos = np.maximum(a, 0.0)
    total = pos.sum()
    if not total > 0:
        raise NoPositiveAttribution("no strictly positive attribution")
    if denominator == "positive":
        denom = total
    elif denominator == "absolute":
        denom = np.abs(a).sum()
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    return float(pos[m].sum() / denom)


def mean_ci(values, z: float = Z95) -> SummaryStat:
    """Mean with a normal-approximation confidence half-width."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    if np.all(v == v[0]):  # avoid rounding residue in the sample std
        return SummaryStat(float(v[0]), 0.0, int(v.size))
    return SummaryStat(float(v.mean()), float(z * v.std(ddof=1) / math.sqrt(v.size)), int(v.size))


def top1_accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(p == y))


def _count_le(diffs, signs_block, s_obs, tol):
    return int(np.count_nonzero(signs_block @ diffs / len(diffs) <= s_obs + tol))


def paired_permutation_test(u_values, c_values, resamples: int = 9999, rng=None,
                            exact: bool | None = None) -> PermutationResult:
    """One-sided paired sign-flip test of mu_U < mu_C.

    The statistic is mean(u) - mean(c). Under the null each pair's
    difference is equally likely to carry either sign. With ``n <= 20`` pairs
    all 2^n flips are enumerated (``p = #{s* <= s} / 2^n``); otherwise
    ``p = (1 + #{s* <= s}) / (1 + resamples)``.
    """
    u = np.asarray(u_values, dtype=float)
    c = np.asarray(c_values, dtype=float)
    if u.shape != c.shape:
        raise ValueError("paired samples differ in length")
    n = u.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = u - c
    s_obs = float(d.mean())
    tol = 1e-12 * max(1.0, float(np.abs(d).max()))
    if exact is None:
        exact = n <= EXACT_MAX_PAIRS
    if exact:
        if n > EXACT_MAX_PAIRS:
            raise ValueError(f"exact enumeration limited to {EXACT_MAX_PAIRS} pairs")
        hits = 0
        codes = np.arange(2 ** n)
        for s in range(0, codes.size, 1 << 16):
            block = codes[s:s + (1 << 16)]
            signs = 1.0 - 2.0 * ((block[:, None] >> np.arange(n)) & 1)
            hits += _count_le(d, signs, s_obs, tol)
        return PermutationResult(s_obs, hits / 2 ** n, n, "exact")
    rng = np.random.default_rng() if rng is None else rng
    hits = 0
    for s in range(0, resamples, 10000):
        m = min(10000, resamples - s)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(m, n))
        hits += _count_le(d, signs, s_obs, tol)
    return PermutationResult(s_obs, (1 + hits) / (1 + resamples), n, int(resamples))


RESULT_COLUMNS = ("train_set", "eval_set", "arch", "method", "mu", "ci95", "n", "excluded", "mark")
GROUP_KEYS = ("train_set", "eval_set", "arch", "method")


def summarize_table(rows, z: float = Z95) -> list[dict]:
    """Group value rows into SummaryStat rows.

    ``rows`` are dicts holding the four group keys, ``value`` (a float or
    None for an excluded sample). Output rows carry 4-decimal ``mu``/``ci95``
    strings and a ``mark`` of "min"/"max" for the extreme means within each
    (eval_set, arch, method) column.
    """
    rows = sorted(rows, key=lambda r: tuple(str(r[k]) for k in GROUP_KEYS))
    out = []
    for key, grp in groupby(rows, key=lambda r: tuple(str(r[k]) for k in GROUP_KEYS)):
        grp = list(grp)
        vals = [r["value"] for r in grp if r.get("value") is not None]
        excluded = len(grp) - len(vals)
        if not vals:
            raise ValueError(f"group {key} has no usable values")
        stat = mean_ci(vals, z) if len(vals) > 1 else SummaryStat(float(vals[0]), float("nan"), 1)
        out.append({**dict(zip(GROUP_KEYS, key)), "stat": stat, "excluded": excluded})
    columns = {}
    for r in out:
        columns.setdefault((r["eval_set"], r["arch"], r["method"]), []).append(r)
    for col in columns.values():
        for r in col:
            r["mark"] = ""
        if len(col) > 1:
            means = [r["stat"].mean for r in col]
            col[int(np.argmin(means))]["mark"] = "min"
            col[int(np.argmax(means))]["mark"] = "max"
    return out


def table_rows(summary) -> list[tuple]:
    return [(r["train_set"], r["eval_set"], r["arch"], r["method"], f"{r['stat'].mean:.4f}",
             f"{r['stat'].ci_half_width:.4f}", r["stat"].n, r["excluded"], r["mark"]) for r in summary]


def ci_separated(a: SummaryStat, b: SummaryStat) -> bool:
    """True when the two confidence intervals do not overlap."""
    return abs(a.mean - b.mean) > a.ci_half_width + b.ci_half_width


def summary_to_dict(s: SummaryStat) -> dict:
    return asdict(s)
