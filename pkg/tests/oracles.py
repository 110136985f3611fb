"""Naive loop re-implementations of the metrics and the analytic filter response, used as independent oracles."""

import math

import numpy as np


def flat(a):
    out = []

    def walk(x):
        if hasattr(x, "__len__"):
            for v in x:
                walk(v)
        else:
            out.append(float(x))
    walk(a.tolist() if hasattr(a, "tolist") else a)
    return out


def rmse(y, y_hat):
    ys, ps = flat(y), flat(y_hat)
    total = 0.0
    for a, b in zip(ys, ps):
        total += (a - b) * (a - b)
    return math.sqrt(total / len(ys))


def nrmse(y, y_hat):
    ys = flat(y)
    lo, hi = ys[0], ys[0]
    for v in ys:
        lo, hi = min(lo, v), max(hi, v)
    return 100.0 * rmse(y, y_hat) / (hi - lo)


def r_squared(y, y_hat):
    ys, ps = flat(y), flat(y_hat)
    mean = sum(ys) / len(ys)
    res = tot = 0.0
    for a, b in zip(ys, ps):
        res += (a - b) ** 2
        tot += (a - mean) ** 2
    return 1.0 - res / tot


def kl_segment_lengths(measured, predicted, bins=50, eps=1e-10, resolution=1.0):
    ms, ps = flat(measured), flat(predicted)
    lo = min(min(ms), min(ps))
    hi = max(max(ms), max(ps))
    if hi - lo >= bins * resolution and hi > lo:
        n, width, start = bins, (hi - lo) / bins, lo
    else:
        n = max(1, math.ceil((hi - lo) / resolution))
        width = resolution
        start = (lo + hi) / 2 - n * resolution / 2

    def hist(values):
        counts = [0] * n
        for v in values:
            i = int((v - start) / width)
            counts[min(max(i, 0), n - 1)] += 1
        probs = [c / len(values) + eps for c in counts]
        s = sum(probs)
        return [p / s for p in probs]

    p, q = hist(ms), hist(ps)
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def analytic_two_pass_gain(f, fs=120.0, fc=10.0, order=4):
    """Amplitude gain of forward-backward filtering: |H|² of the bilinear Butterworth."""
    r = np.tan(np.pi * f / fs) / np.tan(np.pi * fc / fs)
    return 1.0 / (1.0 + r ** (2 * order))


def amplitude(series, f, fs=120.0):
    t = np.arange(series.size) / fs
    # least-squares fit of a sinusoid at frequency f
    A = np.column_stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)])
    coef, *_ = np.linalg.lstsq(A, series, rcond=None)
    return float(np.hypot(*coef))
