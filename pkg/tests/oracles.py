"""Brute-force reference implementations.

Deliberately naive: explicit loops over the defining formulas, no shared
code with the package under test.
"""
import math

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                iy, ix = y * stride + dy - padding, xx * stride + dx - padding
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[ni, ci, iy, ix] * w[oi, ci, dy, dx]
                    out[ni, oi, y, xx] = acc
    return out


def pixel_shuffle(x, r):
    n, crr, h, w = x.shape
    c = crr // (r * r)
    out = np.zeros((n, c, h * r, w * r))
    for ni in range(n):
        for ci in range(c):
            for y in range(h):
                for xx in range(w):
                    for i in range(r):
                        for j in range(r):
                            out[ni, ci, y * r + i, xx * r + j] = x[ni, ci * r * r + i * r + j, y, xx]
    return out


def round_half_away(v):
    return math.copysign(math.floor(abs(v) + 0.5), v)


def percentile(sample, p):
    s = sorted(float(v) for v in sample)
    rank = p / 100 * (len(s) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (rank - lo) * (s[hi] - s[lo])


def population_variance(vals):
    m = sum(vals) / len(vals)
    return sum((v - m) ** 2 for v in vals) / len(vals)


def top_p(di, p):
    k = math.ceil(p / 100 * len(di) - 1e-9)
    chosen = []
    remaining = list(range(len(di)))
    for _ in range(k):
        best = remaining[0]
        for i in remaining:
            if di[i] > di[best]:
                best = i
        chosen.append(best)
        remaining.remove(best)
    return sorted(chosen)


def skt(student, teacher, eps=1e-12):
    n, c, h, w = student.shape
    total = 0.0
    for ni in range(n):
        fs = [[sum(student[ni, ci, y, x] ** 2 for ci in range(c)) for x in range(w)] for y in range(h)]
        ft = [[sum(teacher[ni, ci, y, x] ** 2 for ci in range(c)) for x in range(w)] for y in range(h)]
        ns = math.sqrt(sum(v * v for row in fs for v in row)) + eps
        nt = math.sqrt(sum(v * v for row in ft for v in row)) + eps
        d = sum((fs[y][x] / ns - ft[y][x] / nt) ** 2 for y in range(h) for x in range(w))
        total += math.sqrt(d)
    return total / n


def luma(px):
    r, g, b = (float(v) for v in px)
    return 0.299 * r + 0.587 * g + 0.114 * b


def psnr_y(sr, hr, crop):
    h, w = sr.shape[:2]
    se, count = 0.0, 0
    for y in range(crop, h - crop):
        for x in range(crop, w - crop):
            se += (luma(sr[y, x]) - luma(hr[y, x])) ** 2
            count += 1
    mse = se / count
    return 100.0 if mse == 0 else 10 * math.log10(255 ** 2 / mse)


def ssim_y(sr, hr, crop, k=11, sigma=1.5):
    ys = np.array([[luma(p) for p in row] for row in sr])[crop:-crop or None, crop:-crop or None]
    yh = np.array([[luma(p) for p in row] for row in hr])[crop:-crop or None, crop:-crop or None]
    half = (k - 1) / 2
    g = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2)) for j in range(k)] for i in range(k)]
    tot = sum(map(sum, g))
    g = [[v / tot for v in row] for row in g]
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for y in range(ys.shape[0] - k + 1):
        for x in range(ys.shape[1] - k + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(k):
                for j in range(k):
                    a, b, wt = ys[y + i, x + j], yh[y + i, x + j], g[i][j]
                    mx += wt * a
                    my += wt * b
                    sxx += wt * a * a
                    syy += wt * b * b
                    sxy += wt * a * b
            sxx, syy, sxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(vals) / len(vals)


def cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def downsample_row(row, s):
    """Antialiased bicubic reduction of a 1-d signal by ``s``, mirrored edges."""
    n = len(row)
    out = []
    for i in range(n // s):
        center = (i + 0.5) * s - 0.5
        acc = wsum = 0.0
        for j in range(math.floor(center - 2 * s), math.ceil(center + 2 * s) + 1):
            wt = cubic((center - j) / s) / s
            jj = j
            while jj < 0 or jj >= n:
                jj = -jj - 1 if jj < 0 else 2 * n - 1 - jj
            acc += wt * row[jj]
            wsum += wt
        out.append(acc / wsum)
    return out


def adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, p0=0.0):
    p, m, v = p0, 0.0, 0.0
    traj = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        traj.append(p)
    return traj


def bn_then_conv_reference(x, w, b, gamma, beta, mean, var, eps):
    """conv followed by frozen BN, evaluated separately."""
    y = conv2d(x, w, b, stride=2, padding=1)
    for o in range(y.shape[1]):
        y[:, o] = (y[:, o] - mean[o]) / math.sqrt(var[o] + eps) * gamma[o] + beta[o]
    return y
