"""Plain-Python reference implementations used as independent test oracles."""

import math


def mean(xs):
    return sum(xs) / len(xs)


def pearson(x, y):
    mx, my = mean(x), mean(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def mae(pred, gt):
    return sum(abs(p - g) for p, g in zip(pred, gt)) / len(pred)


def see(pred, gt):
    # gt regressed on pred through the 2x2 normal equations
    n = len(pred)
    sx, sy = sum(pred), sum(gt)
    sxx = sum(p * p for p in pred)
    sxy = sum(p * g for p, g in zip(pred, gt))
    det = n * sxx - sx * sx
    slope = (n * sxy - sx * sy) / det
    icpt = (sxx * sy - sx * sxy) / det
    ssr = sum((g - (slope * p + icpt)) ** 2 for p, g in zip(pred, gt))
    return math.sqrt(ssr / (n - 2))


def icc21(pred, gt):
    rows = list(zip(pred, gt))
    n, k = len(rows), 2
    grand = sum(sum(r) for r in rows) / (n * k)
    row_means = [sum(r) / k for r in rows]
    col_means = [sum(r[j] for r in rows) / n for j in range(k)]
    msr = k * sum((m - grand) ** 2 for m in row_means) / (n - 1)
    msc = n * sum((m - grand) ** 2 for m in col_means) / (k - 1)
    sse = sum((rows[i][j] - row_means[i] - col_means[j] + grand) ** 2 for i in range(n) for j in range(k))
    mse = sse / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def rms_cv_percent(groups):
    cvs = []
    for vals in groups:
        m = mean(vals)
        sd = math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1))
        cvs.append(sd / m)
    return 100 * math.sqrt(sum(c * c for c in cvs) / len(cvs))


def psnr(gt, pred):
    flat_g = [v for row in gt for v in row]
    flat_p = [v for row in pred for v in row]
    mse = sum((a - b) ** 2 for a, b in zip(flat_g, flat_p)) / len(flat_g)
    peak = max(flat_g)
    return 10 * math.log10(peak * peak / mse)


def dice_sets(gt, pred, t):
    a = {(i, j) for i, row in enumerate(gt) for j, v in enumerate(row) if v >= t}
    b = {(i, j) for i, row in enumerate(pred) for j, v in enumerate(row) if v >= t}
    if not a and not b:
        return None
    return 2 * len(a & b) / (len(a) + len(b))


def bland_altman(pred, gt, case_ids, z=1.96):
    d = [p - g for p, g in zip(pred, gt)]
    m = mean(d)
    sd = math.sqrt(sum((x - m) ** 2 for x in d) / (len(d) - 1))
    lo, hi = m - z * sd, m + z * sd
    flags = [x < lo or x > hi for x in d]
    cases = []
    for c in dict.fromkeys(case_ids):
        ds = [x for x, cc in zip(d, case_ids) if cc == c]
        if all(x > hi for x in ds) or all(x < lo for x in ds):
            cases.append(c)
    return m, sd, lo, hi, flags, cases
