"""Independent Monte Carlo reference for least-squares identification of
x(t+1) = D x(t) + w(t+1), D = diag(1.5, 0.5), w ~ N(0, I), x(0) = 0.

States are carried in 4096-bit MPFR (gmpy2) and the estimate is formed from
the normal equations by Cramer's rule, so neither the arithmetic nor the
noise stream is shared with the Rust implementation.

Prints the median and 95th percentile of ||D_hat - D||_2 per horizon, plus a
bootstrap 99th percentile of the median at each horizon.

    python3 tools/oracle_unstable_ls.py [--seeds 200] [--master 20240601]
"""

import argparse

import gmpy2
import numpy as np
from gmpy2 import mpfr

HORIZONS = (250, 500, 1000, 2000)


def estimate_errors(rng, horizons, prec=4096):
    gmpy2.get_context().precision = prec
    d = (mpfr("1.5"), mpfr("0.5"))
    x = [mpfr(0), mpfr(0)]
    v11 = v12 = v22 = mpfr(0)
    s11 = s12 = s21 = s22 = mpfr(0)
    out = {}
    n_max = max(horizons)
    noise = rng.standard_normal((n_max, 2))
    for t in range(n_max):
        nxt = [d[0] * x[0] + mpfr(float(noise[t, 0])), d[1] * x[1] + mpfr(float(noise[t, 1]))]
        v11 += x[0] * x[0]
        v12 += x[0] * x[1]
        v22 += x[1] * x[1]
        s11 += nxt[0] * x[0]
        s12 += nxt[0] * x[1]
        s21 += nxt[1] * x[0]
        s22 += nxt[1] * x[1]
        x = nxt
        n = t + 1
        if n in horizons:
            det = v11 * v22 - v12 * v12
            # D_hat = S V^-1 with V^-1 = [[v22, -v12], [-v12, v11]] / det
            e = np.array(
                [
                    [float((s11 * v22 - s12 * v12) / det) - 1.5, float((s12 * v11 - s11 * v12) / det)],
                    [float((s21 * v22 - s22 * v12) / det), float((s22 * v11 - s21 * v12) / det) - 0.5],
                ]
            )
            out[n] = float(np.linalg.norm(e, 2))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--master", type=int, default=20240601)
    ap.add_argument("--bootstrap", type=int, default=5000)
    args = ap.parse_args()
    ss = np.random.SeedSequence(args.master)
    errors = {n: [] for n in HORIZONS}
    for child in ss.spawn(args.seeds):
        res = estimate_errors(np.random.default_rng(child), HORIZONS)
        for n in HORIZONS:
            errors[n].append(res[n])
    boot = np.random.default_rng(args.master + 1)
    print("n,median,p95,median_boot_p99")
    for n in HORIZONS:
        e = np.array(errors[n])
        idx = boot.integers(0, len(e), size=(args.bootstrap, len(e)))
        meds = np.median(e[idx], axis=1)
        print(f"{n},{np.median(e):.5f},{np.quantile(e, 0.95):.5f},{np.quantile(meds, 0.99):.5f}")


if __name__ == "__main__":
    main()
