"""Independent oracles for the frozen expected values used in the Rust tests.

Run with `python3 derive_values.py`. Data generation reimplements the
documented xorshift64* recurrence so the Rust tests can rebuild the exact same
inputs; every solve here goes through numpy's LU-based `linalg.solve`, not a
Cholesky factorisation.
"""
import math
import numpy as np

MASK = (1 << 64) - 1
SEED_MIX = 0x9E3779B97F4A7C15
OUT_MUL = 0x2545F4914F6CDD1D


class XorShift64Star:
    def __init__(self, seed):
        s = (seed ^ SEED_MIX) & MASK
        self.state = s if s != 0 else SEED_MIX

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK
        x ^= x >> 27
        self.state = x
        return (x * OUT_MUL) & MASK

    def next_f64(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def ridge_instance():
    rng = XorShift64Star(2024)
    rows = []
    for _ in range(200):
        x = [2.0 * rng.next_f64() - 1.0 for _ in range(3)]
        noise = 0.1 * (rng.next_f64() - 0.5)
        y = 1.5 + 0.8 * x[0] - 2.0 * x[1] + 0.3 * x[2] + noise
        rows.append(x + [y])
    a = np.array(rows)
    X = np.column_stack([np.ones(len(a)), a[:, :3]])
    y = a[:, 3]
    D = np.diag([0.0, 1.0, 1.0, 1.0])
    beta = np.linalg.solve(X.T @ X + 0.1 * D, X.T @ y)
    return beta


def tune_instance():
    rng = XorShift64Star(99)
    rows = []
    for _ in range(12):
        x = [2.0 * rng.next_f64() - 1.0 for _ in range(2)]
        noise = 0.05 * (rng.next_f64() - 0.5)
        rows.append(x + [2.0 - x[0] + 3.0 * x[1] + noise])
    a = np.array(rows)
    X = np.column_stack([np.ones(len(a)), a[:, :2]])
    y = a[:, 2]
    base = np.array([0.5, 1.0, -1.0])
    lam, tau = 0.2, 1.0
    D = np.diag([0.0, 1.0, 1.0])
    A = X.T @ X + lam * D + tau * np.eye(3)
    return np.linalg.solve(A, X.T @ y + tau * base)


def page_hinkley_first_alarm(errors, delta, lam):
    n, mean, m, mn = 0, 0.0, 0.0, 0.0
    for seq, e in enumerate(errors, start=1):
        n += 1
        mean = mean + (e - mean) / n
        m = m + ((e - mean) - delta)
        mn = min(mn, m)
        if m - mn > lam:
            return seq
    return None


if __name__ == "__main__":
    print("ridge 200x3 lambda=0.1 [intercept, b1, b2, b3]:")
    for v in ridge_instance():
        print("   ", repr(float(v)))
    print("tune tau=1 lambda=0.2 [intercept, b1, b2]:")
    for v in tune_instance():
        print("   ", repr(float(v)))
    errs = [0.0] * 100 + [1.0] * 100
    print("PH alarm seq (100 zeros then ones, delta=0.05, lambda=5):",
          page_hinkley_first_alarm(errs, 0.05, 5.0))
    print("metrics y=[3,4] yhat=[0,0]: rmse", repr(math.sqrt((9 + 16) / 2)), "mae", (3 + 4) / 2)
