"""Independent reference computations used to freeze expected test values.

Run directly: ``python tests/oracles/precompute.py``. Nothing here imports
the package under test.
"""
import math
from fractions import Fraction

import mpmath as mp

mp.mp.dps = 40


def rdp_eps_bruteforce(sigma, rounds, delta):
    """min over alpha > 1 of rounds*alpha/(2 sigma^2) + ln(1/delta)/(alpha-1)."""
    a = mp.mpf(rounds) / (2 * mp.mpf(sigma) ** 2)
    log_inv_delta = -mp.log(mp.mpf(delta))
    f = lambda alpha: a * alpha + log_inv_delta / (alpha - 1)
    # dense scan then local refinement with mpmath's root finder on f'
    best = min((f(mp.mpf(1) + mp.mpf(k) / 10000), k) for k in range(1, 640000))
    x0 = mp.mpf(1) + mp.mpf(best[1]) / 10000
    root = mp.findroot(lambda x: mp.diff(f, x), x0)
    return f(root), root


def hedges_g(d):
    n = len(d)
    mean = sum(Fraction(x) for x in d) / n
    var = sum((Fraction(x) - mean) ** 2 for x in d) / (n - 1)
    j = 1 - Fraction(3, 4 * (n - 1) - 1)
    return float(j * mean) / math.sqrt(var)


def savgol_window5_order2():
    # least squares fit of a quadratic to 5 points, value at centre
    xs = [-2, -1, 0, 1, 2]
    A = mp.matrix([[x**p for p in range(3)] for x in xs])
    H = (A.T * A) ** -1 * A.T
    return [H[0, i] * 35 for i in range(5)]


def blur_center(sigma=1.0):
    r = math.ceil(3 * sigma)
    w = [math.exp(-(k * k) / (2 * sigma * sigma)) for k in range(-r, r + 1)]
    s = sum(w)
    return (w[r] / s) ** 2


if __name__ == "__main__":
    for sigma, rounds, delta in [(0.6, 100, 1e-5), (0.6, 30, 1e-5), (1.0, 1, math.exp(-10))]:
        eps, alpha = rdp_eps_bruteforce(sigma, rounds, delta)
        print(f"rdp sigma={sigma} R={rounds} delta={delta:g}: eps={mp.nstr(eps, 17)} alpha={mp.nstr(alpha, 12)}")
    print("hedges g (0,1,2,1):", repr(hedges_g([0, 1, 2, 1])))
    sizes = [6100, 4900, 4300, 3500, 3000]
    means = [Fraction(944, 1000), Fraction(939, 1000), Fraction(935, 1000), Fraction(929, 1000), Fraction(928, 1000)]
    print("weighted global:", float(sum(n * m for n, m in zip(sizes, means)) / sum(sizes)))
    print("savgol 5/2 *35:", [mp.nstr(v, 12) for v in savgol_window5_order2()])
    print("blur centre sigma=1:", repr(blur_center()))
