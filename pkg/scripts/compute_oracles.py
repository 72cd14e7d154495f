"""Recompute the frozen reference constants used by the tests at 40 digits.

Needs the ``oracles`` extra (mpmath).  Prints one ``NAME = value`` line each.
"""

import mpmath as mp

mp.mp.dps = 40


def gaussian_mass(r):
    """P(|Z| <= 2r) for a standard normal Z."""
    return mp.erf(2 * r / mp.sqrt(2))


def asymmetric_quartic_minimum():
    f = lambda x: x**4 - 2 * x**2 + mp.mpf("0.3") * x
    df = lambda x: 4 * x**3 - 4 * x + mp.mpf("0.3")
    xg = mp.findroot(df, -1.0)
    xl = mp.findroot(df, 0.96)
    return xg, f(xg), xl, f(xl)


if __name__ == "__main__":
    print("Q_HALF =", gaussian_mass(mp.mpf("0.5")))
    print("Q_ONE =", gaussian_mass(mp.mpf(1)))
    xg, fg, xl, fl = asymmetric_quartic_minimum()
    print("ASYM_ARGMIN =", xg)
    print("ASYM_MIN =", fg)
    print("ASYM_LOCAL_ARGMIN =", xl)
    print("ASYM_LOCAL_MIN =", fl)
