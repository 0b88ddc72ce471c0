"""Independent reference computations used by the tests.

These deliberately avoid the package's recurrences: they evaluate the
textbook closed forms in extended precision with mpmath.
"""
import mpmath as mp


def legendre_rodrigues(n, m, x, dps=60):
    """``P_n^m(x) = (-1)^m (1-x^2)^{m/2} / (2^n n!) d^{n+m}/dx^{n+m} (x^2-1)^n``."""
    with mp.workdps(dps):
        x = mp.mpf(x)
        total = mp.mpf(0)
        for k in range(n + 1):
            p = 2 * k - n - m
            if p < 0:
                continue
            coef = mp.binomial(n, k) * (-1) ** (n - k) * mp.factorial(2 * k) / mp.factorial(p)
            total += coef * x ** p
        val = (-1) ** m * (1 - x * x) ** (mp.mpf(m) / 2) * total / (2 ** n * mp.factorial(n))
        return val


def legendre_normalized(n, m, x, dps=60):
    with mp.workdps(dps):
        norm = mp.sqrt((2 * n + 1) / (4 * mp.pi) * mp.factorial(n - m) / mp.factorial(n + m))
        return norm * legendre_rodrigues(n, m, x, dps)


def sph_harm_direct(n, m, theta, phi, dps=40):
    """Term-by-term ``Y_n^m`` from the factorial normalization, negative m by conjugate symmetry."""
    with mp.workdps(dps):
        am = abs(m)
        y = legendre_normalized(n, am, mp.cos(theta), dps) * mp.expj(am * mp.mpf(phi))
        if m < 0:
            y = (-1) ** am * mp.conj(y)
        return complex(y)
