"""Univariate quadrature rules: points, weights, and convergence behavior.

Builds each rule kind on [-1, 1], integrates exp, and tabulates how fast
the error shrinks as points are added.  Gauss-Legendre is exact for
polynomials up to degree 2N-1, which the last section checks directly.
"""

import numpy as np

from picirc.quadrature import integrate, make_rule

exact = np.e - 1.0 / np.e
print("target: integral of exp over [-1, 1] =", exact)

print("\nrule overview at N = 8")
for kind in ("midpoint", "trapezoidal", "simpson", "gauss_legendre"):
    n = 9 if kind == "simpson" else 8
    rule = make_rule(kind, n, -1.0, 1.0)
    approx = integrate(rule, np.exp)
    print(f"  {kind:15s} points {len(rule.points):2d}  weight sum {rule.weights.sum():.6f}  "
          f"error {abs(approx - exact):.3e}")

print("\nerror vs panel count (panels = points for midpoint, points-1 otherwise)")
print(f"  {'panels':>8s} {'midpoint':>12s} {'trapezoidal':>12s} {'simpson':>12s} {'gauss':>12s}")
for panels in (4, 8, 16, 32, 64):
    errs = []
    for kind in ("midpoint", "trapezoidal", "simpson", "gauss_legendre"):
        pts = panels if kind == "midpoint" else panels + 1
        errs.append(abs(integrate(make_rule(kind, pts, -1.0, 1.0), np.exp) - exact))
    print(f"  {panels:8d} " + " ".join(f"{e:12.3e}" for e in errs))

print("\nhalving the panel width divides the error by ~4 (midpoint, trapezoid)")
print("and by ~16 (simpson):")
for kind in ("midpoint", "trapezoidal", "simpson"):
    def err(panels, kind=kind):
        pts = panels if kind == "midpoint" else panels + 1
        return abs(integrate(make_rule(kind, pts, -1.0, 1.0), np.exp) - exact)
    print(f"  {kind:12s} ratio err(16)/err(32) = {err(16) / err(32):.3f}")

print("\ngauss-legendre exactness: degree 2N-1 polynomial, N = 5 points")
rng = np.random.default_rng(0)
coeffs = rng.uniform(-1, 1, 10)
poly = np.polynomial.Polynomial(coeffs)
truth = poly.integ()(1.0) - poly.integ()(-1.0)
approx = integrate(make_rule("gauss_legendre", 5, -1.0, 1.0), poly)
print(f"  exact {truth:+.12f}  quadrature {approx:+.12f}  diff {abs(truth - approx):.2e}")
