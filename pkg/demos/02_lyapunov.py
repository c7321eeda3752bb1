"""Finite-horizon Lyapunov exponents against their closed forms.

Chaotic families are where small deviations in a trajectory translate into
large errors in the recovered quantity. The tent map stretches by exactly r
at every step, so lambda_H = log r; the logistic map at 1 < r < 3 settles
on a fixed point with multiplier 2 - r; the sinusoid is not chaotic at all.

    python3 demos/02_lyapunov.py
"""
from fractions import Fraction
import math

from quantdrift import FamilyConfig
from quantdrift.systems import lyapunov_closed_form, lyapunov_finite

tent = FamilyConfig("tent")
for r in (0.5, 1.2, 1.7, 1.99):
    lam = lyapunov_finite(tent, r, 0.3)
    print(f"tent      r={r:<5} lambda_H={lam:+.12f}  log r={math.log(r):+.12f}")

# at r = 2 floats collapse every orbit onto the fold; exact arithmetic does not
print(f"tent      r=2 (exact, x0=3/10) lambda_H={lyapunov_finite(tent, Fraction(2), Fraction(3, 10)):+.12f}")

logistic = FamilyConfig("logistic")
for r in (1.5, 2.5, 2.9):
    lam = lyapunov_finite(logistic, r, 0.25, horizon=10000)
    print(f"logistic  r={r:<5} lambda_H={lam:+.6f}  closed form={lyapunov_closed_form(logistic, r):+.6f}")

print(f"sinusoid  lambda_H={lyapunov_finite(FamilyConfig('sinusoid'), 64.0)}")
