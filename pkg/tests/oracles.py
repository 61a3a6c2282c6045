"""Scalar reference implementations written straight from the loss formulas.

Plain Python and ``math`` only, one term at a time, so nothing is shared
with the vectorised code under test.
"""
import math


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = math.fsum(e)
    return [v / s for v in e]


def top(y):
    best = 0
    for c in range(1, len(y)):
        if y[c] > y[best]:
            best = c
    return best


def weak_density(y, eps):
    C = len(y)
    k = top(y)
    return [eps if c == k else 1.0 - eps / (C - 1) for c in range(C)]


def wcse(y, eps):
    d = weak_density(y, eps)
    return -math.fsum(math.exp(d[c]) * math.sqrt(y[c]) * math.log(y[c]) for c in range(len(y)))


def bcse(y, eps):
    d = weak_density(y, eps)
    total = []
    for c in range(len(y)):
        b = y[c] * (1.0 - d[c]) + (1.0 - y[c]) * d[c]
        total.append(math.exp(b) * y[c] * math.log(y[c]))
    return -math.fsum(total)


def lsd(y):
    # literal double sum over the off-class mass
    total = []
    for c in range(len(y)):
        rest = math.fsum(y[i] for i in range(len(y)) if i != c)
        total.append(y[c] * math.log(rest))
    return math.fsum(total)


def lscd(y, alpha, beta, tau, eps):
    return alpha * wcse(y, eps) + beta * bcse(y, eps) + tau * lsd(y)


def entropy(y):
    return -math.fsum(p * math.log(p) for p in y)


def hard_pl_ce(y):
    return -math.log(y[top(y)])


def confidence(y):
    return -max(y)


def central_difference(f, z, h=1e-5):
    """Gradient of scalar ``f`` at list ``z`` by central differences."""
    grad = []
    for j in range(len(z)):
        up = list(z)
        dn = list(z)
        up[j] += h
        dn[j] -= h
        grad.append((f(up) - f(dn)) / (2 * h))
    return grad
