"""Independent reference computations shared by the test suite.

These deliberately avoid the library's own code paths: finite differences for
gradients, dense eigensolvers for smoothness, explicit loops for losses, and
plain gradient descent for trajectories.
"""

import numpy as np


def central_difference_gradient(loss, w, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    g = np.zeros_like(w)
    for i in range(w.shape[0]):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (loss(w + e) - loss(w - e)) / (2.0 * h)
    return g


def relative_error(approx, exact):
    denom = max(float(np.linalg.norm(exact)), 1e-30)
    return float(np.linalg.norm(approx - exact)) / denom


def ridge_loss_loops(A, b, alpha, w):
    """Ridge loss evaluated with explicit Python loops."""
    total = 0.0
    for i in range(A.shape[0]):
        r = -b[i]
        for j in range(A.shape[1]):
            r += A[i][j] * w[j]
        total += 0.5 * r * r
    for j in range(A.shape[1]):
        total += 0.25 * alpha * w[j] * w[j]
    return total


def gradient_descent(grad, w0, gamma, steps):
    """Plain gradient descent trajectory, including the start point."""
    w = w0.copy()
    path = [w.copy()]
    for _ in range(steps):
        w = w - gamma * grad(w)
        path.append(w.copy())
    return path
