"""Brute-force binomial-lattice dynamic program for 1-D impulse control.

Independent of the package: plain numpy, original time, recombining
binomial tree for dX = sigma dW with spacing h = sigma sqrt(dt).  At every
lattice time the controller may shift the state by any multiple of h that
keeps it inside the box; values beyond the box are held constant (terminal
cost zero, so the growth extension is constant).
"""
import numpy as np


def lattice_value(f, cost, lo, hi, horizon, sigma, n_steps, keep_times=()):
    dt = horizon / n_steps
    h = sigma * np.sqrt(dt)
    m = int(np.floor((hi - lo) / h + 1e-9))
    x = lo + np.arange(m + 1) * h
    shift = x[None, :] - x[:, None]  # destination minus origin
    B = cost(shift)
    np.fill_diagonal(B, np.inf)
    V = np.zeros_like(x)
    fx = f(x)
    kept = {}
    keep_steps = {int(round(t / dt)): t for t in keep_times}
    for k in range(n_steps - 1, -1, -1):
        up = np.append(V[1:], V[-1])
        down = np.insert(V[:-1], 0, V[0])
        cont = fx * dt + 0.5 * (up + down)
        jump = np.min(cont[None, :] + B, axis=1)
        V = np.minimum(cont, jump)
        if k in keep_steps:
            kept[keep_steps[k]] = (V.copy(), jump - cont <= 0.0)
    return x, V, kept


def controlled_example(n_steps, keep_times=()):
    return lattice_value(
        f=lambda x: x**2,
        cost=lambda xi: 0.5 + 0.1 * np.abs(xi),
        lo=-3.0,
        hi=3.0,
        horizon=1.0,
        sigma=1.0,
        n_steps=n_steps,
        keep_times=keep_times,
    )
