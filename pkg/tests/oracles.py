"""Independent reference computations the tests compare against.

Nothing here imports the code under test except plain data types.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------- mel

def mel_htk(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def inv_mel_htk(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def filter_containing(freq: float, n_mels: int, fmin: float, fmax: float) -> int:
    """Mel band with the largest continuous triangular response at ``freq``."""
    edges = inv_mel_htk(np.linspace(mel_htk(fmin), mel_htk(fmax), n_mels + 2))
    best, best_r = -1, -1.0
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        if lo <= freq <= c:
            r = (freq - lo) / (c - lo)
        elif c < freq <= hi:
            r = (hi - freq) / (hi - c)
        else:
            r = 0.0
        if r > best_r:
            best, best_r = m, r
    return best


# ---------------------------------------------------------------- DTW

def brute_force_dtw(c: np.ndarray) -> float:
    """Minimum path cost over every monotone (1,0)/(0,1)/(1,1) path, by explicit enumeration."""
    t_a, t_b = c.shape
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += c[i, j]
        if acc >= best:
            return
        if (i, j) == (t_a - 1, t_b - 1):
            best = acc
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < t_a and j + dj < t_b:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def enumerate_paths(t_a: int, t_b: int):
    """All monotone paths as lists of (i, j)."""
    out = []

    def walk(path):
        i, j = path[-1]
        if (i, j) == (t_a - 1, t_b - 1):
            out.append(list(path))
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < t_a and j + dj < t_b:
                path.append((i + di, j + dj))
                walk(path)
                path.pop()

    walk([(0, 0)])
    return out


def _squared_distance(u, v) -> float:
    # plain left fold of d * d; sum() is compensated on Python >= 3.12 and ** may not square exactly
    acc = 0.0
    for x, y in zip(u, v):
        d = float(x) - float(y)
        acc += d * d
    return acc


def euclid_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([[math.sqrt(_squared_distance(a[:, i], b[:, j]))
                      for j in range(b.shape[1])] for i in range(a.shape[1])])


# ---------------------------------------------------------------- warps

def piecewise_linear(knots, t: float) -> float:
    for (s0, g0), (s1, g1) in zip(knots, knots[1:]):
        if s0 <= t <= s1:
            return g0 + (g1 - g0) * (t - s0) / (s1 - s0)
    return knots[-1][1]


# ---------------------------------------------------------------- Fréchet

def frechet_diagonal(mu_a, var_a, mu_b, var_b) -> float:
    """Closed form for diagonal covariances, coordinate by coordinate."""
    total = 0.0
    for ma, va, mb, vb in zip(mu_a, var_a, mu_b, var_b):
        total += (ma - mb) ** 2 + va + vb - 2.0 * math.sqrt(va * vb)
    return total


# ---------------------------------------------------------------- gradients

def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        gf[k] = (up - down) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------- parameter counts

def conv_params(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return k * k * c_in * c_out + (c_out if bias else 0)


def conv1d_params(c_in: int, c_out: int, k: int) -> int:
    return k * c_in * c_out + c_out


def dense_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def thg_param_formula(w: int, audio_dim: int = 32, pose_dim: int = 16, hidden: int = 64, n_mels: int = 80) -> int:
    c = audio_dim + pose_dim
    audio = conv1d_params(n_mels, hidden, 3) + conv1d_params(hidden, hidden, 3) + dense_params(hidden, audio_dim)
    pose = dense_params(3, pose_dim) + dense_params(pose_dim, pose_dim)
    image = conv_params(1, w, 3) + conv_params(w, 2 * w, 4) + conv_params(2 * w, 4 * w, 4) + conv_params(4 * w, 4 * w, 4)
    gen = (conv_params(4 * w + c, 4 * w, 3) + conv_params(4 * w, 4 * w, 4) + conv_params(8 * w + c, 2 * w, 3)
           + conv_params(2 * w, 2 * w, 4) + conv_params(4 * w + c, w, 3) + conv_params(w, w, 4)
           + conv_params(2 * w + c, w, 3) + conv_params(w, 1, 3))
    return audio + pose + image + gen


def combinations_count(n: int, k: int) -> int:
    return len(list(itertools.combinations(range(n), k)))
