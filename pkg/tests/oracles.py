"""Brute-force reference implementations, written independently of the library."""

import math

import numpy as np


def conv2d_direct(x, w, b=None, stride=1, pad=0):
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[f])
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - pad
                                s = j * stride + v - pad
                                if 0 <= r < H and 0 <= s < W:
                                    acc += float(x[n, c, r, s]) * float(w[f, c, u, v])
                    out[n, f, i, j] = acc
    return out


def batchnorm_two_pass(x, gamma, beta, eps):
    """Training-mode batch norm: first pass for the mean, second for the variance."""
    B, C, H, W = x.shape
    out = np.empty(x.shape)
    means, variances = [], []
    for c in range(C):
        vals = [float(v) for v in x[:, c].ravel()]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        means.append(mean)
        variances.append(var)
        out[:, c] = (x[:, c] - mean) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out, np.array(means), np.array(variances)


def l1_loop(x):
    total = 0.0
    for v in np.asarray(x).ravel():
        total += abs(float(v))
    return total


def class_activation_loop(H, N):
    """Per-sample (A1, A2): summed |.| of each channel half over its element count."""
    out = []
    for h in H:
        halves = []
        for lo in (0, N):
            s = 0.0
            count = 0
            for c in range(lo, lo + N):
                for v in h[c].ravel():
                    s += abs(float(v))
                    count += 1
            halves.append(s / count)
        out.append(tuple(halves))
    return out


def recount_accuracy(latents, labels, N):
    correct = 0
    for (a1, a2), lab in zip(class_activation_loop(latents, N), labels):
        pred = 2 if a2 > a1 else 1
        correct += pred == lab
    return correct / len(labels)


def activation_loss_loop(a1, a2, labels):
    total = 0.0
    for u, v, lab in zip(a1, a2, labels):
        total += abs(v - lab + 1) + abs(u + lab - 2)
    return total
