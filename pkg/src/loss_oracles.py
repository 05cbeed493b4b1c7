"""
Scalar-loop reference implementations of the training losses.

These are deliberately written as explicit loops over plain floats, straight
from the loss definitions, and serve as independent references for the
vectorized versions in ``src.losses``. Inputs are nested sequences or numpy
arrays in the segmented layout (N, C, L') for a single epoch.
"""

import math
from typing import Sequence

import numpy as np


def cosine_similarity_oracle(r: Sequence[float], x: Sequence[float]) -> float:
    dot = 0.0
    rr = 0.0
    xx = 0.0
    for t in range(len(r)):
        dot += float(r[t]) * float(x[t])
        rr += float(r[t]) * float(r[t])
        xx += float(x[t]) * float(x[t])
    if rr == 0.0 or xx == 0.0:
        return 0.0
    return dot / (math.sqrt(rr) * math.sqrt(xx))


def cosine_recon_oracle(recon, target, visible) -> float:
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    n_patch, channels, _ = recon.shape
    channel_losses = []
    for c in range(channels):
        total = 0.0
        count = 0
        for n in range(n_patch):
            if visible[n, c]:
                total += cosine_similarity_oracle(recon[n, c], target[n, c])
                count += 1
        if count > 0:
            channel_losses.append(1.0 - total / count)
    if not channel_losses:
        return 0.0
    return sum(channel_losses) / len(channel_losses)


def mse_recon_oracle(recon, target, visible) -> float:
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    n_patch, channels, l_prime = recon.shape
    channel_losses = []
    for c in range(channels):
        total = 0.0
        count = 0
        for n in range(n_patch):
            if not visible[n, c]:
                continue
            for t in range(l_prime):
                diff = float(target[n, c, t]) - float(recon[n, c, t])
                total += diff * diff
                count += 1
        if count > 0:
            channel_losses.append(total / count)
    if not channel_losses:
        return 0.0
    return sum(channel_losses) / len(channel_losses)


def euclidean_oracle(x: Sequence[float], y: Sequence[float]) -> float:
    total = 0.0
    for k in range(len(x)):
        diff = float(x[k]) - float(y[k])
        total += diff * diff
    return math.sqrt(total)


def iccl_oracle(recon_a, recon_b, margin_alpha: float = 1.0) -> float:
    recon_a = np.asarray(recon_a, dtype=np.float64)
    recon_b = np.asarray(recon_b, dtype=np.float64)
    n_patch = recon_a.shape[0]
    anchors = [recon_a[i].ravel().tolist() for i in range(n_patch)]
    positives = [recon_b[i].ravel().tolist() for i in range(n_patch)]
    total = 0.0
    for i in range(n_patch):
        positive_distance = euclidean_oracle(anchors[i], positives[i])
        negative_sum = 0.0
        for j in range(n_patch):
            if j != i:
                negative_sum += euclidean_oracle(anchors[i], anchors[j])
        term = positive_distance - negative_sum / (n_patch - 1) + margin_alpha
        total += max(0.0, term)
    return total / n_patch


def weighted_ce_oracle(probabilities, labels, weights, eps: float = 1e-12) -> float:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n, k = probabilities.shape
    total = 0.0
    for i in range(n):
        for j in range(k):
            p = min(max(float(probabilities[i, j]), eps), 1.0)
            total += float(weights[j]) * float(labels[i, j]) * math.log(p)
    return -total / n


def weighted_bce_oracle(probabilities, labels, positive_weight: float = 1.0, eps: float = 1e-12) -> float:
    n = len(probabilities)
    total = 0.0
    for i in range(n):
        p = min(max(float(probabilities[i]), eps), 1.0 - eps)
        y = float(labels[i])
        total += positive_weight * y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
    return -total / n


def mse_oracle(pred: Sequence[float], true: Sequence[float]) -> float:
    total = 0.0
    for a, b in zip(pred, true):
        total += (float(a) - float(b)) ** 2
    return total / len(pred)
