"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def fused_select(Q, K, bounds, scale):
    if Q.shape[1] != K.shape[1]:
        raise ValueError("Q and K feature dimensions differ")
    if len(bounds) < 2 or bounds[-1] != K.shape[0]:
        raise ValueError("segments must cover all key rows")
    logits = (Q @ K.T) * scale
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    col = logits.mean(axis=0)
    strengths = np.add.reduceat(col, bounds[:-1]) / np.diff(bounds)
    return int(np.argmax(strengths))


def logit_abs_mean(Q, K, scale):
    if Q.shape[1] != K.shape[1]:
        raise ValueError("Q and K feature dimensions differ")
    return float(np.abs((Q @ K.T) * scale).mean())
