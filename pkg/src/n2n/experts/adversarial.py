"""Gradient-norm balancing weight for an adversarial term."""
import numpy as np


def adaptive_gan_weight(grad_rec, grad_gan, delta=1e-6):
    """``|grad_rec| / (|grad_gan| + delta)`` for gradients w.r.t. the decoder's last layer."""
    grad_rec = np.asarray(grad_rec, dtype=np.float64)
    grad_gan = np.asarray(grad_gan, dtype=np.float64)
    if grad_rec.shape != grad_gan.shape:
        raise ValueError(f"gradient shapes differ: {grad_rec.shape} vs {grad_gan.shape}")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    num = np.linalg.norm(grad_rec)
    if num == 0.0:
        return 0.0
    den = np.linalg.norm(grad_gan) + delta
    if den == 0.0:
        raise ZeroDivisionError("adversarial gradient is zero and delta is 0")
    return float(num / den)
