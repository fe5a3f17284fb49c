import numpy as np


def adam_step(params, t: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update of every parameter, then zero its grad.

    ``t`` is the 1-based step index. Moments live on the parameters
    themselves (``adam_m``/``adam_v``) and values are updated in place.
    """
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1 (got {t}); bias correction is undefined at 0")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(p.adam_v / bc2) + eps
        p.value -= (lr / bc1) * p.adam_m / denom
        p.grad[...] = 0
    return params
