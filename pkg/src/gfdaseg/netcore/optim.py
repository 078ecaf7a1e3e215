from __future__ import annotations

from collections.abc import Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction; state is kept per parameter name."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place for every name present in ``grads``."""
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradientError(
                f"non-finite gradient at step {self.t + 1} for: {', '.join(sorted(bad))}"
            )
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


def ema_update(slow, fast, alpha: float):
    """``alpha * slow + (1 - alpha) * fast`` for arrays or name->array dicts.

    Dicts are updated in place (and returned); every key of ``slow`` must be
    present in ``fast`` with the same shape.
    """
    if isinstance(slow, Mapping):
        for k in slow:
            slow[k] = ema_update(slow[k], fast[k], alpha)
        return slow
    slow, fast = np.asarray(slow), np.asarray(fast)
    if slow.shape != fast.shape:
        raise ValueError(f"EMA shape mismatch: {slow.shape} vs {fast.shape}")
    return alpha * slow + (1.0 - alpha) * fast
