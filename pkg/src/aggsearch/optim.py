"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0


class Adam:
    """Moments are zero at step 0; bias correction uses the shared counter.

    Weight decay is applied directly to the parameter (decoupled from the
    adaptive step). Non-finite gradients abort, naming the parameter.
    """

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name in params:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            if c.weight_decay:
                p -= c.lr * c.weight_decay * p
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"m/{name}"] = arr
        for name, arr in self.v.items():
            out[f"v/{name}"] = arr
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            target = self.m if kind == "m" else self.v
            target[name] = np.array(arr, dtype=np.float64)
