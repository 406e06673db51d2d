"""Adam with bias correction, keyed by parameter name."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Tensor


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; training cannot continue."""


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(params: dict[str, Tensor], moments: dict[str, Moments], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update of every trainable tensor in ``params``.

    Frozen tensors and tensors without a gradient are skipped.  Moments are
    created on first use, so a new parameter starts with a fresh bias correction.
    """
    b1, b2 = betas
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient of {name!r} {p.shape} has {bad} non-finite entries")
        st = moments.get(name)
        if st is None or st.m.shape != g.shape:
            st = moments[name] = Moments(np.zeros_like(g), np.zeros_like(g))
        st.step += 1
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * (g * g)
        mhat = st.m / (1.0 - b1 ** st.step)
        vhat = st.v / (1.0 - b2 ** st.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class Adam:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    moments: dict[str, Moments] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        adam_step(params, self.moments, self.lr, self.betas, self.eps)

    def drop(self, prefix: str) -> None:
        """Forget moments for every parameter whose name starts with ``prefix``."""
        for name in [n for n in self.moments if n.startswith(prefix)]:
            del self.moments[name]

    @staticmethod
    def zero_grad(params: dict[str, Tensor]) -> None:
        for p in params.values():
            p.grad = None
