"""Adam with per-group learning rates and moments that follow primitive reindexing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class Adam:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-15
    state: dict[str, Moments] = field(default_factory=dict)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """Bias-corrected Adam update of ``param`` in place."""
        if param.shape != grad.shape:
            raise DimensionMismatchError(f"{name}: parameter {param.shape} vs gradient {grad.shape}")
        st = self.state.get(name)
        if st is None or st.m.shape != param.shape:
            st = self.state[name] = Moments(np.zeros_like(param), np.zeros_like(param), 0 if st is None else st.step)
        b1, b2 = self.betas
        st.step += 1
        st.m *= b1
        st.m += (1.0 - b1) * grad
        st.v *= b2
        st.v += (1.0 - b2) * grad * grad
        m_hat = st.m / (1.0 - b1 ** st.step)
        v_hat = st.v / (1.0 - b2 ** st.step)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reindex(self, names, rows: np.ndarray, is_new: np.ndarray) -> None:
        """Gather moments of per-primitive groups; rows flagged new start from zero."""
        for name in names:
            st = self.state.get(name)
            if st is None:
                continue
            keep = ~is_new[:, None] if st.m.ndim == 2 else ~is_new
            st.m = np.where(keep, st.m[rows], 0.0)
            st.v = np.where(keep, st.v[rows], 0.0)

    def reset(self, name: str) -> None:
        st = self.state.get(name)
        if st is not None:
            st.m[...] = 0.0
            st.v[...] = 0.0


def adam_step(param: np.ndarray, grad: np.ndarray, state: Moments, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-15) -> np.ndarray:
    """Functional single Adam step; returns the updated parameter and advances ``state``."""
    opt = Adam(betas, eps, {"p": state})
    out = np.array(param, dtype=np.float64, copy=True)
    opt.step("p", out, np.asarray(grad, dtype=np.float64), lr)
    return out
