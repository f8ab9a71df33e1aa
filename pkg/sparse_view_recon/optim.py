"""
Adam over named parameter groups, plus a surfel-cloud wrapper that folds the
rotation group into the tangent frames after every step.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from sparse_view_recon.exceptions import DomainError
from sparse_view_recon.splat_render import MIN_SCALE, SurfelCloud, SurfelGradients

logger = logging.getLogger(__name__)

# Valid range per parameter group; applied after every update
CLAMP_RANGES = {
    "opacities": (0.0, 1.0),
    "colors": (0.0, 1.0),
    "scales": (MIN_SCALE, np.inf),
}

DEFAULT_LEARNING_RATES = {
    "positions": 2e-3,
    "rotations": 5e-3,
    "scales": 1e-3,
    "opacities": 2e-2,
    "colors": 1e-2,
}


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    # rows skipped because of non-finite gradients, cumulative
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
                   {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()})

    def extend(self, count: int) -> "AdamState":
        """Append zero moments for `count` new rows in every group."""
        def grow(arr):
            return np.concatenate([arr, np.zeros((count,) + arr.shape[1:])])
        return AdamState({k: grow(a) for k, a in self.m.items()}, {k: grow(a) for k, a in self.v.items()},
                         self.step, self.skipped)


def _row_finite(arr: np.ndarray) -> np.ndarray:
    return np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: Union[float, Mapping[str, float]], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One Adam update. Rows (primitives) whose gradient is non-finite in any group keep
    their parameters and moments; they are counted in `state.skipped`.
    """
    for name, value in params.items():
        if name not in grads:
            raise DomainError(f"Missing gradient for parameter group '{name}'")
        if name not in state.m or state.m[name].shape != np.shape(value):
            raise DomainError(f"Optimizer state does not match parameter group '{name}'")
        if np.shape(grads[name]) != np.shape(value):
            raise DomainError(f"Gradient shape {np.shape(grads[name])} does not match '{name}' {np.shape(value)}")

    rows = {len(np.atleast_1d(v)) for v in params.values()}
    shared_rows = len(rows) == 1
    if shared_rows:
        ok = np.ones(rows.pop(), dtype=bool)
        for name in params:
            ok &= _row_finite(np.atleast_1d(grads[name]))
        bad = int((~ok).sum())
        if bad:
            logger.warning("Skipping %d primitive(s) with non-finite gradients", bad)

    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    skipped = 0
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        row_ok = ok if shared_rows else _row_finite(np.atleast_1d(g))
        if not shared_rows:
            skipped += int((~row_ok).sum())
        mask = row_ok.reshape((-1,) + (1,) * (value.ndim - 1)) if value.ndim else row_ok[0]
        g = np.where(mask, g, 0.0)

        m = np.where(mask, beta1 * state.m[name] + (1 - beta1) * g, state.m[name])
        v = np.where(mask, beta2 * state.v[name] + (1 - beta2) * g * g, state.v[name])
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        rate = lr[name] if isinstance(lr, Mapping) else lr
        updated = np.where(mask, value - rate * m_hat / (np.sqrt(v_hat) + eps), value)
        if name in CLAMP_RANGES:
            lo, hi = CLAMP_RANGES[name]
            updated = np.clip(updated, lo, hi)
        new_params[name], new_m[name], new_v[name] = updated, m, v

    if shared_rows:
        skipped = bad
    return new_params, AdamState(new_m, new_v, t, state.skipped + skipped)


@dataclass
class SurfelOptimizer:
    """Adam on a SurfelCloud. Rotations are optimized as left-applied rotation vectors reset to zero each step."""
    learning_rates: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    state: AdamState = None

    def _params(self, cloud: SurfelCloud) -> Dict[str, np.ndarray]:
        return {
            "positions": cloud.positions,
            "rotations": np.zeros((len(cloud), 3)),
            "scales": cloud.scales,
            "opacities": cloud.opacities,
            "colors": cloud.colors,
        }

    def step(self, cloud: SurfelCloud, grads: SurfelGradients) -> SurfelCloud:
        params = self._params(cloud)
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        new, self.state = adam_step(params, grads.as_dict(), self.state, self.learning_rates)
        stepped = SurfelCloud(new["positions"], cloud.tangents_u, cloud.tangents_v, new["scales"],
                              new["opacities"], new["colors"])
        return stepped.rotated(new["rotations"])

    def extend(self, count: int) -> None:
        if self.state is not None and count > 0:
            self.state = self.state.extend(count)
