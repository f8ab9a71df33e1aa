"""
Flow matching on the straight path x_t = (1 - t) x_0 + t eps (t = 0 data, t = 1 noise).

Two velocity fields share one interface, `velocity(x, t, c) -> (B, d)`:
  - GaussianMixture: closed-form E[eps - x_0 | x_t = x]
  - MLPField: small tanh network on concat(x, t, c) with a hand-written backward pass
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from sparse_view_recon.exceptions import DomainError, TrainingError
from sparse_view_recon.optim import AdamState, adam_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LatentState:
    value: np.ndarray
    t: float

    def __post_init__(self):
        value = np.asarray(self.value, dtype=np.float64)
        if not 0.0 <= self.t <= 1.0:
            raise DomainError(f"Timestep {self.t} outside [0, 1]")
        if not np.all(np.isfinite(value)):
            raise DomainError("Latent value must be finite")
        object.__setattr__(self, "value", value)


@dataclass(frozen=True, eq=False)
class FlowSample:
    x0: np.ndarray
    eps: np.ndarray
    t: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.eps)):
            raise DomainError("Noise sample must be finite")
        if not 0.0 <= self.t <= 1.0:
            raise DomainError(f"Timestep {self.t} outside [0, 1]")

    @property
    def target(self) -> np.ndarray:
        return np.asarray(self.eps, dtype=np.float64) - np.asarray(self.x0, dtype=np.float64)


def interpolate(x0, eps, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"Timestep {t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DomainError(f"Shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    return (1.0 - t) * x0 + t * eps


def _as_batch(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 1 else (x, False)


# ---------------------------------------------------------------------------
# Analytic mixture field
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covariances, dtype=np.float64).reshape(len(mu), mu.shape[1], mu.shape[1])
        if len(w) != len(mu):
            raise DomainError("Mixture weights and means differ in length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DomainError("Mixture weights must be positive and sum to 1")
        for k, c in enumerate(cov):
            if not np.allclose(c, c.T, atol=1e-12):
                raise DomainError(f"Covariance {k} is not symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError as exc:
                raise DomainError(f"Covariance {k} is not positive-definite") from exc
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def isotropic(cls, means, variances, weights=None) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, d = means.shape
        variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), (k,))
        weights = np.full(k, 1.0 / k) if weights is None else weights
        return cls(weights, means, variances[:, None, None] * np.eye(d))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)

    def velocity(self, x, t: float, c=None) -> np.ndarray:
        return mixture_velocity(x, t, self)


def mixture_velocity(x, t: float, mixture: GaussianMixture) -> np.ndarray:
    """
    E[eps - x_0 | x_t = x]. Per component (x_0, eps, x_t) are jointly Gaussian:
        S = (1-t)^2 Sigma + t^2 I,   v_k(x) = -mu + (t I - (1-t) Sigma) S^-1 (x - (1-t) mu)
    and components mix with their posterior responsibilities.
    """
    t = float(np.asarray(t).reshape(-1)[0]) if np.ndim(t) else float(t)
    if t <= 0.0 or t > 1.0:
        raise DomainError(f"mixture_velocity needs t in (0, 1], got {t}")
    xb, single = _as_batch(x)
    if xb.shape[1] != mixture.dim:
        raise DomainError(f"Point dimension {xb.shape[1]} does not match mixture dimension {mixture.dim}")
    eye = np.eye(mixture.dim)
    log_resp = []
    velocities = []
    for w, mu, sigma in zip(mixture.weights, mixture.means, mixture.covariances):
        s = (1 - t) ** 2 * sigma + t * t * eye
        chol = np.linalg.cholesky(s)
        diff = xb - (1 - t) * mu
        solved = np.linalg.solve(chol.T, np.linalg.solve(chol, diff.T)).T
        half = np.linalg.solve(chol, diff.T)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        log_resp.append(np.log(w) - 0.5 * np.sum(half * half, axis=0) - 0.5 * log_det)
        velocities.append(-mu + solved @ (t * eye - (1 - t) * sigma).T)
    log_resp = np.stack(log_resp, axis=1)
    resp = np.exp(log_resp - logsumexp(log_resp, axis=1, keepdims=True))
    v = np.einsum("bk,kbd->bd", resp, np.stack(velocities))
    return v[0] if single else v


@dataclass
class MixtureSampler:
    """Training data source drawing x_0 from an analytic mixture."""
    mixture: GaussianMixture

    def __call__(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mixture.sample(rng, n)


def fit_gaussian_field(latents: np.ndarray, shrinkage: float = 1e-2) -> GaussianMixture:
    """Single-component field matching the mean and (shrunk) covariance of a set of latents."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if len(latents) == 0:
        raise DomainError("Cannot fit a field to an empty latent set")
    d = latents.shape[1]
    mean = latents.mean(axis=0)
    if len(latents) > 1:
        cov = np.cov(latents, rowvar=False).reshape(d, d)
    else:
        cov = np.zeros((d, d))
    cov = (1 - shrinkage) * cov + shrinkage * np.eye(d) * max(float(np.trace(cov)) / d, 1e-3)
    return GaussianMixture(np.ones(1), mean[None], 0.5 * (cov + cov.T)[None])


# ---------------------------------------------------------------------------
# Trainable field
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MLPField:
    """tanh MLP: input concat(x, t, c) of size d + 1 + condition_dim, output d."""
    layer_sizes: List[int]
    params: Dict[str, np.ndarray]
    condition_dim: int = 0
    seed: int = 0
    steps: int = 0

    @classmethod
    def create(cls, dim: int, hidden: Sequence[int] = (64, 64), condition_dim: int = 0, seed: int = 0) -> "MLPField":
        sizes = [dim + 1 + condition_dim, *hidden, dim]
        rng = np.random.default_rng(seed)
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        return cls(list(sizes), params, condition_dim, seed)

    @property
    def dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def _inputs(self, x: np.ndarray, t, c) -> np.ndarray:
        n = len(x)
        t_col = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
        parts = [x, t_col]
        if self.condition_dim:
            if c is None:
                raise DomainError(f"Field expects a conditioning vector of size {self.condition_dim}")
            parts.append(np.broadcast_to(np.atleast_2d(np.asarray(c, dtype=np.float64)), (n, self.condition_dim)))
        return np.concatenate(parts, axis=1)

    def forward(self, x: np.ndarray, t, c=None) -> Tuple[np.ndarray, list]:
        h = self._inputs(x, t, c)
        cache = [h]
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = z if i == self.n_layers - 1 else np.tanh(z)
            cache.append(h)
        return h, cache

    def backward(self, cache: list, g_out: np.ndarray) -> Dict[str, np.ndarray]:
        grads = {}
        g = g_out
        for i in range(self.n_layers - 1, -1, -1):
            h_in = cache[i]
            grads[f"W{i}"] = h_in.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i:
                g = (g @ self.params[f"W{i}"].T) * (1.0 - cache[i] ** 2)
        return grads

    def velocity(self, x, t, c=None) -> np.ndarray:
        xb, single = _as_batch(x)
        out, _ = self.forward(xb, t, c)
        return out[0] if single else out

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([self.params[f"{p}{i}"].ravel() for i in range(self.n_layers) for p in ("W", "b")])

    @classmethod
    def from_flat(cls, layer_sizes: Sequence[int], flat: np.ndarray, condition_dim: int = 0,
                  seed: int = 0, steps: int = 0) -> "MLPField":
        params, offset = {}, 0
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            params[f"W{i}"] = flat[offset:offset + fan_in * fan_out].astype(np.float64).reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            params[f"b{i}"] = flat[offset:offset + fan_out].astype(np.float64)
            offset += fan_out
        if offset != len(flat):
            raise DomainError(f"Parameter blob has {len(flat)} values, layer sizes need {offset}")
        return cls(list(layer_sizes), params, condition_dim, seed, steps)


VelocityField = Union[GaussianMixture, MLPField]


def _stack_batch(batch: Sequence[FlowSample]):
    if len(batch) == 0:
        raise DomainError("fm_loss needs a non-empty batch")
    x0 = np.stack([np.asarray(s.x0, dtype=np.float64) for s in batch])
    eps = np.stack([np.asarray(s.eps, dtype=np.float64) for s in batch])
    t = np.array([s.t for s in batch], dtype=np.float64)
    return x0, eps, t


def _fm_loss_arrays(field, x0, eps, t, c=None):
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    target = eps - x0
    if isinstance(field, MLPField):
        v, cache = field.forward(xt, t, c)
        resid = v - target
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        return loss, field.backward(cache, 2.0 * resid / len(x0))
    if isinstance(field, GaussianMixture):
        v = np.concatenate([field.velocity(xt[i:i + 1], t[i]) for i in range(len(t))])
    else:
        v = np.concatenate([np.atleast_2d(field.velocity(xt[i], t[i], c)) for i in range(len(t))])
    resid = v - target
    return float(np.mean(np.sum(resid * resid, axis=1))), None


def fm_loss(field, batch: Sequence[FlowSample], c=None) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    """Mean squared velocity error; parameter gradients for trainable fields, else None."""
    x0, eps, t = _stack_batch(batch)
    return _fm_loss_arrays(field, x0, eps, t, c)


def train_field(field: MLPField, sampler: Callable[[np.random.Generator, int], np.ndarray], steps: int,
                lr: float = 1e-3, seed: int = 0, batch_size: int = 256,
                condition: Optional[np.ndarray] = None, progress: bool = False) -> Tuple[MLPField, np.ndarray]:
    if steps < 1:
        raise DomainError("train_field needs steps >= 1")
    rng = np.random.default_rng(seed)
    trained = MLPField(list(field.layer_sizes), {k: v.copy() for k, v in field.params.items()},
                       field.condition_dim, seed, field.steps)
    state = AdamState.zeros_like(trained.params)
    losses = np.zeros(steps)
    for step in tqdm(range(steps), desc="train_field", disable=not progress):
        x0 = sampler(rng, batch_size)
        eps = rng.standard_normal(x0.shape)
        t = rng.uniform(0.0, 1.0, size=batch_size)
        loss, grads = _fm_loss_arrays(trained, x0, eps, t, condition)
        if not np.isfinite(loss):
            raise TrainingError(f"Non-finite flow-matching loss at step {step} (loss={loss})")
        trained.params, state = adam_step(trained.params, grads, state, lr)
        losses[step] = loss
    trained.steps += steps
    logger.info("Trained velocity field for %d steps, final loss %.5f", steps, losses[-1])
    return trained, losses


def integrate_flow(field, x1, steps: int = 200, c=None, t_start: float = 1.0) -> np.ndarray:
    """Euler integration of dx/dt = v from t_start down to 0; velocity taken at the pre-step time."""
    if steps < 1:
        raise DomainError("integrate_flow needs steps >= 1")
    x, single = _as_batch(x1)
    x = x.copy()
    dt = t_start / steps
    for k in range(steps):
        t = t_start - k * dt
        x = x - dt * np.atleast_2d(field.velocity(x, t, c))
    return x[0] if single else x


def save_field(field: MLPField, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    field.flat_parameters().astype("<f4").tofile(path.with_suffix(".bin"))
    header = {"layer_sizes": field.layer_sizes, "seed": field.seed, "steps": field.steps,
              "condition_dim": field.condition_dim, "dtype": "float32"}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))


def load_field(path) -> MLPField:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    return MLPField.from_flat(header["layer_sizes"], flat, header.get("condition_dim", 0),
                              header.get("seed", 0), header.get("steps", 0))
