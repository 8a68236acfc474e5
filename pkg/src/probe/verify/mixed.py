"""Two-dimensional model whose density is the mixed partial of a CDF.

``y(a1, a2) = sum_k pi_k sig((a1 - m1k)/s1k) sig((a2 - m2k)/s2k)`` is
monotone in each argument and tends to 0 / 1 at the corners, so its
mixed partial is a normalized density.  Used as an independent check on
the 2D flow's normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from probe.numeric import OptimizerState, mixed_partial_2d, sgd_step, simpson_2d
from probe.numeric import dual as D


@dataclass
class ProductCDFMixture:
    logits: np.ndarray
    loc: np.ndarray
    log_scale: np.ndarray

    @classmethod
    def init(cls, k: int, rng, spread: float = 1.5) -> "ProductCDFMixture":
        return cls(np.zeros(k), rng.normal(0.0, spread, (k, 2)), np.zeros((k, 2)))

    def weights(self) -> np.ndarray:
        w = np.exp(self.logits - self.logits.max())
        return w / w.sum()

    def cdf(self, a1, a2):
        """Scalar program; accepts floats or nested duals."""
        w, s = self.weights(), np.exp(self.log_scale)
        total = 0.0
        for k in range(w.size):
            total = total + float(w[k]) * D.sigmoid((a1 - float(self.loc[k, 0])) / float(s[k, 0])) \
                * D.sigmoid((a2 - float(self.loc[k, 1])) / float(s[k, 1]))
        return total

    def density_dual(self, point) -> float:
        """Mixed partial by nested dual numbers, checked against differences."""
        return mixed_partial_2d(self.cdf, point, check=True, rtol=1e-3)

    def density(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        with torch.no_grad():
            return np.exp(_log_density(_tensors(self), torch.as_tensor(pts)).numpy())

    def mass(self, half_width: float = 12.0, n_panels: int = 240) -> float:
        box = ((-half_width, half_width), (-half_width, half_width))
        return simpson_2d(self.density, box, n_panels)


def _tensors(model: ProductCDFMixture) -> list[torch.Tensor]:
    return [torch.as_tensor(v, dtype=torch.float64) for v in
            (model.logits, model.loc, model.log_scale)]


def _log_density(t: list[torch.Tensor], pts: torch.Tensor) -> torch.Tensor:
    logits, loc, log_scale = t
    u = (pts[:, None, :] - loc[None]) / torch.exp(log_scale)[None]
    log_sp = -(torch.nn.functional.softplus(u) + torch.nn.functional.softplus(-u))
    terms = torch.log_softmax(logits, 0)[None] + (log_sp - log_scale[None]).sum(-1)
    return torch.logsumexp(terms, dim=1)


def fit_mixture(data, k: int = 6, epochs: int = 300, learning_rate: float = 5e-2,
                seed: int = 0) -> tuple[ProductCDFMixture, list[float]]:
    """Full-batch maximum likelihood with the numeric optimizer."""
    x = np.asarray(data, dtype=float)
    mean, std = x.mean(0), x.std(0)
    z = torch.as_tensor((x - mean) / std)
    model = ProductCDFMixture.init(k, np.random.default_rng(seed))
    sizes = [model.logits.size, model.loc.size, model.log_scale.size]
    vec = np.concatenate([model.logits, model.loc.ravel(), model.log_scale.ravel()])
    state = OptimizerState(learning_rate=learning_rate)
    losses = []
    for _ in range(epochs):
        t = torch.tensor(vec, requires_grad=True)
        parts = torch.split(t, sizes)
        loss = -_log_density([parts[0], parts[1].reshape(k, 2), parts[2].reshape(k, 2)], z).mean()
        loss.backward()
        losses.append(float(loss.detach()) + float(np.log(std).sum()))
        vec, state = sgd_step(vec, t.grad.numpy(), state)
    a, b = sizes[0], sizes[0] + sizes[1]
    # fold the standardization back into locations and scales
    loc = vec[a:b].reshape(k, 2) * std + mean
    log_scale = vec[b:].reshape(k, 2) + np.log(std)
    return ProductCDFMixture(vec[:a].copy(), loc, log_scale), losses
