"""Closed-form mean/variance propagation through a feed-forward two-layer GP stack.

Given first-layer predictive Gaussians (m_p, v_p) at a query point and
second-layer training latents w (N x P), the propagated moments are

    mu    = I^T R(w)^-1 y
    var   = y^T R(w)^-1 J R(w)^-1 y - mu^2
            + sigma^2 (1 + eta - tr[R(w)^-1 J])

with I_i = prod_p E[k_p(W_p, w_ip)] and J_ij = prod_p E[k_p(W_p, w_ip) k_p(W_p, w_jp)],
the expectations taken under W_p ~ Normal(m_p, v_p). The trace term is computed
as the elementwise sum of R^-1 * J, never as an explicit matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import FitConfig, FittedGP, PredictiveGaussian, fit_gp, predict_batch
from .kernels import KernelFamily, KernelSpec, expect_k, expect_kk_pairwise


class SequentialFitError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    name: str
    kernel: KernelSpec


@dataclass(frozen=True)
class LayerArchitecture:
    """Feed-forward topology: D inputs -> P latent nodes -> one output node."""

    input_dims: int
    latent_nodes: tuple[NodeSpec, ...]
    output_node: NodeSpec

    def __post_init__(self):
        names = [n.name for n in self.latent_nodes]
        if len(self.latent_nodes) < 1:
            raise ValueError("need at least one latent node")
        if len(set(names)) != len(names):
            raise ValueError("latent node names must be unique")
        if self.output_node.kernel.ndim != len(self.latent_nodes):
            raise ValueError("output node kernel must consume exactly the latent outputs")

    @property
    def n_latent(self) -> int:
        return len(self.latent_nodes)

    def latent_index(self, name: str) -> int:
        for i, node in enumerate(self.latent_nodes):
            if node.name == name:
                return i
        raise KeyError(f"unknown latent node: {name!r}")


@dataclass
class LinkedEmulator:
    first_layer: list[FittedGP]  # one per latent node, shared training inputs
    second_layer: FittedGP  # latents -> output
    latent_values: np.ndarray  # (N, P), equals second_layer.training.X
    clamp_count: int = 0
    _second_inv: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not np.array_equal(self.second_layer.training.X, self.latent_values):
            raise ValueError("second layer must be trained on latent_values")

    @property
    def n_latent(self) -> int:
        return len(self.first_layer)

    def second_layer_inverse(self) -> np.ndarray:
        if self._second_inv is None:
            self._second_inv = self.second_layer.corr.inverse()
        return self._second_inv

    def manifest(self) -> dict:
        """Reproducibility record: hyperparameters, sizes, jitter, clamps."""

        def node_entry(m: FittedGP) -> dict:
            return {
                "family": m.hyper.kernel.family.value,
                "lengthscales": m.hyper.kernel.lengthscales.tolist(),
                "scale": m.hyper.scale,
                "nugget": m.hyper.nugget,
                "n_train": m.n,
                "jitter_applied": m.corr.jitter_applied,
            }

        return {
            "first_layer": [node_entry(m) for m in self.first_layer],
            "second_layer": node_entry(self.second_layer),
            "clamp_count": self.clamp_count,
        }


def _latent_predictions(em: LinkedEmulator, X0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    means = np.empty((X0.shape[0], em.n_latent))
    variances = np.empty_like(means)
    for p, model in enumerate(em.first_layer):
        means[:, p], variances[:, p] = predict_batch(model, X0)
    return means, variances


def assemble_I(em: LinkedEmulator, latent_preds: list[PredictiveGaussian], x0=None) -> np.ndarray:
    """Vector I with I_i = prod_p E[k_p(W_p, w_ip)]; entries in (0, 1]."""
    m = np.array([p.mean for p in latent_preds])
    v = np.array([p.variance for p in latent_preds])
    return expect_k(em.second_layer.hyper.kernel, m, v, em.latent_values)


def assemble_J(em: LinkedEmulator, latent_preds: list[PredictiveGaussian], x0=None) -> np.ndarray:
    """Matrix J with J_ij = prod_p E[k_p(W_p, w_ip) k_p(W_p, w_jp)]; symmetric."""
    m = np.array([p.mean for p in latent_preds])
    v = np.array([p.variance for p in latent_preds])
    return expect_kk_pairwise(em.second_layer.hyper.kernel, m, v, em.latent_values)


def propagate_moments(
    model: FittedGP, m: np.ndarray, v: np.ndarray, Rinv: np.ndarray | None = None
) -> tuple[float, float]:
    """Push a Gaussian input N(m, diag(v)) through a fitted GP's posterior.

    Returns the exact mean/variance of the predictive mixture; the variance may
    be slightly negative in floating point (caller clamps). Applying this
    repeatedly layer by layer evaluates deeper feed-forward chains.
    """
    kernel = model.hyper.kernel
    if kernel.family is not KernelFamily.SQUARED_EXPONENTIAL:
        raise NotImplementedError(
            "moment propagation requires a squared exponential kernel"
        )
    W = model.training.X
    I = expect_k(kernel, m, v, W)
    J = expect_kk_pairwise(kernel, m, v, W)
    alpha = model.alpha
    if Rinv is None:
        Rinv = model.corr.inverse()
    mu = float(I @ alpha)
    var = (
        float(alpha @ J @ alpha)
        - mu**2
        + model.hyper.scale * (1.0 + model.hyper.nugget - float(np.sum(Rinv * J)))
    )
    return mu, var


def _propagate(em: LinkedEmulator, m: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    mu, var = propagate_moments(em.second_layer, m, v, em.second_layer_inverse())
    if var < 0:
        em.clamp_count += 1
        var = 0.0
    return mu, var


def link_predict(em: LinkedEmulator, x0) -> PredictiveGaussian:
    """Propagated predictive distribution of the output at global input x0."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    means, variances = _latent_predictions(em, x0[None, :])
    mu, var = _propagate(em, means[0], variances[0])
    return PredictiveGaussian(mean=mu, variance=var)


def link_predict_batch(em: LinkedEmulator, X0) -> tuple[np.ndarray, np.ndarray]:
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    means, variances = _latent_predictions(em, X0)
    out_m = np.empty(X0.shape[0])
    out_v = np.empty(X0.shape[0])
    for i in range(X0.shape[0]):
        out_m[i], out_v[i] = _propagate(em, means[i], variances[i])
    return out_m, out_v


def fit_sequential_lgp(
    X,
    latent_obs: np.ndarray,
    latent_mask: np.ndarray,
    y,
    arch: LayerArchitecture,
    config: FitConfig = FitConfig(),
    y_mask=None,
) -> LinkedEmulator:
    """Complete-case sequential fit: each latent column on its observed rows,
    then the output GP on rows where every latent (and the output) is observed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    latent_obs = np.asarray(latent_obs, dtype=float)
    latent_mask = np.asarray(latent_mask, dtype=bool)
    y = np.asarray(y, dtype=float).ravel()
    P = arch.n_latent
    if latent_obs.shape != (X.shape[0], P) or latent_mask.shape != latent_obs.shape:
        raise ValueError("latent observations/mask must be (N, P)")

    first_layer = []
    for p in range(P):
        obs = latent_mask[:, p]
        if np.sum(obs) < 2:
            raise SequentialFitError(
                f"latent column {arch.latent_nodes[p].name!r} has fewer than 2 observed values"
            )
        first_layer.append(fit_gp(X[obs], latent_obs[obs, p], config))

    complete = np.all(latent_mask, axis=1)
    if y_mask is not None:
        complete &= np.asarray(y_mask, dtype=bool)
    if np.sum(complete) < 2:
        raise SequentialFitError("fewer than 2 complete rows for the output layer")
    w = latent_obs[complete]
    second = fit_gp(w, y[complete], config)
    return LinkedEmulator(first_layer=first_layer, second_layer=second, latent_values=w)
