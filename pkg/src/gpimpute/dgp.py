"""Deep GP training by stochastic EM with elliptical-slice-sampled latent layers,
and ensemble prediction by mixing per-imputation linked emulators.

Each ensemble draw fixes the latent layer at one imputation, turning the deep GP
into a linked GP whose moments are closed-form; the mixture over draws gives

    mu    = mean_i(mu_i)
    var   = mean_i(mu_i^2 + var_i) - mu^2
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .data import ObservationTable
from .gp import (
    FitConfig,
    FittedGP,
    GPHyperparams,
    PredictiveGaussian,
    fit_gp,
    make_fitted_gp,
    predict_batch,
    refit_gp,
)
from .kernels import (
    KernelFamily,
    KernelSpec,
    SingularMatrixError,
    _cholesky_with_jitter,
    build_correlation,
)
from .linked import LayerArchitecture, LinkedEmulator, NodeSpec, link_predict

ESS_BRACKET_MIN = 1e-12


class ESSStallError(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


class SEMError(RuntimeError):
    pass


@dataclass(frozen=True)
class SEMConfig:
    """Stochastic-EM settings; defaults chosen for desk-scale runtime."""

    iterations: int = 500
    burn_in: int = 300
    ess_sweeps: int = 10  # ESS sweeps per SEM iteration and between final draws
    n_imputations: int = 50
    randomize_sweep_order: bool = False
    refit_max_iter: int = 25
    fit: FitConfig = field(default_factory=FitConfig)


@dataclass
class LayerImputation:
    """One complete draw of latent-layer values; observed entries stay fixed."""

    values: np.ndarray  # (N, P)
    fixed_mask: np.ndarray  # (N, P) bool, True where latent is observed data
    draw_index: int


@dataclass
class EnsemblePrediction:
    mixture: PredictiveGaussian
    components: list[PredictiveGaussian]


def mix_components(components: list[PredictiveGaussian]) -> EnsemblePrediction:
    means = np.array([c.mean for c in components])
    variances = np.array([c.variance for c in components])
    mu = float(np.mean(means))
    var = float(np.mean(means**2 + variances) - mu**2)
    return EnsemblePrediction(
        mixture=PredictiveGaussian(mean=mu, variance=max(var, 0.0)),
        components=components,
    )


def ess_update(prior_mean, prior_chol, current, loglik, rng) -> np.ndarray:
    """One elliptical slice sampling transition for target prior x likelihood.

    ``prior_chol`` is the lower Cholesky factor of the prior covariance. The
    invariant distribution is proportional to N(prior_mean, LL^T) * exp(loglik).
    """
    current = np.asarray(current, dtype=float)
    if current.size == 0:
        return current
    mean = np.asarray(prior_mean, dtype=float)
    logy = loglik(current)
    if not np.isfinite(logy):
        raise ValueError("loglik must be finite at the current state")
    logy += np.log(rng.uniform())
    nu = prior_chol @ rng.standard_normal(current.size)
    delta = current - mean

    theta = rng.uniform(0.0, 2.0 * np.pi)
    theta_min, theta_max = theta - 2.0 * np.pi, theta
    while True:
        proposal = mean + delta * np.cos(theta) + nu * np.sin(theta)
        if loglik(proposal) > logy:
            return proposal
        if theta < 0:
            theta_min = theta
        else:
            theta_max = theta
        if theta_max - theta_min < ESS_BRACKET_MIN:
            raise ESSStallError(
                f"ESS bracket shrank below {ESS_BRACKET_MIN:g} radians",
                state={"current": current, "theta": theta, "log_threshold": logy},
            )
        theta = rng.uniform(theta_min, theta_max)


@dataclass
class _ColumnPrior:
    """Conditional Gaussian over the missing entries of one latent column."""

    missing: np.ndarray  # row indices
    mean: np.ndarray
    chol: np.ndarray


class LatentState:
    """Working state of the SEM sampler: data, current hyperparameters, and the
    current latent matrix with observed entries pinned."""

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        latent_obs: np.ndarray,
        latent_mask: np.ndarray,
        first_hyper: list[GPHyperparams],
        second_hyper: GPHyperparams,
        initial_latents: np.ndarray,
    ):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).ravel()
        self.latent_obs = np.asarray(latent_obs, dtype=float)
        self.latent_mask = np.asarray(latent_mask, dtype=bool)
        self.first_hyper = list(first_hyper)
        self.second_hyper = second_hyper
        self.w = np.asarray(initial_latents, dtype=float).copy()
        self.w[self.latent_mask] = self.latent_obs[self.latent_mask]
        self._priors: list[_ColumnPrior | None] = [None] * self.n_latent
        self._rebuild_priors()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_latent(self) -> int:
        return self.latent_mask.shape[1]

    def set_hyperparams(self, first_hyper, second_hyper):
        self.first_hyper = list(first_hyper)
        self.second_hyper = second_hyper
        self._rebuild_priors()

    def _rebuild_priors(self):
        for p in range(self.n_latent):
            obs = self.latent_mask[:, p]
            miss = np.where(~obs)[0]
            if miss.size == 0:
                self._priors[p] = None
                continue
            hyper = self.first_hyper[p]
            corr = build_correlation(hyper.kernel, hyper.nugget, self.X)
            cov = hyper.scale * (corr.values + corr.jitter_applied * np.eye(self.n))
            oi = np.where(obs)[0]
            if oi.size == 0:
                mean = np.zeros(miss.size)
                cond = cov[np.ix_(miss, miss)]
            else:
                S_oo = cov[np.ix_(oi, oi)]
                S_mo = cov[np.ix_(miss, oi)]
                L_oo, _ = _cholesky_with_jitter(S_oo)
                sol = cho_solve((L_oo, True), S_mo.T)  # S_oo^-1 S_om
                mean = S_mo @ cho_solve((L_oo, True), self.latent_obs[oi, p])
                cond = cov[np.ix_(miss, miss)] - S_mo @ sol
                cond = 0.5 * (cond + cond.T)
            L, _ = _cholesky_with_jitter(cond)
            self._priors[p] = _ColumnPrior(missing=miss, mean=mean, chol=L)

    def output_loglik(self, w_full: np.ndarray) -> float:
        """Zero-mean Gaussian log density of y under the second-layer GP at latents w.

        Specialized SE fast path: sampled latents are almost surely distinct,
        so the nugget lands on the diagonal only.
        """
        hyper = self.second_hyper
        if hyper.kernel.family is not KernelFamily.SQUARED_EXPONENTIAL:
            try:
                corr = build_correlation(hyper.kernel, hyper.nugget, w_full)
            except SingularMatrixError:
                return -np.inf
            alpha = corr.solve(self.y)
            quad = float(self.y @ alpha) / hyper.scale
            logdet = self.n * np.log(hyper.scale) + corr.logdet()
            return -0.5 * (self.n * np.log(2.0 * np.pi) + logdet + quad)
        Z = w_full / hyper.kernel.lengthscales
        sq = np.einsum("ij,ij->i", Z, Z)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
        np.maximum(d2, 0.0, out=d2)
        R = np.exp(-d2)
        R[np.diag_indices(self.n)] += hyper.nugget
        try:
            L, _ = _cholesky_with_jitter(R)
        except SingularMatrixError:
            return -np.inf
        alpha = cho_solve((L, True), self.y, check_finite=False)
        quad = float(self.y @ alpha) / hyper.scale
        logdet = self.n * np.log(hyper.scale) + 2.0 * float(np.sum(np.log(np.diag(L))))
        return -0.5 * (self.n * np.log(2.0 * np.pi) + logdet + quad)

    def sweep(self, rng: np.random.Generator, randomize_order: bool = False):
        """One ESS update of the missing entries of each latent column."""
        order = list(range(self.n_latent))
        if randomize_order:
            order = list(rng.permutation(self.n_latent))
        for p in order:
            prior = self._priors[p]
            if prior is None:
                continue
            w_work = self.w.copy()

            def loglik(free):
                w_work[prior.missing, p] = free
                return self.output_loglik(w_work)

            new = ess_update(prior.mean, prior.chol, self.w[prior.missing, p], loglik, rng)
            self.w[prior.missing, p] = new


def impute_latents(state: LatentState, rng: np.random.Generator, sweeps: int = 1,
                   draw_index: int = 0, randomize_order: bool = False) -> LayerImputation:
    """Advance the sampler and snapshot the latent matrix as one imputation."""
    for _ in range(sweeps):
        state.sweep(rng, randomize_order)
    return LayerImputation(
        values=state.w.copy(),
        fixed_mask=state.latent_mask.copy(),
        draw_index=draw_index,
    )


@dataclass
class DGPSIEmulator:
    architecture: LayerArchitecture
    first_hyper: list[GPHyperparams]
    second_hyper: GPHyperparams
    imputations: list[LayerImputation]
    linked: list[LinkedEmulator]
    rng_seed: int | None
    train_X: np.ndarray = field(repr=False, default=None)
    train_y: np.ndarray = field(repr=False, default=None)

    @property
    def n_imputations(self) -> int:
        return len(self.imputations)

    def manifest(self) -> dict:
        def hyper_entry(h: GPHyperparams) -> dict:
            return {
                "family": h.kernel.family.value,
                "lengthscales": h.kernel.lengthscales.tolist(),
                "scale": h.scale,
                "nugget": h.nugget,
            }

        return {
            "latent_nodes": [n.name for n in self.architecture.latent_nodes],
            "output_node": self.architecture.output_node.name,
            "first_layer": [hyper_entry(h) for h in self.first_hyper],
            "second_layer": hyper_entry(self.second_hyper),
            "n_imputations": self.n_imputations,
            "n_train": int(self.train_X.shape[0]),
            "rng_seed": self.rng_seed,
            "clamp_count": int(sum(le.clamp_count for le in self.linked)),
        }


def _geometric_mean_hyper(trace: list[GPHyperparams]) -> GPHyperparams:
    """Arithmetic mean in log space of lengthscales, scale, and nugget."""
    ls = np.exp(np.mean([np.log(h.kernel.lengthscales) for h in trace], axis=0))
    scale = float(np.exp(np.mean([np.log(h.scale) for h in trace])))
    nugget = float(np.exp(np.mean([np.log(max(h.nugget, 1e-300)) for h in trace])))
    family = trace[0].kernel.family
    return GPHyperparams(kernel=KernelSpec(family, ls), scale=scale, nugget=nugget)


def _build_linked(X, y, imputation: LayerImputation, first_hyper, second_hyper) -> LinkedEmulator:
    first = [
        make_fitted_gp(X, imputation.values[:, p], first_hyper[p])
        for p in range(len(first_hyper))
    ]
    second = make_fitted_gp(imputation.values, y, second_hyper)
    return LinkedEmulator(first_layer=first, second_layer=second,
                          latent_values=imputation.values)


def train_sem(
    data: ObservationTable,
    arch: LayerArchitecture,
    config: SEMConfig,
    rng,
) -> DGPSIEmulator:
    """Fit the two-layer DGP by stochastic EM on rows where the output is observed.

    Alternates ESS sweeps over missing latent entries with per-node ML refits;
    final hyperparameters are the log-space average over post-burn-in iterations,
    then ``n_imputations`` latent draws populate the ensemble. With fully
    observed latents the E-step is a no-op and the result equals independent
    per-node ML fits.
    """
    if config.iterations < config.burn_in:
        raise ValueError("iterations must be >= burn_in")
    seed = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)

    out_j = data.col_index(data.output_name)
    rows = data.mask[:, out_j]
    X = data.times[rows, None]
    y = data.values[rows, out_j]
    latent_names = [n.name for n in arch.latent_nodes]
    latent_idx = [data.col_index(c) for c in latent_names]
    latent_obs = data.values[np.ix_(np.where(rows)[0], latent_idx)]
    latent_mask = data.mask[np.ix_(np.where(rows)[0], latent_idx)]
    P = arch.n_latent

    def fit_node(Xn, yn, name):
        try:
            return fit_gp(Xn, yn, config.fit)
        except Exception as exc:
            raise SEMError(f"initial fit failed for node {name!r}: {exc}") from exc

    if latent_mask.all():
        # E-step is a no-op: independent per-node ML fits, identical latents per draw
        first = [fit_node(X, latent_obs[:, p], latent_names[p]) for p in range(P)]
        second = fit_node(latent_obs, y, arch.output_node.name)
        first_hyper = [m.hyper for m in first]
        second_hyper = second.hyper
        imputations = [
            LayerImputation(values=latent_obs.copy(),
                            fixed_mask=np.ones_like(latent_mask), draw_index=i)
            for i in range(config.n_imputations)
        ]
        linked = [
            LinkedEmulator(first_layer=first, second_layer=second, latent_values=latent_obs)
            for _ in range(config.n_imputations)
        ]
        return DGPSIEmulator(
            architecture=arch, first_hyper=first_hyper, second_hyper=second_hyper,
            imputations=imputations, linked=linked, rng_seed=seed,
            train_X=X, train_y=y,
        )

    # initial fill: per-column GP on observed entries, posterior mean at missing
    init_w = latent_obs.copy()
    first_models = []
    for p in range(P):
        obs = latent_mask[:, p]
        if obs.sum() < 2:
            raise SEMError(f"latent column {latent_names[p]!r} has fewer than 2 observed values")
        m = fit_node(X[obs], latent_obs[obs, p], latent_names[p])
        first_models.append(m)
        miss = ~obs
        if miss.any():
            mean, _ = predict_batch(m, X[miss])
            init_w[miss, p] = mean
    second_model = fit_node(init_w, y, arch.output_node.name)

    state = LatentState(
        X=X, y=y, latent_obs=latent_obs, latent_mask=latent_mask,
        first_hyper=[m.hyper for m in first_models],
        second_hyper=second_model.hyper,
        initial_latents=init_w,
    )

    first_trace: list[list[GPHyperparams]] = [[] for _ in range(P)]
    second_trace: list[GPHyperparams] = []
    for it in range(config.iterations):
        for _ in range(config.ess_sweeps):
            state.sweep(rng, config.randomize_sweep_order)
        new_first = []
        for p in range(P):
            try:
                m = refit_gp(X, state.w[:, p], state.first_hyper[p], config.refit_max_iter)
            except Exception as exc:
                raise SEMError(
                    f"refit failed at iteration {it} for node {latent_names[p]!r}: {exc}"
                ) from exc
            new_first.append(m.hyper)
        try:
            m2 = refit_gp(state.w, y, state.second_hyper, config.refit_max_iter)
        except Exception as exc:
            raise SEMError(
                f"refit failed at iteration {it} for node {arch.output_node.name!r}: {exc}"
            ) from exc
        state.set_hyperparams(new_first, m2.hyper)
        if it >= config.burn_in:
            for p in range(P):
                first_trace[p].append(new_first[p])
            second_trace.append(m2.hyper)

    if second_trace:
        final_first = [_geometric_mean_hyper(first_trace[p]) for p in range(P)]
        final_second = _geometric_mean_hyper(second_trace)
    else:
        final_first = list(state.first_hyper)
        final_second = state.second_hyper
    state.set_hyperparams(final_first, final_second)

    imputations = []
    linked = []
    for i in range(config.n_imputations):
        imp = impute_latents(state, rng, sweeps=config.ess_sweeps, draw_index=i,
                             randomize_order=config.randomize_sweep_order)
        imputations.append(imp)
        linked.append(_build_linked(X, y, imp, final_first, final_second))

    return DGPSIEmulator(
        architecture=arch, first_hyper=final_first, second_hyper=final_second,
        imputations=imputations, linked=linked, rng_seed=seed,
        train_X=X, train_y=y,
    )


def predict_ensemble(em: DGPSIEmulator, x0) -> EnsemblePrediction:
    """Mixture of per-imputation linked-GP predictions at a global input."""
    components = [link_predict(le, x0) for le in em.linked]
    return mix_components(components)


def impute_covariates(em: DGPSIEmulator, query_times, target: str) -> list[EnsemblePrediction]:
    """Mixture over imputations of the target latent's first-layer posterior at
    each query time."""
    idx = em.architecture.latent_index(target)
    qt = np.asarray(query_times, dtype=float).reshape(-1, 1)
    comp_means = np.empty((len(em.linked), qt.shape[0]))
    comp_vars = np.empty_like(comp_means)
    for i, le in enumerate(em.linked):
        comp_means[i], comp_vars[i] = predict_batch(le.first_layer[idx], qt)
    out = []
    for t in range(qt.shape[0]):
        comps = [
            PredictiveGaussian(mean=float(comp_means[i, t]), variance=float(comp_vars[i, t]))
            for i in range(len(em.linked))
        ]
        out.append(mix_components(comps))
    return out


def save_emulator(em: DGPSIEmulator, directory: str):
    """Persist an emulator as a manifest JSON plus flat CSV payloads."""
    os.makedirs(directory, exist_ok=True)
    manifest = em.manifest()
    manifest["architecture"] = {
        "input_dims": em.architecture.input_dims,
        "latent_kernels": [
            {"name": n.name, "lengthscales": n.kernel.lengthscales.tolist(),
             "family": n.kernel.family.value}
            for n in em.architecture.latent_nodes
        ],
        "output_kernel": {
            "name": em.architecture.output_node.name,
            "lengthscales": em.architecture.output_node.kernel.lengthscales.tolist(),
            "family": em.architecture.output_node.kernel.family.value,
        },
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    np.savetxt(os.path.join(directory, "training_inputs.csv"), em.train_X, delimiter=",")
    np.savetxt(os.path.join(directory, "training_outputs.csv"), em.train_y, delimiter=",")
    rows = []
    for imp in em.imputations:
        n, p = imp.values.shape
        for i in range(n):
            for j in range(p):
                rows.append((imp.draw_index, i, j, float(imp.values[i, j]), int(imp.fixed_mask[i, j])))
    with open(os.path.join(directory, "imputations.csv"), "w") as fh:
        fh.write("draw,row,col,value,fixed\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]!r},{r[4]}\n")


def load_emulator(directory: str) -> DGPSIEmulator:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    arch_info = manifest["architecture"]
    latent_nodes = tuple(
        NodeSpec(e["name"], KernelSpec(KernelFamily(e["family"]), np.array(e["lengthscales"])))
        for e in arch_info["latent_kernels"]
    )
    ok = arch_info["output_kernel"]
    arch = LayerArchitecture(
        input_dims=arch_info["input_dims"],
        latent_nodes=latent_nodes,
        output_node=NodeSpec(ok["name"], KernelSpec(KernelFamily(ok["family"]), np.array(ok["lengthscales"]))),
    )
    first_hyper = [
        GPHyperparams(
            kernel=KernelSpec(KernelFamily(e["family"]), np.array(e["lengthscales"])),
            scale=e["scale"], nugget=e["nugget"],
        )
        for e in manifest["first_layer"]
    ]
    e2 = manifest["second_layer"]
    second_hyper = GPHyperparams(
        kernel=KernelSpec(KernelFamily(e2["family"]), np.array(e2["lengthscales"])),
        scale=e2["scale"], nugget=e2["nugget"],
    )
    X = np.loadtxt(os.path.join(directory, "training_inputs.csv"), delimiter=",", ndmin=2)
    y = np.loadtxt(os.path.join(directory, "training_outputs.csv"), delimiter=",").ravel()
    n = X.shape[0]
    p = len(first_hyper)
    draws: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    with open(os.path.join(directory, "imputations.csv")) as fh:
        next(fh)
        for line in fh:
            d, i, j, val, fixed = line.strip().split(",")
            d = int(d)
            if d not in draws:
                draws[d] = (np.empty((n, p)), np.empty((n, p), dtype=bool))
            draws[d][0][int(i), int(j)] = float(val)
            draws[d][1][int(i), int(j)] = bool(int(fixed))
    imputations = [
        LayerImputation(values=draws[d][0], fixed_mask=draws[d][1], draw_index=d)
        for d in sorted(draws)
    ]
    linked = [_build_linked(X, y, imp, first_hyper, second_hyper) for imp in imputations]
    return DGPSIEmulator(
        architecture=arch, first_hyper=first_hyper, second_hyper=second_hyper,
        imputations=imputations, linked=linked, rng_seed=manifest.get("rng_seed"),
        train_X=X, train_y=y,
    )
