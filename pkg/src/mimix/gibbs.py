"""Conjugate full-conditional updates for the mixed-effects factor model.

State layout follows the mixed-effects decomposition

    theta_i = mu + Lambda f_i + delta_i,      f_i = b~' x_i + sum_r g_r[z_ri] + e_i

with a Dirichlet-Laplace shrinkage prior on the columns of Lambda (local
scale-mixture variances psi, column weights xi, global scales tau, rate nu,
concentration a on a discrete grid) and a spike-and-slab prior (omega, pi,
sigma_b^2) on the low-dimensional fixed effects b.  The "no_factors" variant
pins Lambda to the identity (L = K), drops the sample-level factor noise e_i,
and runs the same conditionals against theta residuals with per-taxon
precision weights.

Update order in one sweep: theta (HMC) -> mu -> Lambda -> DL scales -> f ->
g -> (b, omega, pi) -> variances.  Within the DL block the column weights are
drawn from their tau-marginalized conditional, then tau given the fresh
weights, then psi; the local scale must come last for the block to leave the
joint conditional invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import gammaln

from .config import (
    SPIKE_SLAB_A0,
    VARIANT_FACTORS,
    VARIANT_NO_FACTORS,
    ModelConfig,
    spike_slab_b0,
)
from .data import CountTable, ExperimentDesign, inverse_log_ratio
from .errors import EngineError, ValidationError
from .hmc import HmcSettings, hmc_step

SCALE_FLOOR = 1e-12  # guards degenerate GIG / inverse-Gaussian parameters


@dataclass
class ModelData:
    """Immutable-by-convention fit context: data plus derived constants."""

    counts: np.ndarray          # (n, K) integers
    totals: np.ndarray          # (n,) float
    x: np.ndarray               # (n, p)
    blocks: np.ndarray          # (n, R) int level assignments
    level_counts: tuple[int, ...]
    n_factors: int
    variant: str
    u0: float
    v0: float
    c0: float
    d0: float
    b0: float
    a_grid: np.ndarray
    a0: float = SPIKE_SLAB_A0
    block_onehots: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.block_onehots:
            for r, q in enumerate(self.level_counts):
                onehot = np.zeros((q, self.counts.shape[0]))
                onehot[self.blocks[:, r], np.arange(self.counts.shape[0])] = 1.0
                self.block_onehots.append(onehot)

    @property
    def n_samples(self) -> int:
        return self.counts.shape[0]

    @property
    def n_taxa(self) -> int:
        return self.counts.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def with_factors(self) -> bool:
        return self.variant == VARIANT_FACTORS


def build_model(table: CountTable, design: ExperimentDesign,
                config: ModelConfig) -> ModelData:
    if design.n_samples != table.n_samples:
        raise ValidationError("count table and design disagree on sample count")
    config = config.resolved(table.n_samples, table.n_taxa)
    return ModelData(
        counts=np.asarray(table.counts),
        totals=np.asarray(table.totals, dtype=float),
        x=np.asarray(design.covariates),
        blocks=np.asarray(design.blocks),
        level_counts=tuple(design.level_counts),
        n_factors=int(config.n_factors),
        variant=config.variant,
        u0=config.u0, v0=config.v0, c0=config.c0, d0=config.d0,
        b0=spike_slab_b0(config.inclusion_prob, int(config.n_factors)),
        a_grid=np.asarray(config.a_grid, dtype=float),
    )


@dataclass
class MarkovState:
    """One complete draw of every latent quantity.

    Shrinkage blocks (Lambda, psi, xi, tau, nu, a) are None under the
    no-factors variant, where the loading matrix is the identity.
    """

    theta: np.ndarray           # (n, K)
    mu: np.ndarray              # (K,)
    Lambda: np.ndarray | None   # (K, L)
    psi: np.ndarray | None      # (K, L)
    xi: np.ndarray | None       # (K, L), columns on the simplex
    tau: np.ndarray | None      # (L,)
    nu: float | None
    a: np.ndarray | None        # (L,) on the concentration grid
    F: np.ndarray               # (n, L) factor scores
    G: list[np.ndarray]         # per level: (q_r, L)
    b: np.ndarray               # (p, L)
    omega: np.ndarray           # (p, L) in {0, 1}
    pi: np.ndarray              # (p,)
    sigma_sq: np.ndarray        # (K,)
    sigma_mu_sq: float
    sigma_g_sq: np.ndarray      # (R,)
    sigma_b_sq: float

    def b_tilde(self) -> np.ndarray:
        return self.omega * self.b

    def beta(self) -> np.ndarray:
        """Fixed effects on the composition scale, K x p, never cached."""
        bt = self.b_tilde()
        if self.Lambda is None:
            return bt.T.copy()
        return self.Lambda @ bt.T

    def loading_matrix(self) -> np.ndarray:
        if self.Lambda is None:
            return np.eye(self.F.shape[1])
        return self.Lambda

    def score_contribution(self) -> np.ndarray:
        """Lambda @ f_i for every sample, the (n, K) systematic part."""
        if self.Lambda is None:
            return self.F
        return self.F @ self.Lambda.T

    def group_effects(self, model: ModelData) -> np.ndarray:
        """sum_r g_r[z_ri], the (n, L) random-effect part of the score mean."""
        out = np.zeros_like(self.F)
        for r in range(len(self.G)):
            out += self.G[r][model.blocks[:, r]]
        return out


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_state(model: ModelData, rng) -> MarkovState:
    """Data-driven starting point for fitting real data."""
    n, K, L = model.n_samples, model.n_taxa, model.n_factors
    p = model.n_covariates
    theta = np.log(model.counts + 0.5)
    theta = theta - theta.mean(axis=1, keepdims=True)
    mu = theta.mean(axis=0)
    resid = theta - mu
    sigma_sq = np.maximum(resid.var(axis=0), 0.1)
    if model.with_factors:
        Lambda = 0.1 * rng.standard_normal((K, L))
        psi = np.ones((K, L))
        xi = np.full((K, L), 1.0 / K)
        tau = np.ones(L)
        nu = 1.0
        a_mid = model.a_grid[np.argmin(np.abs(model.a_grid - 0.5))]
        a = np.full(L, a_mid)
    else:
        Lambda = psi = xi = tau = nu = a = None
    return MarkovState(
        theta=theta.astype(float),
        mu=mu,
        Lambda=Lambda, psi=psi, xi=xi, tau=tau, nu=nu, a=a,
        F=np.zeros((n, L)),
        G=[np.zeros((q, L)) for q in model.level_counts],
        b=np.zeros((p, L)),
        omega=np.zeros((p, L)),
        pi=np.full(p, model.a0 / (model.a0 + model.b0)),
        sigma_sq=sigma_sq,
        sigma_mu_sq=1.0,
        sigma_g_sq=np.ones(len(model.level_counts)),
        sigma_b_sq=1.0,
    )


def init_state_from_prior(model: ModelData, rng) -> MarkovState:
    """Exact draw from the prior, the starting point for kernel diagnostics."""
    from .distributions import sample_dirichlet

    n, K, L = model.n_samples, model.n_taxa, model.n_factors
    p = model.n_covariates
    sigma_mu_sq = 1.0 / rng.gamma(model.u0, 1.0 / model.v0)
    sigma_g_sq = 1.0 / rng.gamma(model.u0, 1.0 / model.v0,
                                 len(model.level_counts))
    sigma_b_sq = 1.0 / rng.gamma(model.u0, 1.0 / model.v0)
    sigma_sq = 1.0 / rng.gamma(model.u0, 1.0 / model.v0, K)
    mu = rng.normal(0.0, np.sqrt(sigma_mu_sq), K)
    pi = rng.beta(model.a0, model.b0, p)
    omega = (rng.random((p, L)) < pi[:, None]).astype(float)
    b = rng.normal(0.0, np.sqrt(sigma_b_sq), (p, L))
    G = [rng.normal(0.0, np.sqrt(sigma_g_sq[r]), (q, L))
         for r, q in enumerate(model.level_counts)]
    if model.with_factors:
        a = rng.choice(model.a_grid, L)
        nu = rng.gamma(model.c0, 1.0 / model.d0)
        tau = rng.gamma(K * a, 1.0 / nu)
        xi = sample_dirichlet(np.broadcast_to(a, (K, L)).T, rng).T
        psi = rng.exponential(2.0, (K, L))
        Lambda = rng.normal(0.0, 1.0, (K, L)) * np.sqrt(
            np.maximum(psi * xi**2 * tau**2, 0.0))
    else:
        Lambda = psi = xi = tau = nu = a = None

    state = MarkovState(
        theta=np.zeros((n, K)), mu=mu,
        Lambda=Lambda, psi=psi, xi=xi, tau=tau, nu=nu, a=a,
        F=np.zeros((n, L)), G=G, b=b, omega=omega, pi=pi,
        sigma_sq=sigma_sq, sigma_mu_sq=sigma_mu_sq,
        sigma_g_sq=sigma_g_sq, sigma_b_sq=sigma_b_sq,
    )
    bt = state.b_tilde()
    score_mean = model.x @ bt + state.group_effects(model)
    if model.with_factors:
        state.F = score_mean + rng.standard_normal((n, L))
    else:
        state.F = score_mean
    state.theta = (mu + state.score_contribution()
                   + rng.normal(0.0, 1.0, (n, K)) * np.sqrt(sigma_sq))
    return state


def resimulate_counts(state: MarkovState, model: ModelData, rng) -> None:
    """Redraw the count table from the current compositions, totals fixed."""
    phi = inverse_log_ratio(state.theta)
    model.counts = rng.multinomial(model.totals.astype(np.int64), phi)


# ---------------------------------------------------------------------------
# linear-algebra helpers
# ---------------------------------------------------------------------------

def _cholesky_with_jitter(prec: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        dim = prec.shape[-1]
        jittered = prec + 1e-8 * np.eye(dim)
        try:
            return np.linalg.cholesky(jittered)
        except np.linalg.LinAlgError as exc:
            raise EngineError("conditional precision is not positive definite "
                              "even after jitter") from exc


def sample_mvn_from_precision(prec: np.ndarray, rhs: np.ndarray, rng,
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Draws and means of N(P^-1 rhs, P^-1), batched over leading axes."""
    chol = _cholesky_with_jitter(prec)
    cholT = np.swapaxes(chol, -1, -2)
    half = np.linalg.solve(chol, rhs[..., None])
    mean = np.linalg.solve(cholT, half)[..., 0]
    noise = np.linalg.solve(cholT, rng.standard_normal(rhs.shape)[..., None])[..., 0]
    return mean + noise, mean


# ---------------------------------------------------------------------------
# conditional parameter builders (exposed for oracle tests)
# ---------------------------------------------------------------------------

def score_target(state: MarkovState, model: ModelData) -> np.ndarray:
    """What the structured mean b~'x + g must explain, per variant.

    With factors the scores f carry their own unit-variance noise; without
    factors the scores are deterministic, so the fixed and random effects
    regress directly on the composition residuals.
    """
    if model.with_factors:
        return state.F
    return state.theta - state.mu


def mu_conditional(state: MarkovState, model: ModelData,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Per-taxon posterior mean and variance of the overall mean."""
    resid = state.theta - state.score_contribution()
    prec = model.n_samples / state.sigma_sq + 1.0 / state.sigma_mu_sq
    mean = resid.sum(axis=0) / state.sigma_sq / prec
    return mean, 1.0 / prec


def lambda_row_conditional(state: MarkovState, model: ModelData,
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Batched precision (K, L, L) and rhs (K, L) of the loading rows."""
    K, L = state.Lambda.shape
    ftf = state.F.T @ state.F
    psi_diag = np.maximum(state.psi * state.xi**2 * state.tau**2, SCALE_FLOOR)
    prec = ftf[None, :, :] / state.sigma_sq[:, None, None]
    prec[:, np.arange(L), np.arange(L)] += 1.0 / psi_diag
    rhs = (state.F.T @ (state.theta - state.mu)).T / state.sigma_sq[:, None]
    return prec, rhs


def factor_score_conditional(state: MarkovState, model: ModelData,
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Shared precision (L, L) and per-sample rhs (n, L) of the scores."""
    lam_w = state.Lambda / state.sigma_sq[:, None]
    prec = state.Lambda.T @ lam_w + np.eye(state.Lambda.shape[1])
    prior_mean = model.x @ state.b_tilde() + state.group_effects(model)
    rhs = (state.theta - state.mu) @ lam_w + prior_mean
    return prec, rhs


def random_effect_conditional(state: MarkovState, model: ModelData, level: int,
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Per-block mean and variance at one nesting level: (q_r, L) each."""
    resid = score_target(state, model) - model.x @ state.b_tilde()
    for m in range(len(state.G)):
        if m != level:
            resid = resid - state.G[m][model.blocks[:, m]]
    onehot = model.block_onehots[level]
    counts = onehot.sum(axis=1)[:, None]
    if model.with_factors:
        prec = counts + 1.0 / state.sigma_g_sq[level]
        mean = (onehot @ resid) / prec
    else:
        w = 1.0 / state.sigma_sq[None, :]
        prec = counts * w + 1.0 / state.sigma_g_sq[level]
        mean = (onehot @ resid) * w / prec
    return mean, 1.0 / prec


def omega_probability(state: MarkovState, model: ModelData, j: int,
                      ) -> np.ndarray:
    """P(omega_jl = 1 | ...) for one covariate, vectorized over factors."""
    target = score_target(state, model) - state.group_effects(model)
    bt = state.b_tilde()
    d = target - model.x @ bt + np.outer(model.x[:, j], bt[j])
    with_j = d - np.outer(model.x[:, j], state.b[j])
    if model.with_factors:
        ss0 = (d**2).sum(axis=0)
        ss1 = (with_j**2).sum(axis=0)
    else:
        w = 1.0 / state.sigma_sq
        ss0 = (d**2).sum(axis=0) * w
        ss1 = (with_j**2).sum(axis=0) * w
    log_p0 = np.log1p(-state.pi[j]) - 0.5 * ss0
    log_p1 = np.log(state.pi[j]) - 0.5 * ss1
    return 1.0 / (1.0 + np.exp(np.clip(log_p0 - log_p1, -700, 700)))


def fixed_effect_conditional(state: MarkovState, model: ModelData,
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Batched precision (L, p, p) and rhs (L, p) of the slab coefficients."""
    p = model.n_covariates
    target = score_target(state, model) - state.group_effects(model)
    xtx = model.x.T @ model.x
    masked_xtx = state.omega.T[:, :, None] * state.omega.T[:, None, :] * xtx
    xt_target = (model.x.T @ target).T * state.omega.T       # (L, p)
    if not model.with_factors:
        w = 1.0 / state.sigma_sq
        masked_xtx = masked_xtx * w[:, None, None]
        xt_target = xt_target * w[:, None]
    prec = masked_xtx + np.eye(p)[None] / state.sigma_b_sq
    return prec, xt_target


def variance_conditionals(state: MarkovState, model: ModelData,
                          ) -> dict[str, tuple]:
    """Shapes and scales of every inverse-gamma variance conditional."""
    resid = state.theta - state.mu - state.score_contribution()
    out = {
        "sigma_sq": (model.u0 + model.n_samples / 2.0,
                     model.v0 + 0.5 * (resid**2).sum(axis=0)),
        "sigma_mu_sq": (model.u0 + model.n_taxa / 2.0,
                        model.v0 + 0.5 * (state.mu**2).sum()),
        "sigma_b_sq": (model.u0 + 0.5 * state.omega.sum(),
                       model.v0 + 0.5 * (state.b_tilde() ** 2).sum()),
    }
    L = state.F.shape[1]
    for r, q in enumerate(model.level_counts):
        out[f"sigma_g_sq_{r}"] = (model.u0 + q * L / 2.0,
                                  model.v0 + 0.5 * (state.G[r] ** 2).sum())
    return out


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def update_theta_hmc(state: MarkovState, model: ModelData,
                     settings: HmcSettings, rng) -> int:
    prior_mean = state.mu + state.score_contribution()
    state.theta, accepted = hmc_step(state.theta, model.counts, model.totals,
                                     prior_mean, state.sigma_sq, settings, rng)
    return int(accepted.sum())


def update_mu(state: MarkovState, model: ModelData, rng) -> MarkovState:
    mean, var = mu_conditional(state, model)
    state.mu = mean + np.sqrt(var) * rng.standard_normal(model.n_taxa)
    return state


def update_lambda_rows(state: MarkovState, model: ModelData, rng) -> MarkovState:
    prec, rhs = lambda_row_conditional(state, model)
    draws, _ = sample_mvn_from_precision(prec, rhs, rng)
    state.Lambda = draws
    return state


def draw_dl_xi(abs_lam: np.ndarray, a: np.ndarray, nu: float, rng) -> np.ndarray:
    """Column weights from their global-scale-marginalized conditional.

    Normalized independent GIG(a-1, 2 nu, 2|lambda|) draws per column.
    """
    from .distributions import sample_gig

    t = sample_gig(a[None, :] - 1.0, 2.0 * nu, 2.0 * abs_lam, rng)
    return t / t.sum(axis=0, keepdims=True)


def draw_dl_tau(abs_lam: np.ndarray, xi: np.ndarray, a: np.ndarray, nu: float,
                rng) -> np.ndarray:
    """Global scales given weights: GIG(K a - K, 2 nu, 2 sum |lambda|/xi)."""
    from .distributions import sample_gig

    K = abs_lam.shape[0]
    chi = 2.0 * (abs_lam / np.maximum(xi, SCALE_FLOOR)).sum(axis=0)
    return sample_gig(K * a - K, 2.0 * nu, chi, rng)


def draw_dl_psi(abs_lam: np.ndarray, xi: np.ndarray, tau: np.ndarray, rng,
                ) -> np.ndarray:
    """Local scale-mixture variances: 1/psi is InvGau(xi tau / |lambda|, 1)."""
    from .distributions import sample_inverse_gaussian

    mu_psi = np.maximum(xi * tau[None, :] / abs_lam, SCALE_FLOOR)
    return 1.0 / sample_inverse_gaussian(mu_psi, 1.0, rng)


def concentration_grid_logits(xi: np.ndarray, tau: np.ndarray, nu: float,
                              grid: np.ndarray) -> np.ndarray:
    """Unnormalized log-weights of the concentration conditional, (L, grid).

    The Dirichlet and gamma normalizers share a Gamma(K a) factor that
    cancels, leaving -K lgamma(a) + (a-1) sum log xi + K a (log nu + log tau).
    """
    K = xi.shape[0]
    log_xi_sum = np.log(np.maximum(xi, SCALE_FLOOR)).sum(axis=0)
    log_tau_nu = np.log(np.maximum(tau, SCALE_FLOOR)) + np.log(nu)
    return (-K * gammaln(grid)[None, :]
            + np.outer(log_xi_sum, grid - 1.0)
            + K * np.outer(log_tau_nu, grid))


def update_dl_scales(state: MarkovState, model: ModelData, rng) -> MarkovState:
    """Refresh (xi, tau, psi, nu, a).

    xi comes from the tau-marginalized conditional via normalized independent
    GIG draws; tau is then drawn given the fresh weights, and the local
    scale-mixture variances psi last so the block leaves the joint invariant.
    """
    K, L = state.Lambda.shape
    abs_lam = np.maximum(np.abs(state.Lambda), SCALE_FLOOR)

    state.xi = draw_dl_xi(abs_lam, state.a, state.nu, rng)
    state.tau = draw_dl_tau(abs_lam, state.xi, state.a, state.nu, rng)
    state.psi = draw_dl_psi(abs_lam, state.xi, state.tau, rng)

    state.nu = rng.gamma(model.c0 + K * state.a.sum(),
                         1.0 / (model.d0 + state.tau.sum()))

    logits = concentration_grid_logits(state.xi, state.tau, state.nu,
                                       model.a_grid)
    z = logits - logits.max(axis=1, keepdims=True)
    cdf = np.cumsum(np.exp(z), axis=1)
    u = rng.random((L, 1)) * cdf[:, -1:]
    state.a = model.a_grid[(u > cdf).sum(axis=1)]
    return state


def update_factor_scores(state: MarkovState, model: ModelData, rng) -> MarkovState:
    prec, rhs = factor_score_conditional(state, model)
    try:
        chol = cho_factor(prec, lower=True)
    except np.linalg.LinAlgError:
        chol = cho_factor(prec + 1e-8 * np.eye(prec.shape[0]), lower=True)
    mean = cho_solve(chol, rhs.T).T
    noise = solve_triangular(chol[0], rng.standard_normal(rhs.T.shape),
                             lower=True, trans="T").T
    state.F = mean + noise
    return state


def recompute_deterministic_scores(state: MarkovState, model: ModelData) -> None:
    """No-factors variant: scores are exactly the structured mean."""
    state.F = model.x @ state.b_tilde() + state.group_effects(model)


def update_random_effects(state: MarkovState, model: ModelData, rng) -> MarkovState:
    for r in range(len(state.G)):
        mean, var = random_effect_conditional(state, model, r)
        state.G[r] = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    if not model.with_factors:
        recompute_deterministic_scores(state, model)
    return state


def update_fixed_effects(state: MarkovState, model: ModelData, rng) -> MarkovState:
    """Slab coefficients, inclusion indicators, and inclusion probabilities."""
    p = model.n_covariates
    L = state.F.shape[1]

    prec, rhs = fixed_effect_conditional(state, model)
    draws, _ = sample_mvn_from_precision(prec, rhs, rng)
    state.b = draws.T
    if not model.with_factors:
        recompute_deterministic_scores(state, model)

    for j in range(p):
        prob = omega_probability(state, model, j)
        state.omega[j] = (rng.random(L) < prob).astype(float)
        if not model.with_factors:
            recompute_deterministic_scores(state, model)

    s = state.omega.sum(axis=1)
    state.pi = rng.beta(model.a0 + s, model.b0 + L - s)
    return state


def update_variances(state: MarkovState, model: ModelData, rng) -> MarkovState:
    cond = variance_conditionals(state, model)
    shape, scale = cond["sigma_sq"]
    state.sigma_sq = scale / rng.gamma(shape, 1.0, model.n_taxa)
    shape, scale = cond["sigma_mu_sq"]
    state.sigma_mu_sq = scale / rng.gamma(shape, 1.0)
    for r in range(len(state.G)):
        shape, scale = cond[f"sigma_g_sq_{r}"]
        state.sigma_g_sq[r] = scale / rng.gamma(shape, 1.0)
    shape, scale = cond["sigma_b_sq"]
    state.sigma_b_sq = scale / rng.gamma(shape, 1.0)
    return state


def gibbs_sweep(state: MarkovState, model: ModelData, settings: HmcSettings,
                rng_hmc, rng_gibbs) -> int:
    """One full update of every block; returns HMC acceptances."""
    accepted = update_theta_hmc(state, model, settings, rng_hmc)
    update_mu(state, model, rng_gibbs)
    if model.with_factors:
        update_lambda_rows(state, model, rng_gibbs)
        update_dl_scales(state, model, rng_gibbs)
        update_factor_scores(state, model, rng_gibbs)
    update_random_effects(state, model, rng_gibbs)
    update_fixed_effects(state, model, rng_gibbs)
    update_variances(state, model, rng_gibbs)
    return accepted
