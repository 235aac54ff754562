"""Continuous building block: recurrent switching linear dynamical systems.

Generative model with K modes over a D-dimensional state x and mode z:
    z_1 ~ switch_init,  x_1 ~ N(state_init)
    z_{t+1} | z_t, x_t  ~ softmax_j( base[j, z_t] + w_j . x_t )
    x_{t+1} | z_{t+1}   = B_{z_{t+1}} x_t + B^a_{z_{t+1}} u_t + eps,
                          eps ~ N(0, Sigma_{z_{t+1}})
    y_t                 = C x_t + N(0, R_obs)
The mode entered at t+1 selects the dynamics of the step that produced
it, and the switch depends on the previous continuous state (the
recurrent connection that expresses contact-style behavior).

Posterior inference uses a structured variational family q(z) q(x): the
switch transition factor is evaluated at fixed reference states (the
means of an initial parameter-averaged smoothing pass), which makes the
objective a proper joint bound of a surrogate model and every coordinate
update exact — so the reported ELBO is non-decreasing by construction.
q(x) updates solve the block-tridiagonal Gaussian information form
exactly; q(z) updates run exact chain smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp, multigammaln

from .distributions import JITTER, CategoricalBelief, GaussianBelief
from .errors import ConfigError, NumericalError, ShapeError
from .hmm import _log_forward_backward
from .rng import sample_categorical

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SldsLayer:
    """Point-parameterized switching linear dynamical system.

    dynamics: (K, D, D); control_mats: (K, D, U) or None when U = 0;
    noise: (K, D, D); rec_base: (K, K) logits [next, previous];
    rec_weights: (K, D) per-destination-mode state coefficients;
    emission: (P, D); obs_noise: (P, P).
    """

    dynamics: np.ndarray
    noise: np.ndarray
    rec_base: np.ndarray
    rec_weights: np.ndarray
    emission: np.ndarray
    obs_noise: np.ndarray
    switch_init: CategoricalBelief
    state_init: GaussianBelief
    control_mats: np.ndarray = None

    def __post_init__(self):
        dyn = np.asarray(self.dynamics, dtype=float)
        noi = np.asarray(self.noise, dtype=float)
        base = np.asarray(self.rec_base, dtype=float)
        wts = np.asarray(self.rec_weights, dtype=float)
        emit = np.asarray(self.emission, dtype=float)
        r_obs = np.asarray(self.obs_noise, dtype=float)
        k, d = dyn.shape[0], dyn.shape[1]
        if dyn.shape != (k, d, d) or noi.shape != (k, d, d):
            raise ShapeError("dynamics/noise must be (K, D, D)")
        if base.shape != (k, k) or wts.shape != (k, d):
            raise ShapeError("recurrence must be (K, K) base and (K, D) weights")
        if emit.ndim != 2 or emit.shape[1] != d:
            raise ShapeError("emission must be (obs_dim, D)")
        p = emit.shape[0]
        if r_obs.shape != (p, p):
            raise ShapeError("obs_noise must be (obs_dim, obs_dim)")
        if self.switch_init.num_categories != k or self.state_init.dim != d:
            raise ShapeError("initial beliefs inconsistent with K, D")
        cm = self.control_mats
        if cm is not None:
            cm = np.asarray(cm, dtype=float)
            if cm.ndim != 3 or cm.shape[:2] != (k, d):
                raise ShapeError("control_mats must be (K, D, control_dim)")
        for name, mats in (("noise", noi), ("obs_noise", r_obs[None])):
            for m in mats:
                try:
                    np.linalg.cholesky(m + JITTER * np.eye(m.shape[0]))
                except np.linalg.LinAlgError as exc:
                    raise ConfigError(f"{name} must be positive-definite") from exc
        object.__setattr__(self, "dynamics", dyn)
        object.__setattr__(self, "noise", noi)
        object.__setattr__(self, "rec_base", base)
        object.__setattr__(self, "rec_weights", wts)
        object.__setattr__(self, "emission", emit)
        object.__setattr__(self, "obs_noise", r_obs)
        object.__setattr__(self, "control_mats", cm)

    @property
    def num_modes(self) -> int:
        return self.dynamics.shape[0]

    @property
    def state_dim(self) -> int:
        return self.dynamics.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.emission.shape[0]

    @property
    def control_dim(self) -> int:
        return 0 if self.control_mats is None else self.control_mats.shape[2]


@dataclass
class HybridTrajectory:
    """Structured posterior over (modes, states) for one sequence.

    switch_marginals: (T, K); switch_pairwise: (T-1, K, K) as
    [t, current, next]; means/covs: smoothed Gaussian moments;
    cross_covs[t] = Cov(x_t, x_{t+1}).  elbo is the final value of the
    variational bound; elbo_trace holds one value per iteration.
    """

    switch_marginals: np.ndarray
    switch_pairwise: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    cross_covs: np.ndarray
    elbo: float
    elbo_trace: np.ndarray

    def switch_belief(self, t: int) -> CategoricalBelief:
        return CategoricalBelief(self.switch_marginals[t])

    def state_belief(self, t: int) -> GaussianBelief:
        return GaussianBelief(self.means[t], self.covs[t])


def recurrence_logits(layer: SldsLayer, prev_state) -> np.ndarray:
    """(K, K) switch logits [next, previous] at a previous continuous state."""
    x = np.asarray(prev_state, dtype=float)
    if x.shape != (layer.state_dim,):
        raise ShapeError(f"state must have dimension {layer.state_dim}")
    return layer.rec_base + (layer.rec_weights @ x)[:, None]


def _normalize_controls(layer: SldsLayer, controls, t_steps: int) -> np.ndarray:
    """Accepts length T or T-1 control sequences; returns (T-1, U)."""
    if layer.control_dim == 0:
        if controls is not None and len(np.atleast_1d(controls)) > 0:
            raise ConfigError("layer has no control input")
        return np.zeros((max(t_steps - 1, 0), 0))
    if controls is None:
        raise ConfigError("controlled layer requires a control sequence")
    u = np.atleast_2d(np.asarray(controls, dtype=float))
    if u.shape[0] == 1 and layer.control_dim == 1 and u.shape[1] > 1:
        u = u.T
    if u.shape[1] != layer.control_dim:
        raise ShapeError(f"controls must have {layer.control_dim} columns")
    if u.shape[0] == t_steps:
        u = u[: t_steps - 1]
    if u.shape[0] != t_steps - 1:
        raise ShapeError(f"need {t_steps - 1} (or {t_steps}) controls for {t_steps} steps")
    return u


def simulate(layer: SldsLayer, horizon: int, rng, controls=None):
    """Exact ancestral sample of (modes, states, observations).

    Draw order per step, which replay oracles rely on: the mode first
    (single categorical draw), then the state's standard-normal vector,
    then the observation's.  Controls may have length horizon or
    horizon-1; entry t drives the transition into step t+1.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    u = _normalize_controls(layer, controls, horizon)
    d, p = layer.state_dim, layer.obs_dim
    chol_noise = np.linalg.cholesky(layer.noise + JITTER * np.eye(d))
    chol_obs = np.linalg.cholesky(layer.obs_noise + JITTER * np.eye(p))
    chol_init = np.linalg.cholesky(layer.state_init.covariance)

    modes = np.zeros(horizon, dtype=int)
    states = np.zeros((horizon, d))
    obs = np.zeros((horizon, p))

    modes[0] = sample_categorical(rng, layer.switch_init.probs)
    states[0] = layer.state_init.mean + chol_init @ rng.standard_normal(d)
    obs[0] = layer.emission @ states[0] + chol_obs @ rng.standard_normal(p)
    for t in range(1, horizon):
        logits = recurrence_logits(layer, states[t - 1])[:, modes[t - 1]]
        probs = np.exp(logits - logsumexp(logits))
        z = sample_categorical(rng, probs)
        modes[t] = z
        drift = layer.dynamics[z] @ states[t - 1]
        if layer.control_dim:
            drift = drift + layer.control_mats[z] @ u[t - 1]
        states[t] = drift + chol_noise[z] @ rng.standard_normal(d)
        obs[t] = layer.emission @ states[t] + chol_obs @ rng.standard_normal(p)
    return modes, states, obs


def _mode_precisions(layer: SldsLayer):
    d = layer.state_dim
    inv = np.empty_like(layer.noise)
    logdets = np.empty(layer.num_modes)
    for j in range(layer.num_modes):
        c, low = cho_factor(layer.noise[j] + JITTER * np.eye(d))
        inv[j] = cho_solve((c, low), np.eye(d))
        logdets[j] = 2.0 * float(np.sum(np.log(np.diag(c))))
    return inv, logdets


def _build_chain(layer: SldsLayer, obs, resp, u, extra=None):
    """Block-tridiagonal information form of q(x) given transition
    responsibilities resp[t] = q(z_{t+1}) for t = 0..T-2.

    Returns (D_blocks, O_blocks, h, g): -2 log joint = x'Jx - 2h'x - 2g
    up to the Gaussian normalizer, J having diagonal blocks D and
    superdiagonal blocks O.  NaN observation entries are missing data.
    `extra`, when given, is a (precisions (T,D,D), linear (T,D), constant)
    triple of additional per-step quadratic log-potentials folded into
    the chain (used for evidence arriving from outside the layer).
    """
    t_steps = obs.shape[0]
    d = layer.state_dim
    qinv, qlogdet = _mode_precisions(layer)
    c_mat, r_obs = layer.emission, layer.obs_noise

    d_blocks = np.zeros((t_steps, d, d))
    o_blocks = np.zeros((max(t_steps - 1, 0), d, d))
    h = np.zeros((t_steps, d))
    g = 0.0

    p0 = layer.state_init.covariance
    c0, low0 = cho_factor(p0)
    p0_inv = cho_solve((c0, low0), np.eye(d))
    m0 = layer.state_init.mean
    d_blocks[0] += p0_inv
    h[0] += p0_inv @ m0
    g += -0.5 * (m0 @ p0_inv @ m0 + 2.0 * float(np.sum(np.log(np.diag(c0)))) + d * LOG2PI)

    if np.all(np.isfinite(obs)):
        p = layer.obs_dim
        r_full = r_obs + JITTER * np.eye(p)
        cr, low = cho_factor(r_full)
        r_inv = cho_solve((cr, low), np.eye(p))
        ctr = c_mat.T @ r_inv
        d_blocks += (ctr @ c_mat)[None]
        h += obs @ ctr.T
        g += -0.5 * (
            float(np.einsum("ta,ab,tb->", obs, r_inv, obs))
            + t_steps * (2.0 * float(np.sum(np.log(np.diag(cr)))) + p * LOG2PI)
        )
    else:
        for t in range(t_steps):
            mask = np.isfinite(obs[t])
            if not np.any(mask):
                continue
            c_t = c_mat[mask]
            r_t = r_obs[np.ix_(mask, mask)] + JITTER * np.eye(int(mask.sum()))
            cr, low = cho_factor(r_t)
            r_inv = cho_solve((cr, low), np.eye(int(mask.sum())))
            y_t = obs[t][mask]
            d_blocks[t] += c_t.T @ r_inv @ c_t
            h[t] += c_t.T @ r_inv @ y_t
            g += -0.5 * (
                y_t @ r_inv @ y_t
                + 2.0 * float(np.sum(np.log(np.diag(cr))))
                + int(mask.sum()) * LOG2PI
            )

    if t_steps > 1:
        qb = np.einsum("jab,jbc->jac", qinv, layer.dynamics)
        bqb = np.einsum("jba,jbc->jac", layer.dynamics, qb)
        d_blocks[:-1] += np.einsum("tj,jab->tab", resp, bqb)
        d_blocks[1:] += np.einsum("tj,jab->tab", resp, qinv)
        o_blocks[:] = -np.transpose(np.einsum("tj,jab->tab", resp, qb), (0, 2, 1))
        g += -0.5 * (float(np.sum(resp @ qlogdet)) + (t_steps - 1) * d * LOG2PI)
        if layer.control_dim:
            c_vecs = np.einsum("jdu,tu->tjd", layer.control_mats, u)
            h[1:] += np.einsum("tj,jab,tjb->ta", resp, qinv, c_vecs)
            h[:-1] -= np.einsum("tj,jba,tjb->ta", resp, qb, c_vecs)
            g += -0.5 * float(np.einsum("tj,tja,jab,tjb->", resp, c_vecs, qinv, c_vecs))
    if extra is not None:
        e_prec, e_lin, e_const = extra
        d_blocks += e_prec
        h += e_lin
        g += float(e_const)
    return d_blocks, o_blocks, h, g


def _solve_chain_scalar(d_blocks, o_blocks, h):
    """Specialized tridiagonal solve for one-dimensional states."""
    t_steps = d_blocks.shape[0]
    dv = d_blocks[:, 0, 0]
    ov = o_blocks[:, 0, 0] if t_steps > 1 else np.zeros(0)
    hv = h[:, 0]
    phi = np.empty(t_steps)
    rs = np.empty(t_steps)
    logdet = 0.0
    prev_phi = np.inf
    for t in range(t_steps):
        val = dv[t]
        rhs = hv[t]
        if t > 0:
            val -= ov[t - 1] * ov[t - 1] / prev_phi
            rhs -= ov[t - 1] * rs[t - 1] / prev_phi
        if val <= 0.0 or not np.isfinite(val):
            raise NumericalError(f"non-positive-definite chain block at step {t}")
        logdet += np.log(val)
        phi[t] = val
        rs[t] = rhs
        prev_phi = val
    means = np.empty(t_steps)
    covs = np.empty(t_steps)
    cross = np.empty(max(t_steps - 1, 0))
    means[-1] = rs[-1] / phi[-1]
    covs[-1] = 1.0 / phi[-1]
    for t in range(t_steps - 2, -1, -1):
        ratio = ov[t] / phi[t]
        means[t] = rs[t] / phi[t] - ratio * means[t + 1]
        covs[t] = 1.0 / phi[t] + ratio * ratio * covs[t + 1]
        cross[t] = -ratio * covs[t + 1]
    quad = float(np.sum(hv * means))
    return (
        means.reshape(-1, 1),
        covs.reshape(-1, 1, 1),
        cross.reshape(-1, 1, 1),
        float(logdet),
        quad,
    )


def _solve_chain(d_blocks, o_blocks, h):
    """Exact marginals of a block-tridiagonal Gaussian information form.

    Returns (means, covs, cross_covs, logdet_J, quad) where quad = h'mu.
    """
    t_steps, d, _ = d_blocks.shape
    if d == 1:
        return _solve_chain_scalar(d_blocks, o_blocks, h)
    eye = np.eye(d)
    phis = []
    rs = np.zeros((t_steps, d))
    logdet = 0.0
    for t in range(t_steps):
        db = d_blocks[t]
        rhs = h[t].copy()
        if t > 0:
            sol = cho_solve(phis[t - 1], o_blocks[t - 1])
            db = db - o_blocks[t - 1].T @ sol
            rhs = rhs - sol.T @ rs[t - 1]
        try:
            phis.append(cho_factor(db))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"non-positive-definite chain block at step {t}") from exc
        logdet += 2.0 * float(np.sum(np.log(np.diag(phis[t][0]))))
        rs[t] = rhs
    means = np.zeros((t_steps, d))
    means[-1] = cho_solve(phis[-1], rs[-1])
    for t in range(t_steps - 2, -1, -1):
        means[t] = cho_solve(phis[t], rs[t] - o_blocks[t] @ means[t + 1])
    covs = np.zeros((t_steps, d, d))
    cross = np.zeros((max(t_steps - 1, 0), d, d))
    covs[-1] = cho_solve(phis[-1], eye)
    for t in range(t_steps - 2, -1, -1):
        tmp = cho_solve(phis[t], o_blocks[t])
        covs[t] = cho_solve(phis[t], eye) + tmp @ covs[t + 1] @ tmp.T
        cross[t] = -tmp @ covs[t + 1]
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    quad = float(np.sum(h * means))
    return means, covs, cross, logdet, quad


def kalman_smooth(layer: SldsLayer, obs, switch_seq, controls=None, *, extra=None):
    """Exact smoothing for a fixed mode sequence.

    Returns (means, covs, cross_covs, log_likelihood).  Observation
    entries set to NaN are treated as missing.  `extra` adds per-step
    quadratic log-potentials to the chain (see `_build_chain`); the
    reported log-likelihood then includes them.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[0] == 1 and layer.obs_dim == 1 and obs.shape[1] > 1:
        obs = obs.T
    if obs.shape[1] != layer.obs_dim:
        raise ShapeError(f"observations must have {layer.obs_dim} columns")
    t_steps = obs.shape[0]
    z = np.asarray(switch_seq, dtype=int)
    if z.shape != (t_steps,):
        raise ShapeError("switch sequence length must match observations")
    if z.size and (z.min() < 0 or z.max() >= layer.num_modes):
        raise ConfigError("switch sequence contains invalid mode indices")
    u = _normalize_controls(layer, controls, t_steps)
    resp = np.zeros((max(t_steps - 1, 0), layer.num_modes))
    for t in range(t_steps - 1):
        resp[t, z[t + 1]] = 1.0
    d_blocks, o_blocks, h, g = _build_chain(layer, obs, resp, u, extra)
    means, covs, cross, logdet, quad = _solve_chain(d_blocks, o_blocks, h)
    loglik = g + 0.5 * quad - 0.5 * logdet + 0.5 * t_steps * layer.state_dim * LOG2PI
    return means, covs, cross, float(loglik)


def _transition_scores(layer: SldsLayer, means, covs, cross, u):
    """psi[t, j] = E_q(x)[log N(x_{t+1}; B_j x_t + c_j, Sigma_j)]."""
    t_steps = means.shape[0]
    d = layer.state_dim
    n = t_steps - 1
    psi = np.zeros((max(n, 0), layer.num_modes))
    if n < 1:
        return psi
    qinv, qlogdet = _mode_precisions(layer)
    m0, m1 = means[:-1], means[1:]
    m00 = covs[:-1] + m0[:, :, None] * m0[:, None, :]
    m01 = cross + m0[:, :, None] * m1[:, None, :]
    m11 = covs[1:] + m1[:, :, None] * m1[:, None, :]
    for j in range(layer.num_modes):
        b = layer.dynamics[j]
        if layer.control_dim:
            c = u @ layer.control_mats[j].T
        else:
            c = np.zeros((n, d))
        bm0 = m0 @ b.T
        bm01 = np.einsum("ab,tbc->tac", b, m01)
        w = (
            m11
            + np.einsum("ab,tbc,dc->tad", b, m00, b)
            + c[:, :, None] * c[:, None, :]
            - bm01
            - np.transpose(bm01, (0, 2, 1))
            - c[:, :, None] * m1[:, None, :]
            - m1[:, :, None] * c[:, None, :]
            + bm0[:, :, None] * c[:, None, :]
            + c[:, :, None] * bm0[:, None, :]
        )
        psi[:, j] = -0.5 * (
            qlogdet[j] + d * LOG2PI + np.einsum("tab,ab->t", w, qinv[j])
        )
    return psi


def _chain_entropy(gamma, xi):
    """Entropy of the smoothed switch chain: marginal entropies minus
    pairwise mutual informations."""
    h = -float(np.sum(np.where(gamma > 0, gamma * np.log(np.where(gamma > 0, gamma, 1.0)), 0.0)))
    if xi.shape[0]:
        denom = gamma[:-1, :, None] * gamma[1:, None, :]
        log_ratio = np.log(np.where(xi > 0, xi, 1.0)) - np.log(np.where(denom > 0, denom, 1.0))
        h -= float(np.sum(np.where(xi > 0, xi * log_ratio, 0.0)))
    return h


def _gaussian_entropy(t_steps, d, logdet_j):
    return 0.5 * t_steps * d * (1.0 + LOG2PI) - 0.5 * logdet_j


def structured_vi(
    layer: SldsLayer,
    obs,
    controls=None,
    iters: int = 10,
    *,
    ref_states=None,
    init_resp=None,
) -> HybridTrajectory:
    """Coordinate-ascent posterior over (modes, states).

    The switch-transition factor is evaluated at reference states
    `ref_states` (default: means of a parameter-averaged smoothing pass),
    so both coordinate updates are exact and the reported ELBO — the
    bound of that fixed-reference model — is non-decreasing.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[0] == 1 and layer.obs_dim == 1 and obs.shape[1] > 1:
        obs = obs.T
    if obs.shape[1] != layer.obs_dim:
        raise ShapeError(f"observations must have {layer.obs_dim} columns")
    t_steps = obs.shape[0]
    u = _normalize_controls(layer, controls, t_steps)
    k, d = layer.num_modes, layer.state_dim

    if init_resp is None:
        resp = np.full((max(t_steps - 1, 0), k), 1.0 / k)
    else:
        resp = np.asarray(init_resp, dtype=float).copy()
    if ref_states is None:
        means, covs, cross, _, _ = _solve_chain(*_build_chain(layer, obs, resp, u)[:3])
        ref_states = means
    ref_states = np.asarray(ref_states, dtype=float)

    with np.errstate(divide="ignore"):
        log_pi = np.log(layer.switch_init.probs)
    if t_steps > 1:
        logits = layer.rec_base[None] + (ref_states[:-1] @ layer.rec_weights.T)[:, :, None]
        log_trans_seq = logits - logsumexp(logits, axis=1, keepdims=True)
    else:
        log_trans_seq = np.zeros((0, k, k))

    trace = []
    gamma = None
    xi = np.zeros((max(t_steps - 1, 0), k, k))
    for it in range(iters):
        # q(x) given responsibilities
        d_blocks, o_blocks, h, g = _build_chain(layer, obs, resp, u)
        means, covs, cross, logdet, quad = _solve_chain(d_blocks, o_blocks, h)
        # q(z) given Gaussian moments
        psi = _transition_scores(layer, means, covs, cross, u)
        log_lik = np.zeros((t_steps, k))
        if t_steps > 1:
            log_lik[1:] = psi
        gamma, xi, _ = _log_forward_backward(log_pi, log_trans_seq, log_lik)
        resp = gamma[1:].copy()

        e1 = float(np.sum(gamma[0] * np.where(gamma[0] > 0, log_pi, 0.0)))
        if t_steps > 1:
            e1 += float(np.einsum("tkj,tjk->", xi, log_trans_seq))
        e2 = float(np.sum(resp * psi)) if t_steps > 1 else 0.0
        # E[log p(x_1)] + E[log p(y|x)] + control constants via g/quad split:
        # rebuild the chain at the new responsibilities for exact terms.
        d2, o2, h2, g2 = _build_chain(layer, obs, resp, u)
        m_tt = covs + means[:, :, None] * means[:, None, :]
        quad_term = float(np.einsum("tab,tab->", d2, m_tt))
        if t_steps > 1:
            m_01 = cross + means[:-1, :, None] * means[1:, None, :]
            quad_term += 2.0 * float(np.einsum("tab,tab->", o2, m_01))
        lin_term = float(np.sum(h2 * means))
        e_joint_x = g2 - 0.5 * quad_term + lin_term
        # e_joint_x already contains the mode-averaged transition term E2;
        # subtract it to isolate prior + emission expectations.
        e34 = e_joint_x - e2
        h1 = _chain_entropy(gamma, xi)
        h2_ent = _gaussian_entropy(t_steps, d, logdet)
        elbo = e1 + e2 + e34 + h1 + h2_ent
        if not np.isfinite(elbo):
            raise NumericalError(f"variational bound diverged at iteration {it}")
        trace.append(elbo)

    return HybridTrajectory(
        switch_marginals=gamma,
        switch_pairwise=xi,
        means=means,
        covs=covs,
        cross_covs=cross,
        elbo=float(trace[-1]),
        elbo_trace=np.array(trace),
    )


# --- learning -----------------------------------------------------------

_V0_SCALE = 1e-2
_PSI0_SCALE = 1e-2


def _dynamics_log_prior(layer: SldsLayer) -> float:
    """Log density of each mode's (augmented dynamics, noise) under the
    weak conjugate prior used by the M-step."""
    d = layer.state_dim
    p_aug = d + layer.control_dim
    v0 = _V0_SCALE * np.eye(p_aug)
    psi0 = _PSI0_SCALE * np.eye(d)
    nu0 = d + 2.0
    total = 0.0
    _, logdet_v0 = np.linalg.slogdet(v0)
    _, logdet_psi0 = np.linalg.slogdet(psi0)
    for j in range(layer.num_modes):
        a = layer.dynamics[j]
        if layer.control_dim:
            a = np.hstack([a, layer.control_mats[j]])
        sigma = layer.noise[j] + JITTER * np.eye(d)
        _, logdet_sigma = np.linalg.slogdet(sigma)
        sigma_inv = np.linalg.inv(sigma)
        total += (
            -0.5 * d * p_aug * LOG2PI
            - 0.5 * p_aug * logdet_sigma
            + 0.5 * d * logdet_v0
            - 0.5 * float(np.sum(sigma_inv * (a @ v0 @ a.T)))
        )
        total += (
            0.5 * nu0 * logdet_psi0
            - 0.5 * nu0 * d * np.log(2.0)
            - multigammaln(0.5 * nu0, d)
            - 0.5 * (nu0 + d + 1.0) * logdet_sigma
            - 0.5 * float(np.sum(psi0 * sigma_inv))
        )
    return float(total)


def _update_recurrence(layer, stats, steps, step_size):
    """Fixed-step gradient ascent on the concave switch objective,
    returning the best iterate visited (never worse than the start).

    stats: list of (reference states (n, D), weighted pairwise switch
    marginals (n, K, K) as [t, current, next]) pairs.
    """
    base = layer.rec_base.copy()
    wts = layer.rec_weights.copy()
    x_all = np.concatenate([s[0] for s in stats], axis=0)
    xi_all = np.concatenate([s[1] for s in stats], axis=0)
    src_mass = xi_all.sum(axis=2)

    def logit_cube(b, w):
        return b[None] + np.einsum("jd,td->tj", w, x_all)[:, :, None]

    def objective(b, w):
        logits = logit_cube(b, w)
        logz = logsumexp(logits, axis=1)
        return float(
            np.sum(xi_all * (np.transpose(logits, (0, 2, 1)) - logz[:, :, None]))
        )

    best = (objective(base, wts), base.copy(), wts.copy())
    for _ in range(steps):
        logits = logit_cube(base, wts)
        probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        diff = np.transpose(xi_all, (0, 2, 1)) - probs * src_mass[:, None, :]
        base = base + step_size * diff.sum(axis=0)
        wts = wts + step_size * np.einsum("tjk,td->jd", diff, x_all)
        val = objective(base, wts)
        if val > best[0]:
            best = (val, base.copy(), wts.copy())
    return best[1], best[2]


def vb_learn(
    layer: SldsLayer,
    data,
    sweeps: int,
    *,
    weights=None,
    inner_iters: int = 3,
    learn_recurrence: bool = True,
    rec_steps: int = 50,
    rec_step_size: float = 1e-2,
):
    """Alternate structured inference with conjugate parameter updates.

    `data` is a list of observation arrays or (obs, controls) pairs,
    optionally weighted per sequence.  Each sweep refits per-mode
    dynamics/control/noise at their joint conjugate maximum and improves
    the recurrence logits; reference states for the switch factor are
    frozen after the first pass so the objective is fixed.  Returns
    (new_layer, trace) where the trace holds the per-sweep learning
    objective (data bound plus parameter log-prior); it is
    non-decreasing.
    """
    if sweeps < 1:
        raise ConfigError("sweeps must be >= 1")
    seqs = []
    for item in data:
        if isinstance(item, tuple):
            seqs.append((np.atleast_2d(np.asarray(item[0], dtype=float)), item[1]))
        else:
            seqs.append((np.atleast_2d(np.asarray(item, dtype=float)), None))
    seqs = [
        ((o.T if o.shape[0] == 1 and layer.obs_dim == 1 and o.shape[1] > 1 else o), c)
        for o, c in seqs
    ]
    if weights is None:
        weights = np.ones(len(seqs))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(seqs),):
        raise ShapeError("one weight per sequence required")

    d = layer.state_dim
    k = layer.num_modes
    p_aug = d + layer.control_dim
    refs = [None] * len(seqs)
    warm = [None] * len(seqs)
    trace = []

    for _ in range(sweeps):
        elbo_total = 0.0
        s_xx = np.zeros((k, p_aug, p_aug))
        s_yx = np.zeros((k, d, p_aug))
        s_yy = np.zeros((k, d, d))
        n_j = np.zeros(k)
        rec_stats = []
        for i, (obs, controls) in enumerate(seqs):
            if refs[i] is None:
                # reference states frozen for all sweeps: means of a
                # parameter-averaged smoothing pass under the initial layer
                u0 = _normalize_controls(layer, controls, obs.shape[0])
                tmp_resp = np.full((max(obs.shape[0] - 1, 0), k), 1.0 / k)
                refs[i] = _solve_chain(*_build_chain(layer, obs, tmp_resp, u0)[:3])[0]
            traj = structured_vi(
                layer,
                obs,
                controls,
                iters=inner_iters,
                ref_states=refs[i],
                init_resp=warm[i],
            )
            warm[i] = traj.switch_marginals[1:].copy()
            elbo_total += weights[i] * traj.elbo

            u = _normalize_controls(layer, controls, obs.shape[0])
            n = obs.shape[0] - 1
            if n < 1:
                continue
            m0, m1 = traj.means[:-1], traj.means[1:]
            m00 = traj.covs[:-1] + m0[:, :, None] * m0[:, None, :]
            m01 = traj.cross_covs + m0[:, :, None] * m1[:, None, :]
            m11 = traj.covs[1:] + m1[:, :, None] * m1[:, None, :]
            aug_xx = np.zeros((n, p_aug, p_aug))
            aug_xx[:, :d, :d] = m00
            aug_yx = np.zeros((n, d, p_aug))
            aug_yx[:, :, :d] = np.transpose(m01, (0, 2, 1))
            if layer.control_dim:
                aug_xx[:, :d, d:] = m0[:, :, None] * u[:, None, :]
                aug_xx[:, d:, :d] = np.transpose(aug_xx[:, :d, d:], (0, 2, 1))
                aug_xx[:, d:, d:] = u[:, :, None] * u[:, None, :]
                aug_yx[:, :, d:] = m1[:, :, None] * u[:, None, :]
            r = weights[i] * traj.switch_marginals[1:]
            n_j += r.sum(axis=0)
            s_xx += np.einsum("tj,tab->jab", r, aug_xx)
            s_yx += np.einsum("tj,tab->jab", r, aug_yx)
            s_yy += np.einsum("tj,tab->jab", r, m11)
            rec_stats.append((refs[i][:-1], weights[i] * traj.switch_pairwise))

        trace.append(elbo_total + _dynamics_log_prior(layer))

        v0 = _V0_SCALE * np.eye(p_aug)
        psi0 = _PSI0_SCALE * np.eye(d)
        nu0 = d + 2.0
        new_dyn = np.empty_like(layer.dynamics)
        new_ctrl = None if layer.control_dim == 0 else np.empty_like(layer.control_mats)
        new_noise = np.empty_like(layer.noise)
        for j in range(k):
            v_post = v0 + s_xx[j]
            m_post = np.linalg.solve(v_post, s_yx[j].T).T
            psi_post = psi0 + s_yy[j] - m_post @ v_post @ m_post.T
            psi_post = 0.5 * (psi_post + psi_post.T)
            nu_post = nu0 + n_j[j]
            new_dyn[j] = m_post[:, :d]
            if layer.control_dim:
                new_ctrl[j] = m_post[:, d:]
            new_noise[j] = psi_post / (nu_post + d + p_aug + 1.0) + JITTER * np.eye(d)
        new_base, new_wts = layer.rec_base, layer.rec_weights
        if learn_recurrence and k > 1 and rec_stats:
            new_base, new_wts = _update_recurrence(layer, rec_stats, rec_steps, rec_step_size)
        layer = replace(
            layer,
            dynamics=new_dyn,
            control_mats=new_ctrl,
            noise=new_noise,
            rec_base=new_base,
            rec_weights=new_wts,
        )
    return layer, np.array(trace)
