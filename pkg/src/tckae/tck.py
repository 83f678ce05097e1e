"""
Time series cluster kernel (TCK).

An ensemble of diagonal Gaussian mixtures is fitted with MAP-EM, each member
on a random time segment, attribute subset and training subsample, with a
random number of components and random prior hyperparameters. Missing cells
are marginalized out: they contribute nothing to likelihoods or sufficient
statistics. The kernel between two MTS is the sum over members of the inner
product of their posterior cluster-assignment vectors.

Priors of one member, for attribute ``a`` and segment step ``t``:

* component means: ``mu_g[:, a] ~ N(m0[:, a], (s0[a]^2 / a0) * R)`` where
  ``R`` is a unit-diagonal Gaussian correlation over the segment's time axis
  with width ``n0 * L``. The coupling smooths mean updates in time while
  keeping every M-step an exact conditional maximizer.
* component variances: log-penalty ``-(b0/2) log s2 - b0 s0[a]^2 / (2 s2)``,
  which shrinks the update to ``(S + b0 s0^2) / (W + b0)``.

``m0`` and ``s0`` are the observed-data mean (per step and attribute) and
variance (per attribute) of the member's training view.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DataFormatError, TckFitError
from .mts import Standardization, atomic_write_text

logger = logging.getLogger(__name__)

__all__ = [
    "TckConfig",
    "MemberSpec",
    "GmmMember",
    "TckModel",
    "sample_member_configs",
    "log_likelihood_observed",
    "posteriors",
    "map_em_fit",
    "fit_tck",
    "kernel_matrix",
]

_LOG_2PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-6
COLLAPSE_WEIGHT = 1e-8
MAX_RESEEDS = 3
TIME_JITTER = 1e-2


@dataclass(frozen=True)
class TckConfig:
    max_components: int = 10
    realizations: int = 10
    min_segment: int | None = None  # None -> min(6, T)
    max_segment: int | None = None  # None -> T
    min_attributes: int = 2
    subsample: float = 0.8
    a0_range: tuple[float, float] = (0.1, 1.0)
    b0_range: tuple[float, float] = (0.1, 1.0)
    n0_range: tuple[float, float] = (0.05, 0.2)
    em_max_iters: int = 20
    em_tol: float = 1e-5
    master_seed: int = 0

    def __post_init__(self):
        if self.max_components < 2:
            raise ValueError("max_components must be >= 2")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")
        if self.min_segment is not None and self.min_segment < 2:
            raise ValueError("min_segment must be >= 2")
        if self.min_attributes < 1:
            raise ValueError("min_attributes must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        for name in ("a0_range", "b0_range", "n0_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ValueError(f"{name} must be a nonempty interval with positive endpoints")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.em_max_iters < 1:
            raise ValueError("em_max_iters must be >= 1")

    @property
    def n_members(self):
        return (self.max_components - 1) * self.realizations

    def to_dict(self):
        d = asdict(self)
        for name in ("a0_range", "b0_range", "n0_range"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for name in ("a0_range", "b0_range", "n0_range"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class MemberSpec:
    index: int
    n_components: int
    attributes: tuple[int, ...]
    segment: tuple[int, int]
    a0: float
    b0: float
    n0: float
    subsample: np.ndarray
    seed: int

    @property
    def segment_length(self):
        return self.segment[1] - self.segment[0]


@dataclass(eq=False)
class GmmMember:
    spec: MemberSpec
    weights: np.ndarray
    means: np.ndarray      # G x L x A
    variances: np.ndarray  # G x L x A
    objective_trace: list[float] = field(default_factory=list)
    # trace indices where a component re-seed started a fresh monotone run
    restarts: list[int] = field(default_factory=list)

    @property
    def n_components(self):
        return self.weights.shape[0]

    def to_dict(self):
        s = self.spec
        return {
            "index": s.index,
            "n_components": s.n_components,
            "attributes": list(s.attributes),
            "segment": list(s.segment),
            "a0": s.a0, "b0": s.b0, "n0": s.n0,
            "subsample": s.subsample.tolist(),
            "seed": s.seed,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "objective_trace": list(self.objective_trace),
            "restarts": list(self.restarts),
        }

    @classmethod
    def from_dict(cls, d):
        spec = MemberSpec(d["index"], d["n_components"], tuple(d["attributes"]),
                          tuple(d["segment"]), d["a0"], d["b0"], d["n0"],
                          np.asarray(d["subsample"], dtype=np.int64), d["seed"])
        return cls(spec, np.asarray(d["weights"], dtype=np.float64),
                   np.asarray(d["means"], dtype=np.float64),
                   np.asarray(d["variances"], dtype=np.float64),
                   list(d.get("objective_trace", [])), list(d.get("restarts", [])))


@dataclass(eq=False)
class TckModel:
    members: list[GmmMember]
    config: TckConfig
    stats: Standardization | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("a TCK model needs at least one member")

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "stats": None if self.stats is None else self.stats.to_dict(),
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d):
        stats = None if d.get("stats") is None else Standardization.from_dict(d["stats"])
        return cls([GmmMember.from_dict(m) for m in d["members"]],
                   TckConfig.from_dict(d["config"]), stats)

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except FileNotFoundError:
            raise DataFormatError(f"model file not found: {path}") from None
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: malformed TCK model ({exc})") from None


# --------------------------------------------------------------------------
# Ensemble sampling
# --------------------------------------------------------------------------

def _member_seed(master_seed, index):
    ss = np.random.SeedSequence([int(master_seed), 0x7C3, int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def sample_member_configs(cfg, n_steps, n_vars, n_samples):
    """Draw the ``(C - 1) * R`` member specs for a dataset of the given shape."""
    min_seg = min(6, n_steps) if cfg.min_segment is None else cfg.min_segment
    max_seg = n_steps if cfg.max_segment is None else min(cfg.max_segment, n_steps)
    if min_seg < 2 or min_seg > max_seg:
        raise ValueError(
            f"segment length range [{min_seg}, {max_seg}] infeasible for T={n_steps}")
    min_attr = max(1, cfg.min_attributes)
    if min_attr > n_vars:
        raise ValueError(f"min_attributes={min_attr} infeasible for V={n_vars}")
    if n_samples < cfg.max_components:
        raise ValueError(
            f"{n_samples} training samples cannot support {cfg.max_components} components")

    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.master_seed), 0x5EC]))
    n_sub = min(n_samples, max(cfg.max_components, round(cfg.subsample * n_samples)))
    specs = []
    for g in range(2, cfg.max_components + 1):
        for _ in range(cfg.realizations):
            length = int(rng.integers(min_seg, max_seg + 1))
            start = int(rng.integers(0, n_steps - length + 1))
            n_attr = int(rng.integers(min_attr, n_vars + 1))
            attrs = tuple(sorted(int(a) for a in rng.choice(n_vars, size=n_attr, replace=False)))
            a0 = float(rng.uniform(*cfg.a0_range))
            b0 = float(rng.uniform(*cfg.b0_range))
            n0 = float(rng.uniform(*cfg.n0_range))
            sub = np.sort(rng.choice(n_samples, size=n_sub, replace=False)).astype(np.int64)
            index = len(specs)
            specs.append(MemberSpec(index, g, attrs, (start, start + length), a0, b0, n0,
                                    sub, _member_seed(cfg.master_seed, index)))
    return specs


# --------------------------------------------------------------------------
# Likelihood and posteriors
# --------------------------------------------------------------------------

def log_likelihood_observed(x, mask, mean, var):
    """Sum over observed cells of ``log N(x | mean, var)``; missing cells add 0."""
    mask = np.asarray(mask, dtype=bool)
    x = np.where(mask, x, 0.0)
    diff = x - mean
    terms = np.log(var) + diff * diff / var + _LOG_2PI
    return float(-0.5 * np.sum(np.where(mask, terms, 0.0)))


def _view(spec, ds):
    """Member view as flattened (N, L*A) arrays, unobserved cells zeroed."""
    t0, t1 = spec.segment
    attrs = list(spec.attributes)
    mask = ds.mask[:, t0:t1, :][:, :, attrs]
    x = np.where(mask, ds.values[:, t0:t1, :][:, :, attrs], 0.0)
    n = x.shape[0]
    return (np.ascontiguousarray(x.reshape(n, -1)),
            np.ascontiguousarray(mask.reshape(n, -1)))


def _log_normalize(logp):
    top = logp.max(axis=1, keepdims=True)
    p = np.exp(logp - top)
    total = p.sum(axis=1, keepdims=True)
    return p / total, (top + np.log(total))[:, 0]


def _estep(x, m, weights, mu, var):
    ll = _kernels.masked_loglik(x, m, mu, var)
    with np.errstate(divide="ignore"):
        logp = ll + np.log(weights)[None, :]
    resp, lse = _log_normalize(logp)
    return resp, float(lse.sum())


def posteriors(member, ds):
    """N x G matrix of component responsibilities for each MTS of ``ds``."""
    x, m = _view(member.spec, ds)
    G = member.n_components
    resp, _ = _estep(x, m, member.weights, member.means.reshape(G, -1),
                     member.variances.reshape(G, -1))
    return resp


# --------------------------------------------------------------------------
# MAP-EM
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Prior:
    mean: np.ndarray        # L x A
    var: np.ndarray         # A
    precision: np.ndarray   # A x L x L (zero when a0 == 0)
    logdet: np.ndarray      # A
    a0: float
    b0: float


def time_correlation(length, width):
    """Unit-diagonal Gaussian correlation over ``length`` steps, with jitter."""
    t = np.arange(length, dtype=np.float64)
    if width > 0:
        R = np.exp(-0.5 * ((t[:, None] - t[None, :]) / width) ** 2)
    else:
        R = np.eye(length)
    return (R + TIME_JITTER * np.eye(length)) / (1.0 + TIME_JITTER)


def _build_prior(spec, x, m):
    L, A = spec.segment_length, len(spec.attributes)
    x3 = x.reshape(-1, L, A)
    m3 = m.reshape(-1, L, A).astype(np.float64)

    cnt_a = m3.sum(axis=(0, 1))
    sum_a = x3.sum(axis=(0, 1))
    mean_a = np.divide(sum_a, cnt_a, out=np.zeros(A), where=cnt_a > 0)
    dev = np.where(m3 > 0, x3 - mean_a, 0.0)
    var_a = np.divide((dev ** 2).sum(axis=(0, 1)), cnt_a, out=np.ones(A), where=cnt_a >= 2)
    var_a = np.maximum(var_a, VAR_FLOOR)

    cnt_ta = m3.sum(axis=0)
    mean_ta = np.where(cnt_ta > 0, x3.sum(axis=0) / np.maximum(cnt_ta, 1.0), mean_a[None, :])

    if spec.a0 > 0:
        R = time_correlation(L, spec.n0 * L)
        R_inv = np.linalg.inv(R)
        R_inv = 0.5 * (R_inv + R_inv.T)
        _, logdet_r = np.linalg.slogdet(R)
        scale = spec.a0 / var_a
        precision = scale[:, None, None] * R_inv[None, :, :]
        logdet = L * np.log(scale) - logdet_r
    else:
        precision = np.zeros((A, L, L))
        logdet = np.zeros(A)
    return _Prior(mean_ta, var_a, precision, logdet, spec.a0, spec.b0)


def _log_prior(prior, mu, var):
    G = mu.shape[0]
    A = prior.var.shape[0]
    L = prior.mean.shape[0]
    total = 0.0
    if prior.a0 > 0:
        dev = mu.reshape(G, L, A) - prior.mean[None]
        quad = np.einsum("gta,ats,gsa->", dev, prior.precision, dev)
        total += -0.5 * quad + 0.5 * G * (prior.logdet.sum() - A * L * _LOG_2PI)
    if prior.b0 > 0:
        v = var.reshape(G, L, A)
        total += float(np.sum(-0.5 * prior.b0 * (np.log(v) + prior.var[None, None, :] / v)))
    return float(total)


def _update_means(W, S1, var, prior, old_mu):
    """Exact maximizer of the expected complete log posterior in the means.

    W, S1, var, old_mu are G x (L*A): responsibility-weighted observation
    counts, weighted sums, current variances, previous means.
    """
    G = W.shape[0]
    L, A = prior.mean.shape
    if prior.a0 == 0:
        return np.where(W > 0, S1 / np.where(W > 0, W, 1.0), old_mu)
    d = (W / var).reshape(G, L, A)                 # diagonal data precision
    h = (S1 / var).reshape(G, L, A)
    P = prior.precision                            # A x L x L
    Pm = np.einsum("ats,sa->at", P, prior.mean)    # A x L
    lhs = np.broadcast_to(P, (G, A, L, L)).copy()
    idx = np.arange(L)
    lhs[:, :, idx, idx] += d.transpose(0, 2, 1)
    rhs = h.transpose(0, 2, 1) + Pm[None]
    mu = np.linalg.solve(lhs, rhs[..., None])[..., 0]  # G x A x L
    return np.ascontiguousarray(mu.transpose(0, 2, 1).reshape(G, L * A))


def _update_vars(W, S, prior, old_var):
    L, A = prior.mean.shape
    s0 = np.tile(prior.var, L)[None, :]
    num = S + prior.b0 * s0
    den = W + prior.b0
    new = np.where(den > 0, num / np.where(den > 0, den, 1.0), old_var)
    return np.maximum(new, VAR_FLOOR)


def _init_component(x_row, m_row, prior_mean_flat):
    return np.where(m_row, x_row, prior_mean_flat)


def map_em_fit(spec, train, max_iters=20, tol=1e-5, init=None):
    """Fit one ensemble member with MAP-EM on its view of ``train``.

    ``init`` optionally overrides the initial ``(weights, means, variances)``
    (means/variances shaped G x L x A); by default means are copied from G
    distinct random training MTS, variances start at the prior variance and
    weights are uniform.
    """
    G, L, A = spec.n_components, spec.segment_length, len(spec.attributes)
    if len(spec.subsample) == 0:
        raise TckFitError("empty training subsample", member=spec.index)
    sub = train.subset(np.asarray(spec.subsample))
    x, m = _view(spec, sub)
    n = x.shape[0]
    prior = _build_prior(spec, x, m)
    prior_mean_flat = prior.mean.reshape(-1)
    rng = np.random.default_rng(spec.seed)

    if init is None:
        if n < G:
            raise TckFitError(f"{n} samples cannot seed {G} components", member=spec.index)
        picks = rng.choice(n, size=G, replace=False)
        mu = np.stack([_init_component(x[i], m[i], prior_mean_flat) for i in picks])
        var = np.tile(np.tile(prior.var, L), (G, 1))
        weights = np.full(G, 1.0 / G)
    else:
        weights, mu, var = (np.array(a, dtype=np.float64) for a in init)
        mu, var = mu.reshape(G, -1), var.reshape(G, -1)

    resp, ll = _estep(x, m, weights, mu, var)
    obj = ll + _log_prior(prior, mu, var)
    trace, restarts = [obj], []
    reseeds = 0
    mf = m.astype(np.float64)

    for _ in range(max_iters):
        Nk = resp.sum(axis=0)
        weights = Nk / n
        collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
        if collapsed.size:
            reseeds += 1
            if reseeds > MAX_RESEEDS:
                raise TckFitError(
                    f"component collapse persisted after {MAX_RESEEDS} re-seeds", member=spec.index)
            logger.debug("member %d: re-seeding components %s", spec.index, collapsed.tolist())
            for g in collapsed:
                i = int(rng.integers(n))
                mu[g] = _init_component(x[i], m[i], prior_mean_flat)
                var[g] = np.tile(prior.var, L)
                weights[g] = 1.0 / G
            weights = weights / weights.sum()
            resp, ll = _estep(x, m, weights, mu, var)
            obj = ll + _log_prior(prior, mu, var)
            restarts.append(len(trace))
            trace.append(obj)
            continue

        W = resp.T @ mf
        S1 = resp.T @ x
        mu = _update_means(W, S1, var, prior, mu)
        S = _kernels.weighted_sq_dev(resp, x, m, mu)
        var = _update_vars(W, S, prior, var)

        resp, ll = _estep(x, m, weights, mu, var)
        new_obj = ll + _log_prior(prior, mu, var)
        if not np.isfinite(new_obj):
            raise TckFitError("MAP objective became non-finite", member=spec.index)
        trace.append(new_obj)
        improved = new_obj - obj
        obj = new_obj
        if improved < tol:
            break

    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var)) and np.all(np.isfinite(weights))):
        raise TckFitError("non-finite parameters after EM", member=spec.index)
    return GmmMember(spec, weights, mu.reshape(G, L, A), var.reshape(G, L, A),
                     [float(v) for v in trace], restarts)


def fit_tck(train, cfg, stats=None, n_jobs=1):
    """Fit every ensemble member on ``train`` (already standardized).

    ``stats`` is the standardization the caller applied; it is stored on the
    model so new data can be brought to the same scale.
    """
    if len(train) == 0:
        raise ValueError("cannot fit TCK on an empty dataset")
    specs = sample_member_configs(cfg, train.n_steps, train.n_vars, len(train))

    def fit_one(spec):
        return map_em_fit(spec, train, cfg.em_max_iters, cfg.em_tol)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            members = list(pool.map(fit_one, specs))
    else:
        members = [fit_one(s) for s in specs]
    logger.info("fitted %d TCK members", len(members))
    return TckModel(members, cfg, stats)


def kernel_matrix(model, a, b=None):
    """|a| x |b| TCK Gram matrix; ``b=None`` gives the symmetric |a| x |a| case."""
    square = b is None or b is a
    K = None
    for member in model.members:
        Pa = posteriors(member, a)
        Pb = Pa if square else posteriors(member, b)
        part = Pa @ Pb.T
        K = part if K is None else K + part
    if square:
        K = 0.5 * (K + K.T)
    return K
