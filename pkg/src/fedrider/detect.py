"""Free-rider detectors for one round of submitted updates.

Four scoring rules over the same flattened update vectors:

- std: population standard deviation of the raw vector.
- autoencoder: reconstruction error after training a small autoencoder on
  the round's batch itself.
- dagmm: joint autoencoder + soft Gaussian mixture; the anomaly score is the
  sample energy -log p(z) under the learned mixture in the space
  z = [bottleneck embedding, reconstruction features].
- stddagmm: dagmm with the input vector's STD appended as a third
  reconstruction feature, which restores separation when an attacker's
  update matches honest updates in direction but not in spread.

Detectors are trained fresh per round on that round's batch only, keyed by
an explicit seed, so a detection result is a pure function of
(round data, config, seed). Update magnitudes are ~1e-3, so inputs are
rescaled by the batch's pooled STD before training (switchable); without it
reconstruction losses sit at ~1e-8 and training stalls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numkit as nk

__all__ = [
    "DetectError",
    "OneClassInputError",
    "CovarianceError",
    "FlatUpdate",
    "FeatureVector",
    "GMMParams",
    "DetectorOutput",
    "RankReport",
    "DetectorConfig",
    "flatten",
    "unflatten",
    "std_stat",
    "autoencoder_score",
    "gmm_energy",
    "gmm_from_memberships",
    "dagmm_score",
    "stddagmm_score",
    "auc",
    "rank_report",
]

LOG_2PI = math.log(2.0 * math.pi)


class DetectError(Exception):
    """Base class for detector failures."""


class OneClassInputError(DetectError):
    """AUC needs at least one positive and one negative."""


class CovarianceError(DetectError):
    """A mixture covariance is unusable even after regularization."""


@dataclass(frozen=True)
class FlatUpdate:
    """One client's update as a single row-major vector."""

    client_id: int
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        object.__setattr__(self, "vector", vec)
        if vec.ndim != 1:
            raise DetectError(f"flat update must be 1-D, got {vec.shape}")


@dataclass(frozen=True)
class FeatureVector:
    """Low-dimensional embedding z_c plus reconstruction features z_r."""

    z_c: np.ndarray
    z_r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z_c", np.asarray(self.z_c, dtype=np.float64))
        object.__setattr__(self, "z_r", np.asarray(self.z_r, dtype=np.float64))
        if self.z_r.size not in (2, 3):
            raise DetectError("z_r carries 2 features (3 with the STD feature)")

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.z_c, self.z_r])


@dataclass(frozen=True)
class GMMParams:
    """Mixture weights, means and covariances in z-space."""

    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64))
        k, d = self.mu.shape if self.mu.ndim == 2 else (0, 0)
        if self.phi.shape != (k,) or self.sigma.shape != (k, d, d):
            raise DetectError(f"inconsistent GMM shapes phi={self.phi.shape} "
                              f"mu={self.mu.shape} sigma={self.sigma.shape}")
        if np.any(self.phi < 0) or abs(float(self.phi.sum()) - 1.0) > 1e-9:
            raise DetectError("mixture weights must be non-negative and sum to 1")

    @property
    def K(self) -> int:
        return self.phi.size

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


@dataclass(frozen=True)
class DetectorOutput:
    """One finite score per submitted update, higher = more suspicious.

    The autoencoder is the known exception: a free rider can reconstruct
    unusually well and land at the score minimum instead."""

    kind: str
    round_index: int
    client_ids: np.ndarray
    scores: np.ndarray
    epoch_losses: tuple = ()
    features: tuple | None = None
    gmm: GMMParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "client_ids", np.asarray(self.client_ids))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        if self.scores.shape != self.client_ids.shape:
            raise DetectError("one score per client required")
        if not np.all(np.isfinite(self.scores)):
            raise DetectError(f"{self.kind}: non-finite scores")

    def score_of(self, client_id: int) -> float:
        idx = np.nonzero(self.client_ids == client_id)[0]
        if idx.size != 1:
            raise DetectError(f"client {client_id} not scored exactly once")
        return float(self.scores[idx[0]])


# ------------------------------------------------------------- flatten / std

def flatten(update, client_id: int | None = None) -> FlatUpdate:
    """Row-major concatenation of an update's layers into one vector."""
    if hasattr(update, "grad"):
        return FlatUpdate(update.client_id, np.array(update.grad.flat))
    if isinstance(update, (list, tuple)):
        vec = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1)
                              for a in update])
        return FlatUpdate(client_id if client_id is not None else 0, vec)
    vec = np.asarray(update, dtype=np.float64).reshape(-1).copy()
    return FlatUpdate(client_id if client_id is not None else 0, vec)


def unflatten(vector, shapes: Sequence[tuple]) -> list[np.ndarray]:
    vec = vector.vector if isinstance(vector, FlatUpdate) else np.asarray(vector)
    out, offset = [], 0
    for s in shapes:
        n = int(np.prod(s, dtype=np.int64))
        out.append(vec[offset:offset + n].reshape(s))
        offset += n
    if offset != vec.size:
        raise DetectError(f"vector length {vec.size} does not fold into {shapes}")
    return out


def std_stat(v) -> float:
    """Population standard deviation of the flattened update."""
    vec = v.vector if isinstance(v, FlatUpdate) else np.asarray(v, dtype=np.float64)
    if vec.size < 2:
        raise DetectError("std_stat needs at least 2 components")
    return float(vec.std())


# ----------------------------------------------------------------- gmm math

def gmm_from_memberships(z: np.ndarray, gamma: np.ndarray, eps: float = 1e-6) -> GMMParams:
    """Soft-membership moment estimates: phi, mu, sigma (+eps*I) from weights.

    With uniform memberships this reduces to the batch's plain mean and
    population covariance for every component.
    """
    z = np.asarray(z, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    n, d = z.shape
    k = gamma.shape[1]
    if gamma.shape[0] != n:
        raise DetectError("memberships and samples disagree")
    denom = gamma.sum(axis=0)
    if np.any(denom <= 0):
        raise DetectError("a mixture component has zero total membership")
    phi = gamma.mean(axis=0)
    mu = (gamma.T @ z) / denom[:, None]
    sigma = np.empty((k, d, d))
    for ki in range(k):
        dev = z - mu[ki]
        sigma[ki] = (gamma[:, ki, None] * dev).T @ dev / denom[ki] + eps * np.eye(d)
    return GMMParams(phi, mu, sigma)


def gmm_energy(z, gmm: GMMParams) -> float:
    """E(z) = -log sum_k phi_k N(z; mu_k, sigma_k), via Cholesky + log-sum-exp."""
    vec = z.z if isinstance(z, FeatureVector) else np.asarray(z, dtype=np.float64)
    if vec.shape != (gmm.dim,):
        raise DetectError(f"z has shape {vec.shape}, mixture dim is {gmm.dim}")
    log_terms = []
    for k in range(gmm.K):
        if gmm.phi[k] == 0.0:
            continue
        try:
            chol = np.linalg.cholesky(gmm.sigma[k])
        except np.linalg.LinAlgError as err:
            raise CovarianceError(f"component {k} covariance is not positive "
                                  f"definite ({err})") from err
        y = np.linalg.solve(chol, vec - gmm.mu[k])
        log_norm = -0.5 * gmm.dim * LOG_2PI - np.sum(np.log(np.diag(chol)))
        log_terms.append(math.log(gmm.phi[k]) - 0.5 * float(y @ y) + log_norm)
    if not log_terms:
        raise DetectError("mixture has no component with positive weight")
    m = max(log_terms)
    return float(-(m + math.log(sum(math.exp(t - m) for t in log_terms))))


# ------------------------------------------------------------- preprocessing

def _batch_matrix(batch: Sequence[FlatUpdate]) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) < 2:
        raise DetectError("a detection batch needs at least 2 updates")
    lengths = {b.vector.size for b in batch}
    if len(lengths) != 1:
        raise DetectError(f"updates of mixed lengths: {sorted(lengths)}")
    x = np.stack([b.vector for b in batch])
    ids = np.array([b.client_id for b in batch])
    return x, ids


def _scale_input(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return x
    if mode == "pooled_std":
        s = float(x.std())
        return x / (s if s > 1e-30 else 1.0)
    raise DetectError(f"unknown input_scale {mode!r}")


def _canonical_order(x: np.ndarray) -> np.ndarray:
    """Row order by vector content (first component as primary key).

    Training reduces over the batch axis, and float sums depend on operand
    order; processing rows in content order makes every score a pure
    function of the submitted vectors, bit-identical under any permutation
    of the batch. Equal rows are interchangeable, so ties are harmless.
    """
    return np.lexsort(x.T[::-1])


def _seed_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# -------------------------------------------------------------- autoencoder

def _ae_sizes(input_dim: int, hidden: Sequence[int]) -> list[int]:
    hidden = list(hidden)
    if not hidden:
        raise DetectError("autoencoder needs at least one hidden width")
    if min(hidden) >= input_dim:
        raise DetectError(f"degenerate architecture: bottleneck {min(hidden)} "
                          f">= input dim {input_dim}")
    return [input_dim, *hidden, *reversed(hidden[:-1]), input_dim]


def _make_stepper(params, optimizer: str, learning_rate: float):
    """Return a closure applying one optimizer update to `params` in place."""
    if optimizer == "adam":
        state = nk.AdamState(params, nk.AdamConfig(learning_rate=learning_rate))
        return lambda grads: nk.adam_step(params, grads, state)
    if optimizer == "sgd":
        return lambda grads: nk.sgd_step(params, grads, learning_rate)
    raise DetectError(f"unknown optimizer {optimizer!r}")


def autoencoder_score(batch: Sequence[FlatUpdate], arch: Sequence[int] = (32, 4),
                      train: nk.SgdConfig | None = None, seed=0, *,
                      round_index: int = 0, input_scale: str = "pooled_std",
                      optimizer: str = "sgd") -> DetectorOutput:
    """Train an autoencoder on the batch; score = per-sample mean squared
    reconstruction error."""
    x_raw, ids = _batch_matrix(batch)
    order = _canonical_order(x_raw)
    x = _scale_input(x_raw[order], input_scale)
    if train is None:
        train = nk.SgdConfig(learning_rate=0.01, batch_size=len(batch), epochs=100)
    net = nk.Mlp(_seed_rng(seed), _ae_sizes(x.shape[1], arch))
    xt = nk.tensor(x)
    step = _make_stepper(net.params, optimizer, train.learning_rate)
    losses = []
    for _ in range(train.epochs):
        loss = nk.mse(net(xt), xt)
        losses.append(loss.item())
        grads = nk.backward(loss, params=net.params)
        step([grads[p] for p in net.params])
    rec = net(xt).values
    scores = np.empty(len(batch))
    scores[order] = ((x - rec) ** 2).mean(axis=1)
    return DetectorOutput(kind="autoencoder", round_index=round_index,
                          client_ids=ids, scores=scores,
                          epoch_losses=tuple(losses))


# -------------------------------------------------------------------- dagmm

class _DagmmNets:
    """Compression autoencoder plus membership estimation network."""

    def __init__(self, input_dim: int, arch: Sequence[int], k: int, with_std: bool,
                 rng: np.random.Generator):
        hidden, bottleneck, est_hidden = arch
        if bottleneck >= input_dim:
            raise DetectError(f"degenerate architecture: bottleneck {bottleneck} "
                              f">= input dim {input_dim}")
        self.enc1 = nk.Dense(rng, input_dim, hidden, activation="tanh")
        # wide inputs at unit entry variance would start tanh units at
        # |preactivation| ~ sqrt(fan_in * 2 / (fan_in + fan_out)) > 1, a
        # saturated binary code that erases within-batch structure; damp the
        # first layer so early codes stay in the responsive range
        self.enc1.W.values *= 0.35
        self.enc2 = nk.Dense(rng, hidden, bottleneck, activation="tanh")
        self.dec1 = nk.Dense(rng, bottleneck, hidden, activation="tanh")
        self.dec2 = nk.Dense(rng, hidden, input_dim, activation="linear")
        self.z_r_dim = 3 if with_std else 2
        self.z_dim = bottleneck + self.z_r_dim
        self.est = nk.Mlp(rng, [self.z_dim, est_hidden, k],
                          hidden_activation="tanh", final_activation="linear")
        # damp the softmax head so memberships start near-uniform: the first
        # mixture fit is then the pooled Gaussian and component balance comes
        # from training, not from init luck (a lopsided random start can hand
        # 80% of the weight to one component and bury a lone outlier in it)
        head = self.est.layers[-1]
        head.W.values *= 0.1
        head.b.values *= 0.1

    @property
    def params(self) -> list[nk.Tensor]:
        out = []
        for block in (self.enc1, self.enc2, self.dec1, self.dec2):
            out.extend(block.params)
        out.extend(self.est.params)
        return out


def _standardize_column(col: nk.Tensor) -> nk.Tensor:
    mean = nk.reduce_mean(col)
    dev = nk.sub(col, mean)
    var = nk.reduce_mean(nk.mul(dev, dev))
    sd = nk.sqrt(nk.add(var, nk.tensor(1e-12)))
    return nk.div(dev, sd)


def _winsorize(col: nk.Tensor, c: float) -> nk.Tensor:
    # clamp(col, -c, c) built from relu so the graph keeps zero gradient
    # outside the band: a lone extreme sample stops steering the fit
    hi = nk.tensor(c)
    lo = nk.tensor(-c)
    capped = nk.sub(col, nk.relu(nk.sub(col, hi)))
    return nk.add(capped, nk.relu(nk.sub(lo, capped)))


def _as_scalar(t: nk.Tensor) -> nk.Tensor:
    return nk.reshape(t, ())


def _rows_scaled(mat: nk.Tensor, row_weights: nk.Tensor, n: int) -> nk.Tensor:
    # multiply row i of mat^T by weight i: transpose trick keeps broadcasting
    # within the row-vector rule
    return nk.mul(mat, nk.reshape(row_weights, (1, n)))


class _DagmmRun:
    """One jointly trained DAGMM instance on a fixed batch."""

    def __init__(self, x: np.ndarray, arch, k: int, with_std: bool,
                 lambda1: float, lambda2: float, eps: float,
                 standardize_zr: bool, seed, zr_clip: float | None = None):
        self.x = x
        self.n, self.input_dim = x.shape
        self.k = k
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.eps = eps
        self.standardize_zr = standardize_zr
        self.zr_clip = zr_clip
        self.with_std = with_std
        self.nets = _DagmmNets(self.input_dim, arch, k, with_std, _seed_rng(seed))
        self.xt = nk.tensor(x)
        # constants reused every epoch
        norm_x = np.linalg.norm(x, axis=1)
        self.inv_norm_x = nk.tensor(1.0 / np.maximum(norm_x, 1e-12))
        self.std_feature = nk.tensor(x.std(axis=1))
        self.eye_z = None

    def features(self) -> tuple[nk.Tensor, nk.Tensor]:
        """Forward pass to (z, gamma), both as graph tensors."""
        nets = self.nets
        z_c = nets.enc2(nets.enc1(self.xt))
        rec = nets.dec2(nets.dec1(z_c))
        diff = nk.sub(self.xt, rec)
        dist = nk.sqrt(nk.add(nk.reduce_sum(nk.mul(diff, diff), axis=1),
                              nk.tensor(1e-24)))
        rel_euclid = nk.mul(dist, self.inv_norm_x)
        dot = nk.reduce_sum(nk.mul(self.xt, rec), axis=1)
        rec_norm = nk.sqrt(nk.add(nk.reduce_sum(nk.mul(rec, rec), axis=1),
                                  nk.tensor(1e-24)))
        cosine = nk.mul(nk.div(dot, rec_norm), self.inv_norm_x)
        rec_cols = [rel_euclid, cosine]
        tail_cols = [self.std_feature] if self.with_std else []
        if self.standardize_zr:
            rec_cols = [_standardize_column(c) for c in rec_cols]
            tail_cols = [_standardize_column(c) for c in tail_cols]
            if self.zr_clip is not None:
                # winsorize only the reconstruction features: their heavy
                # tails come from slow honest clients, while an extreme
                # update-dispersion value is exactly the signal to keep
                rec_cols = [_winsorize(c, self.zr_clip) for c in rec_cols]
        cols = rec_cols + tail_cols
        parts = [z_c] + [nk.reshape(c, (self.n, 1)) for c in cols]
        z = nk.concat(parts, axis=1)
        # floor memberships at delta so no component's total weight can
        # underflow to zero (empty components blow up the moment divisions);
        # rows still sum to exactly 1
        delta = 1e-10
        raw = nk.softmax(self.nets.est(z))
        gamma = nk.add(nk.mul(raw, nk.tensor(1.0 - self.k * delta)),
                       nk.tensor(delta))
        self.rec = rec
        return z, gamma

    def mixture(self, z: nk.Tensor, gamma: nk.Tensor):
        """Soft-membership GMM moments, all as graph tensors."""
        n, dz, k = self.n, self.nets.z_dim, self.k
        if self.eye_z is None:
            self.eye_z = nk.tensor(np.eye(dz))
        gamma_t = nk.transpose(gamma)
        denom = nk.reduce_sum(gamma, axis=0)                      # (k,)
        phi = nk.reduce_mean(gamma, axis=0)                       # (k,)
        mu = nk.div(nk.transpose(nk.matmul(gamma_t, z)),
                    nk.reshape(denom, (1, k)))                    # (dz, k)
        comps = []
        for ki in range(k):
            e_row = nk.tensor(np.eye(k)[ki][None, :])             # (1, k)
            e_col = nk.tensor(np.eye(k)[:, ki][:, None])          # (k, 1)
            mu_k = nk.reshape(nk.matmul(mu, e_col), (1, dz))
            dev = nk.sub(z, mu_k)                                 # (n, dz)
            w = nk.reshape(nk.matmul(gamma, e_col), (n,))         # (n,)
            scatter = nk.matmul(_rows_scaled(nk.transpose(dev), w, n), dev)
            den_k = nk.matmul(e_row, nk.reshape(denom, (k, 1)))   # (1, 1)
            cov = nk.add(nk.div(scatter, den_k),
                         nk.mul(self.eye_z, nk.tensor(self.eps)))
            phi_k = _as_scalar(nk.matmul(e_row, nk.reshape(phi, (k, 1))))
            comps.append((phi_k, mu_k, dev, cov))
        return phi, comps

    def energies(self, comps) -> nk.Tensor:
        """Per-sample energy -log p(z) under the current mixture."""
        dz = self.nets.z_dim
        log_terms = []
        for ki, (phi_k, _mu_k, dev, cov) in enumerate(comps):
            try:
                inv = nk.inverse(cov)
                ld = nk.logdet(cov)
            except (nk.NotPositiveDefiniteError, nk.NumkitError) as err:
                diag = np.diag(cov.values)
                raise CovarianceError(
                    f"component {ki} covariance collapsed despite eps={self.eps:g} "
                    f"regularization (diag={np.array2string(diag, precision=3)})"
                ) from err
            quad = nk.reduce_sum(nk.mul(nk.matmul(dev, inv), dev), axis=1)
            term = nk.add(nk.mul(quad, nk.tensor(-0.5)), nk.log(phi_k))
            term = nk.add(term, nk.mul(_as_scalar(ld), nk.tensor(-0.5)))
            term = nk.add(term, nk.tensor(-0.5 * dz * LOG_2PI))
            log_terms.append(nk.reshape(term, (1, self.n)))
        stacked = nk.concat(log_terms, axis=0)                    # (k, n)
        # fixed shift: logsumexp is exact for any constant offset, so the
        # detached row max costs nothing in gradient accuracy
        shift = nk.tensor(stacked.values.max(axis=0)[None, :])
        sumexp = nk.reduce_sum(nk.exp(nk.sub(stacked, shift)), axis=0)
        lse = nk.add(nk.log(sumexp), nk.reshape(shift, (self.n,)))
        return nk.neg(lse)

    def penalty(self, comps) -> nk.Tensor:
        total = nk.tensor(0.0)
        for _phi_k, _mu_k, _dev, cov in comps:
            diag = nk.reduce_sum(nk.mul(cov, self.eye_z), axis=1)
            total = nk.add(total, nk.reduce_sum(nk.div(nk.tensor(1.0), diag)))
        return total

    def loss(self) -> nk.Tensor:
        z, gamma = self.features()
        _phi, comps = self.mixture(z, gamma)
        energy = nk.reduce_mean(self.energies(comps))
        recon = nk.mse(self.rec, self.xt)
        out = nk.add(recon, nk.mul(energy, nk.tensor(self.lambda1)))
        return nk.add(out, nk.mul(self.penalty(comps), nk.tensor(self.lambda2)))

    def pretrain(self, epochs: int, learning_rate: float) -> list[float]:
        """Reconstruction-only warmup of the compression net (Adam)."""
        nets = self.nets
        params = []
        for block in (nets.enc1, nets.enc2, nets.dec1, nets.dec2):
            params.extend(block.params)
        step = _make_stepper(params, "adam", learning_rate)
        losses = []
        for _ in range(epochs):
            rec = nets.dec2(nets.dec1(nets.enc2(nets.enc1(self.xt))))
            loss = nk.mse(rec, self.xt)
            losses.append(loss.item())
            grads = nk.backward(loss, params=params)
            step([grads[p] for p in params])
        return losses

    def train(self, epochs: int, learning_rate: float,
              optimizer: str = "adam") -> list[float]:
        params = self.nets.params
        step = _make_stepper(params, optimizer, learning_rate)
        losses = []
        for _ in range(epochs):
            loss = self.loss()
            losses.append(loss.item())
            grads = nk.backward(loss, params=params)
            step([grads[p] for p in params])
        return losses

    def final_scores(self):
        z, gamma = self.features()
        z_vals, gamma_vals = z.values, gamma.values
        gmm = gmm_from_memberships(z_vals, gamma_vals, eps=self.eps)
        scores = np.array([gmm_energy(z_vals[i], gmm) for i in range(self.n)])
        z_c_dim = self.nets.z_dim - self.nets.z_r_dim
        feats = tuple(FeatureVector(z_vals[i, :z_c_dim], z_vals[i, z_c_dim:])
                      for i in range(self.n))
        return scores, feats, gmm


def _dagmm_engine(batch, arch, lambda1, lambda2, k, epochs, seed, *,
                  learning_rate, round_index, input_scale, standardize_zr,
                  eps, with_std, kind, optimizer, zr_clip,
                  pretrain_epochs, pretrain_learning_rate) -> DetectorOutput:
    x_raw, ids = _batch_matrix(batch)
    if len(batch) < k + 1:
        raise DetectError(f"need at least K+1={k + 1} updates, got {len(batch)}")
    order = _canonical_order(x_raw)
    x = _scale_input(x_raw[order], input_scale)
    run = _DagmmRun(x, arch, k, with_std, lambda1, lambda2, eps,
                    standardize_zr, seed, zr_clip=zr_clip)
    losses = []
    if pretrain_epochs:
        losses.extend(run.pretrain(pretrain_epochs, pretrain_learning_rate))
    losses.extend(run.train(epochs, learning_rate, optimizer))
    sorted_scores, sorted_feats, gmm = run.final_scores()
    scores = np.empty(len(batch))
    scores[order] = sorted_scores
    feats: list = [None] * len(batch)
    for i, f in enumerate(sorted_feats):
        feats[order[i]] = f
    return DetectorOutput(kind=kind, round_index=round_index, client_ids=ids,
                          scores=scores, epoch_losses=tuple(losses),
                          features=tuple(feats), gmm=gmm)


def dagmm_score(batch: Sequence[FlatUpdate], arch: Sequence[int] = (32, 4, 16),
                lambda1: float = 0.1, lambda2: float = 0.005, K: int = 4,
                epochs: int = 300, seed=0, *, learning_rate: float = 0.03,
                round_index: int = 0, input_scale: str = "pooled_std",
                standardize_zr: bool = True, eps: float = 1e-6,
                optimizer: str = "sgd",
                zr_clip: float | None = 4.0,
                pretrain_epochs: int = 0,
                pretrain_learning_rate: float = 1e-3) -> DetectorOutput:
    """Joint autoencoder + mixture; z_r = [relative Euclidean, cosine]."""
    return _dagmm_engine(batch, arch, lambda1, lambda2, K, epochs, seed,
                         learning_rate=learning_rate, round_index=round_index,
                         input_scale=input_scale, standardize_zr=standardize_zr,
                         eps=eps, with_std=False, kind="dagmm",
                         optimizer=optimizer, zr_clip=zr_clip,
                         pretrain_epochs=pretrain_epochs,
                         pretrain_learning_rate=pretrain_learning_rate)


def stddagmm_score(batch: Sequence[FlatUpdate], arch: Sequence[int] = (32, 4, 16),
                   lambda1: float = 0.1, lambda2: float = 0.005, K: int = 4,
                   epochs: int = 300, seed=0, *, learning_rate: float = 0.03,
                   round_index: int = 0, input_scale: str = "pooled_std",
                   standardize_zr: bool = True, eps: float = 1e-6,
                   optimizer: str = "sgd",
                   zr_clip: float | None = 4.0,
                   pretrain_epochs: int = 0,
                   pretrain_learning_rate: float = 1e-3) -> DetectorOutput:
    """dagmm_score with z_r = [relative Euclidean, cosine, input STD]."""
    return _dagmm_engine(batch, arch, lambda1, lambda2, K, epochs, seed,
                         learning_rate=learning_rate, round_index=round_index,
                         input_scale=input_scale, standardize_zr=standardize_zr,
                         eps=eps, with_std=True, kind="stddagmm",
                         optimizer=optimizer, zr_clip=zr_clip,
                         pretrain_epochs=pretrain_epochs,
                         pretrain_learning_rate=pretrain_learning_rate)


# ----------------------------------------------------------------- judgment

def _scores_and_truth(scores, truth) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, DetectorOutput):
        truth_ids = frozenset(int(t) for t in truth)
        labels = np.array([cid in truth_ids for cid in scores.client_ids.tolist()])
        return scores.scores, labels
    s = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(truth, dtype=bool)
    if s.shape != labels.shape:
        raise DetectError("scores and truth labels differ in length")
    return s, labels


def _average_ranks(s: np.ndarray) -> np.ndarray:
    """Ascending 1-based ranks with ties averaged (midrank convention)."""
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts + 1
    avg = starts + (counts - 1) / 2.0
    return avg[inverse]


def auc(scores, truth) -> float:
    """Probability a random free rider outscores a random honest client,
    ties counted half; the rank formulation of the ROC area."""
    s, labels = _scores_and_truth(scores, truth)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassInputError("AUC needs both a free rider and an honest client")
    ranks = _average_ranks(s)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class RankReport:
    """Descending-score ranks (1 = most suspicious) plus top-k flags."""

    client_ids: np.ndarray
    ranks: np.ndarray
    flagged: np.ndarray
    truth_ids: frozenset
    k: int

    def rank_of(self, client_id: int) -> int:
        idx = np.nonzero(self.client_ids == client_id)[0]
        if idx.size != 1:
            raise DetectError(f"client {client_id} not ranked exactly once")
        return int(self.ranks[idx[0]])

    @property
    def free_rider_ranks(self) -> dict:
        return {int(c): self.rank_of(int(c)) for c in sorted(self.truth_ids)}

    @property
    def true_positives(self) -> int:
        truth_mask = np.array([int(c) in self.truth_ids
                               for c in self.client_ids.tolist()])
        return int((self.flagged & truth_mask).sum())

    @property
    def false_positives(self) -> int:
        return int(self.flagged.sum()) - self.true_positives


def rank_report(scores: DetectorOutput, truth: Iterable[int],
                k: int | None = None) -> RankReport:
    """Rank clients by descending score; flag the top k (default: true
    free-rider count). Ties resolve by batch position, deterministically."""
    truth_ids = frozenset(int(t) for t in truth)
    if k is None:
        k = len(truth_ids)
    if k < 0:
        raise DetectError("k must be non-negative")
    order = np.argsort(-scores.scores, kind="stable")
    ranks = np.empty(order.size, dtype=np.int64)
    ranks[order] = np.arange(1, order.size + 1)
    flagged = ranks <= k
    return RankReport(client_ids=np.array(scores.client_ids), ranks=ranks,
                      flagged=flagged, truth_ids=truth_ids, k=k)


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class DetectorConfig:
    """Bundle of every detector knob, mapped onto the scoring ops."""

    ae_hidden: tuple = (32, 4)
    ae_epochs: int = 100
    ae_learning_rate: float = 0.01
    dagmm_arch: tuple = (32, 4, 16)
    lambda1: float = 0.1
    lambda2: float = 0.005
    K: int = 4
    dagmm_epochs: int = 300
    dagmm_learning_rate: float = 0.03
    pretrain_epochs: int = 0
    pretrain_learning_rate: float = 1e-3
    optimizer: str = "sgd"
    input_scale: str = "pooled_std"
    standardize_zr: bool = True
    zr_clip: float | None = 4.0
    eps: float = 1e-6
    seed: int = 0

    def autoencoder_kwargs(self) -> dict:
        return {
            "arch": self.ae_hidden,
            "train": nk.SgdConfig(learning_rate=self.ae_learning_rate,
                                  batch_size=1_000_000, epochs=self.ae_epochs),
            "input_scale": self.input_scale,
            "optimizer": self.optimizer,
        }

    def dagmm_kwargs(self) -> dict:
        return {
            "arch": self.dagmm_arch,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "K": self.K,
            "epochs": self.dagmm_epochs,
            "learning_rate": self.dagmm_learning_rate,
            "input_scale": self.input_scale,
            "standardize_zr": self.standardize_zr,
            "zr_clip": self.zr_clip,
            "eps": self.eps,
            "optimizer": self.optimizer,
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_learning_rate": self.pretrain_learning_rate,
        }

    def describe(self) -> dict:
        return {
            "ae_hidden": list(self.ae_hidden),
            "ae_epochs": self.ae_epochs,
            "ae_learning_rate": self.ae_learning_rate,
            "dagmm_arch": list(self.dagmm_arch),
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "K": self.K,
            "dagmm_epochs": self.dagmm_epochs,
            "dagmm_learning_rate": self.dagmm_learning_rate,
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_learning_rate": self.pretrain_learning_rate,
            "optimizer": self.optimizer,
            "input_scale": self.input_scale,
            "standardize_zr": self.standardize_zr,
            "zr_clip": self.zr_clip,
            "eps": self.eps,
            "seed": self.seed,
        }
