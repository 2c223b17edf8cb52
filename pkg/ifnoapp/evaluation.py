"""
Test-set metrics, pointwise error maps and posterior uncertainty.

All metrics are computed on de-normalized fields [N, n, n]; models see
normalized fields with a trailing channel axis.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from ifnoapp.ifno import forward_predict, inverse_latent
from ifnoapp.tensor import Tensor
from ifnoapp.training import sample_rel_l2
from ifnoapp.utils import ShapeError
from ifnoapp.vae import LatentGaussian, decode, encode, reparameterize

logger = logging.getLogger(__name__)

CHUNK = 50


@dataclass
class MetricsReport:
    """
    Per-sample relative L2 errors with their mean and population std.
    """
    forward: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inverse: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = None
    fingerprint: str = None

    @staticmethod
    def _mean(values):
        return float(np.mean(values)) if len(values) else float("nan")

    @staticmethod
    def _std(values):
        return float(np.std(values)) if len(values) else float("nan")

    @property
    def forward_mean(self):
        return self._mean(self.forward)

    @property
    def forward_std(self):
        return self._std(self.forward)

    @property
    def inverse_mean(self):
        return self._mean(self.inverse)

    @property
    def inverse_std(self):
        return self._std(self.inverse)

    def merge(self, other):
        """
        Combine a forward-only and an inverse-only report.
        """
        return MetricsReport(
            forward=self.forward if len(self.forward) else other.forward,
            inverse=self.inverse if len(self.inverse) else other.inverse,
            seed=self.seed if self.seed is not None else other.seed,
            fingerprint=self.fingerprint or other.fingerprint)


@dataclass
class UncertaintyMap:
    """
    Pointwise predictive mean and std over ``samples`` decoded draws.
    """
    mean: np.ndarray
    std: np.ndarray
    samples: int


def relative_errors(pred, truth):
    """
    Relative L2 error of every sample of pred[N, ...] against truth[N, ...].
    """
    pred = np.asarray(pred, dtype=np.float64)
    return sample_rel_l2(Tensor(pred), np.asarray(truth, dtype=np.float64)).data


def pointwise_error(pred, truth):
    """
    |pred - truth| at every location.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} does not match truth {truth.shape}")
    return np.abs(pred - truth)


def _channels(fields, dtype):
    return np.asarray(fields, dtype=dtype)[..., None]


def _in_chunks(fn, fields):
    return np.concatenate([fn(fields[start:start + CHUNK])
                           for start in range(0, fields.shape[0], CHUNK)])


def predict_forward(model, normalizer, a):
    """
    Forward predictions u[N, n, n] for permeabilities a[N, n, n].
    """
    dtype = model.config.real_dtype

    def run(chunk):
        out = forward_predict(Tensor(_channels(normalizer.normalize_a(chunk), dtype)), model)
        return out.data[..., 0]
    return normalizer.denormalize_u(_in_chunks(run, np.asarray(a)))


def encode_inverse(model, vae, normalizer, u):
    """
    Posterior of the stage-3 path P' -> inverse blocks -> Q' -> encoder.
    """
    dtype = model.config.real_dtype
    latent = inverse_latent(Tensor(_channels(normalizer.normalize_u(u), dtype)), model)
    return encode(latent, vae.encoder)


def predict_inverse(model, vae, normalizer, u):
    """
    Inverse predictions a[N, n, n] from the decoded posterior mean.
    """
    def run(chunk):
        posterior = encode_inverse(model, vae, normalizer, chunk)
        return decode(posterior.mu, vae.decoder).data[..., 0]
    return normalizer.denormalize_a(_in_chunks(run, np.asarray(u)))


def eval_forward(model, normalizer, test):
    """
    Forward relative L2 errors on a test split.
    """
    pred = predict_forward(model, normalizer, test.a)
    return MetricsReport(forward=relative_errors(pred, test.u))


def eval_inverse(model, vae, normalizer, test):
    """
    Inverse relative L2 errors of decode(mu) on a test split.
    """
    pred = predict_inverse(model, vae, normalizer, test.u)
    return MetricsReport(inverse=relative_errors(pred, test.a))


def evaluate(model, vae, normalizer, test, seed=None, fingerprint=None):
    """
    Forward and inverse metrics in one report.
    """
    report = eval_forward(model, normalizer, test).merge(eval_inverse(model, vae, normalizer, test))
    report.seed = seed
    report.fingerprint = fingerprint
    logger.info("forward %.4e, inverse %.4e", report.forward_mean, report.inverse_mean)
    return report


def eval_baseline(train, test):
    """
    Errors of predicting the training-set mean field in both directions.
    """
    mean_u = np.broadcast_to(train.u.mean(axis=0), test.u.shape)
    mean_a = np.broadcast_to(train.a.mean(axis=0), test.a.shape)
    return MetricsReport(forward=relative_errors(mean_u, test.u),
                         inverse=relative_errors(mean_a, test.a))


def sample_posterior(mu, logvar, decoder, samples, rng, eps=None):
    """
    Decode ``samples`` reparameterized draws from N(mu, exp(logvar)) and
    reduce them to a pointwise mean and population std.

    :param decoder: Maps latents [S, z_dim] to arrays [S, ...].
    :param eps: Optional standard normal draws [S, z_dim] replacing ``rng``.
    """
    if samples < 2:
        raise ValueError(f"posterior sampling needs at least 2 samples, got {samples}")
    mu = np.asarray(mu).reshape(-1)
    logvar = np.asarray(logvar).reshape(-1)
    if eps is None:
        eps = rng.standard_normal((samples, mu.size))
    eps = np.asarray(eps, dtype=mu.dtype)
    if eps.shape != (samples, mu.size):
        raise ShapeError(f"eps shape {eps.shape} does not match ({samples}, {mu.size})")
    posterior = LatentGaussian(Tensor(np.broadcast_to(mu, eps.shape).copy()),
                               Tensor(np.broadcast_to(logvar, eps.shape).copy()))
    latents = reparameterize(posterior, eps).data
    draws = _in_chunks(decoder, latents)
    return UncertaintyMap(mean=draws.mean(axis=0), std=draws.std(axis=0), samples=samples)


def posterior_uncertainty(model, vae, normalizer, u, samples, seed, eps=None):
    """
    Pointwise mean and std of ``samples`` inverse predictions for one
    output field u[n, n].
    """
    u = np.asarray(u)
    if u.ndim != 2:
        raise ShapeError(f"expected a single n x n field, got shape {u.shape}")
    posterior = encode_inverse(model, vae, normalizer, u[None])
    rng = np.random.default_rng(seed)

    def decoder(latents):
        fields = decode(Tensor(latents), vae.decoder).data[..., 0]
        return normalizer.denormalize_a(fields)
    return sample_posterior(posterior.mu.data, posterior.logvar.data, decoder,
                            samples, rng, eps=eps)
