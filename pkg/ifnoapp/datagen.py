"""
Darcy flow data generation.

Permeability fields are piecewise constant over three regions separated by
45-degree lines (dline) or sinusoidal curves (dcurv). Pressure solves
-div(a grad u) = g on the unit square with u = 0 on the boundary, using a
5-point flux discretization with harmonic-mean face coefficients and a
conjugate gradient solver.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from ifnoapp.constants import PERMEABILITY_FLOOR
from ifnoapp.utils import SolverError

logger = logging.getLogger(__name__)

KINDS = ("dline", "dcurv")


@dataclass
class LineGeometry:
    """
    Interfaces x1 + x2 = w1 and x1 + x2 = w2 with three region permeabilities.
    """
    w1: float
    w2: float
    q: tuple

    kind = "dline"

    def serialize(self):
        return asdict(self)


@dataclass
class CurvGeometry:
    """
    Interfaces x2 = p + 0.1 sin(2.5 pi (x1 + r)) with three region permeabilities.
    """
    p1: float
    p2: float
    r1: float
    r2: float
    q: tuple

    kind = "dcurv"

    def serialize(self):
        return asdict(self)


@dataclass
class DarcySample:
    """
    One permeability / pressure pair on an n x n node grid.
    """
    a: np.ndarray
    u: np.ndarray
    geometry: object
    seed: int


@dataclass
class DarcyDataset:
    """
    Stacked samples a[N, n, n], u[N, n, n] with their seeds and geometries.
    """
    a: np.ndarray
    u: np.ndarray
    kind: str
    seeds: list = field(default_factory=list)
    geometries: list = field(default_factory=list)

    def __len__(self):
        return self.a.shape[0]

    @property
    def grid(self):
        return self.a.shape[-1]

    @classmethod
    def from_samples(cls, samples, kind):
        return cls(
            a=np.stack([s.a for s in samples]),
            u=np.stack([s.u for s in samples]),
            kind=kind,
            seeds=[s.seed for s in samples],
            geometries=[s.geometry for s in samples])

    def subset(self, indices):
        indices = list(indices)
        return DarcyDataset(
            a=self.a[indices], u=self.u[indices], kind=self.kind,
            seeds=[self.seeds[i] for i in indices] if self.seeds else [],
            geometries=[self.geometries[i] for i in indices] if self.geometries else [])

    def with_fields(self, a, u):
        return DarcyDataset(a=a, u=u, kind=self.kind, seeds=list(self.seeds),
                            geometries=list(self.geometries))


@dataclass
class NoiseSpec:
    """
    Noise level and the per-location standard deviation fields it scales.
    """
    eta: float
    sigma_f: np.ndarray
    sigma_u: np.ndarray


@dataclass
class Normalizer:
    """
    Per-channel standardization statistics of the training split.
    """
    a_mean: np.ndarray
    a_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray

    @classmethod
    def fit(cls, dataset):
        def stats(values):
            std = np.array([values.std()])
            return np.array([values.mean()]), np.where(std > 0, std, 1.0)
        a_mean, a_std = stats(dataset.a)
        u_mean, u_std = stats(dataset.u)
        return cls(a_mean, a_std, u_mean, u_std)

    @classmethod
    def identity(cls):
        one, zero = np.ones(1), np.zeros(1)
        return cls(zero, one, zero.copy(), one.copy())

    def normalize_a(self, a):
        return (a - self.a_mean) / self.a_std

    def denormalize_a(self, a):
        return a * self.a_std + self.a_mean

    def normalize_u(self, u):
        return (u - self.u_mean) / self.u_std

    def denormalize_u(self, u):
        return u * self.u_std + self.u_mean

    def serialize(self):
        return {"a_mean": self.a_mean, "a_std": self.a_std,
                "u_mean": self.u_mean, "u_std": self.u_std}


def derive_seed(master_seed, index):
    """
    Seed of sample ``index``: independent of generation order.
    """
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _permeabilities(rng, high):
    return tuple(float(max(q, PERMEABILITY_FLOOR)) for q in rng.uniform(0.0, high, size=3))


def sample_geometry(kind, rng):
    """
    Draw a geometry of ``kind`` from a seeded generator. Region
    permeabilities are floored at PERMEABILITY_FLOOR.
    """
    if kind == "dline":
        w1 = float(rng.uniform(0.0, 1.0 / 3.0))
        w2 = float(rng.uniform(1.0 / 3.0, 2.0 / 3.0))
        return LineGeometry(w1=w1, w2=w2, q=_permeabilities(rng, 10.0))
    if kind == "dcurv":
        p1 = float(rng.uniform(0.15, 0.4))
        p2 = float(rng.uniform(0.6, 0.85))
        r1, r2 = (float(r) for r in rng.uniform(0.0, 1.0, size=2))
        return CurvGeometry(p1=p1, p2=p2, r1=r1, r2=r2, q=_permeabilities(rng, 15.0))
    raise ValueError(f"unknown geometry kind '{kind}'")


def _curve(x1, p, r):
    return p + 0.1 * np.sin(2.5 * np.pi * (x1 + r))


def rasterize(g, n):
    """
    Permeability on the node grid (i / (n - 1), j / (n - 1)); axis 0 is x1.
    """
    if n < 4:
        raise ValueError(f"grid size must be at least 4, got {n}")
    coords = np.arange(n) / (n - 1)
    x1, x2 = np.meshgrid(coords, coords, indexing="ij")
    if isinstance(g, LineGeometry):
        total = x1 + x2
        region = (g.w1 < total).astype(int) + (g.w2 < total).astype(int)
    else:
        region = (_curve(x1, g.p1, g.r1) < x2).astype(int) \
            + (_curve(x1, g.p2, g.r2) < x2).astype(int)
    return np.asarray(g.q)[region]


def _harmonic(left, right):
    return 2.0 * left * right / (left + right)


def assemble_operator(a):
    """
    Sparse SPD matrix of -div(a grad .) on the interior nodes of an n x n
    grid with zero Dirichlet boundary, scaled by 1/h^2.
    """
    n = a.shape[0]
    h = 1.0 / (n - 1)
    m = n - 2
    index = np.arange(m * m).reshape(m, m)
    inner = a[1:-1, 1:-1]
    east = _harmonic(inner, a[2:, 1:-1])
    west = _harmonic(inner, a[:-2, 1:-1])
    north = _harmonic(inner, a[1:-1, 2:])
    south = _harmonic(inner, a[1:-1, :-2])

    rows = [index.ravel()]
    cols = [index.ravel()]
    vals = [(east + west + north + south).ravel()]
    for coeff, src, dst in (
            (east[:-1, :], index[:-1, :], index[1:, :]),
            (west[1:, :], index[1:, :], index[:-1, :]),
            (north[:, :-1], index[:, :-1], index[:, 1:]),
            (south[:, 1:], index[:, 1:], index[:, :-1])):
        rows.append(src.ravel())
        cols.append(dst.ravel())
        vals.append(-coeff.ravel())
    matrix = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m * m, m * m))
    return matrix / (h * h)


def conjugate_gradient(matrix, rhs, tol=1e-8, max_iter=None, preconditioner="none"):
    """
    Solve matrix @ x = rhs for SPD ``matrix`` to relative residual ``tol``.

    :return: (solution, iterations, relative residual)
    """
    size = rhs.shape[0]
    if max_iter is None:
        max_iter = 10 * size
    rhs_norm = np.linalg.norm(rhs)
    x = np.zeros_like(rhs)
    if rhs_norm == 0:
        return x, 0, 0.0
    if preconditioner == "jacobi":
        inv_diag = 1.0 / matrix.diagonal()
    else:
        inv_diag = np.ones(size)

    r = rhs.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for iteration in range(1, max_iter + 1):
        ap = matrix @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * rhs_norm:
            r = rhs - matrix @ x
            residual = np.linalg.norm(r) / rhs_norm
            if residual <= tol:
                return x, iteration, residual
        z = inv_diag * r
        rz_next = r @ z
        p = z + (rz_next / rz) * p
        rz = rz_next
    residual = np.linalg.norm(rhs - matrix @ x) / rhs_norm
    raise SolverError(f"CG did not converge in {max_iter} iterations "
                      f"(relative residual {residual:.3e})")


def darcy_solve(a, g=1.0, tol=1e-8, preconditioner="none"):
    """
    Pressure u on the n x n node grid with u = 0 on the boundary.

    :param a: Positive permeability on the nodes.
    :param g: Source, a constant or an n x n array.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n or n < 4:
        raise SolverError(f"permeability must be an n x n grid with n >= 4, got {a.shape}")
    if not np.all(a > 0):
        raise SolverError("permeability must be positive everywhere")
    source = np.broadcast_to(np.asarray(g, dtype=np.float64), a.shape)
    rhs = np.ascontiguousarray(source[1:-1, 1:-1]).ravel()
    matrix = assemble_operator(a)
    interior, iterations, residual = conjugate_gradient(
        matrix, rhs, tol=tol, max_iter=50 * n * n, preconditioner=preconditioner)
    logger.debug("CG converged in %d iterations, residual %.3e", iterations, residual)
    u = np.zeros_like(a)
    u[1:-1, 1:-1] = interior.reshape(n - 2, n - 2)
    return u


def generate_sample(kind, n, master_seed, index, tol=1e-8, preconditioner="none"):
    """
    Generate sample ``index`` with its derived seed.
    """
    seed = derive_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    geometry = sample_geometry(kind, rng)
    a = rasterize(geometry, n)
    try:
        u = darcy_solve(a, 1.0, tol=tol, preconditioner=preconditioner)
    except SolverError as error:
        raise SolverError(f"sample {index}: {error}", sample_index=index) from error
    return DarcySample(a=a, u=u, geometry=geometry, seed=seed)


def _generate(args):
    return generate_sample(*args)


def generate_dataset(kind, n, count, master_seed, start=0, tol=1e-8,
                     preconditioner="none", workers=1):
    """
    Generate samples start .. start + count - 1. The result does not depend
    on ``workers``.
    """
    jobs = [(kind, n, master_seed, index, tol, preconditioner)
            for index in range(start, start + count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_generate, jobs))
    else:
        samples = [_generate(job) for job in jobs]
    logger.info("Generated %d %s samples on a %dx%d grid", count, kind, n, n)
    return DarcyDataset.from_samples(samples, kind)


def inject_noise(dataset, eta, seed):
    """
    f <- f + eta sigma_f * eps and u <- u + eta sigma_u * xi, where the sigma
    fields are the per-location population standard deviations across the
    dataset and eps, xi are standard normal.

    :return: (noisy dataset, NoiseSpec)
    """
    if eta < 0:
        raise ValueError(f"noise level must be non-negative, got {eta}")
    if len(dataset) < 2:
        raise ValueError("noise injection needs at least two samples")
    sigma_f = dataset.a.std(axis=0)
    sigma_u = dataset.u.std(axis=0)
    spec = NoiseSpec(eta=eta, sigma_f=sigma_f, sigma_u=sigma_u)
    if eta == 0:
        return dataset, spec
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(dataset.a.shape)
    xi = rng.standard_normal(dataset.u.shape)
    noisy = dataset.with_fields(dataset.a + eta * sigma_f * eps,
                                dataset.u + eta * sigma_u * xi)
    return noisy, spec


def _snr(clean, noisy):
    noise = np.sum((noisy - clean) ** 2)
    if noise == 0:
        return math.inf
    return float(10.0 * np.log10(np.sum(clean ** 2) / noise))


def snr_db(clean, noisy):
    """
    Dataset-level signal-to-noise ratios in dB.

    :return: (snr_input, snr_output); +inf when no noise was added.
    """
    return _snr(clean.a, noisy.a), _snr(clean.u, noisy.u)
