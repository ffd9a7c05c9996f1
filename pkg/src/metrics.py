"""
Evaluation metrics for sample quality and latent-space geometry.

Sample-set metrics (mse, swd, ffd) work on plain arrays. Geometry metrics take
a LatentView, the handful of maps they need (decode y, z -> y, y -> z, eps
features), so they run the same on a trained model or on a hand-built linear
map. All random draws happen up front in one generator; work is then split
into fixed chunks that may run on LIA_THREADS worker threads and are reduced
in chunk order, so thread count never changes a result.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.stats import binomtest

from config import Config
from .model import LiaModel, encode_to_prior, encoder_forward, feature_forward, generator_forward
from .coupling import coupling_forward, coupling_inverse
from .storage import write_csv
from .tensor import Tensor, precision

logger = logging.getLogger(__name__)

Array = np.ndarray
SPACES = ('y', 'z')
PATH_MODES = ('full', 'end')


class MetricError(ValueError):
    """A metric cannot be computed from the given inputs"""


@dataclass
class MetricReport:
    name: str
    value: float
    n_samples: int
    seed: int
    space: str = ''
    mode: str = ''
    extra: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise MetricError(f"{self.name}: value is not finite ({self.value})")
        if self.n_samples < 1:
            raise MetricError(f"{self.name}: n_samples must be at least 1")

    def to_row(self) -> Dict[str, object]:
        return {'name': self.name, 'space': self.space, 'mode': self.mode, 'value': self.value,
                'n': self.n_samples, 'seed': self.seed}


def write_reports(path: str, reports: Sequence[MetricReport]) -> None:
    frame = pd.DataFrame([r.to_row() for r in reports], columns=['name', 'space', 'mode', 'value', 'n', 'seed'])
    write_csv(path, frame)


class LatentView:
    """numpy-in, numpy-out view of a generator and its latent maps"""

    def __init__(self, decode: Callable[[Array], Array], features: Callable[[Array], Array], latent_dim: int,
                 to_y: Optional[Callable[[Array], Array]] = None, to_z: Optional[Callable[[Array], Array]] = None):
        identity = lambda v: v  # noqa: E731
        self.decode = decode
        self.features = features
        self.latent_dim = latent_dim
        self.to_y = to_y or identity
        self.to_z = to_z or identity

    @classmethod
    def from_model(cls, model: LiaModel) -> 'LatentView':
        # evaluated in double precision so finite differences stay meaningful
        def run(fn):
            def wrapped(values: Array) -> Array:
                with precision(np.float64):
                    return fn(Tensor(values)).numpy()
            return wrapped

        return cls(decode=run(lambda y: generator_forward(model, y)),
                   features=run(lambda x: feature_forward(model, x)),
                   latent_dim=model.dims.latent_dim,
                   to_y=run(lambda z: coupling_inverse(model.phi, z)),
                   to_z=run(lambda y: coupling_forward(model.phi, y)))

    def generate(self, codes: Array, space: str) -> Array:
        """Samples for codes living in the given space"""
        _check_space(space)
        return self.decode(codes if space == 'y' else self.to_y(codes))


def _check_space(space: str) -> None:
    if space not in SPACES:
        raise MetricError(f"Unknown latent space '{space}'; expected one of {SPACES}")


def _chunked(fn: Callable[[int, int], Array], total: int, threads: Optional[int] = None,
             chunk: int = Config.METRIC_CHUNK) -> Array:
    """fn(start, stop) over fixed chunks, concatenated in order"""
    threads = Config.THREADS if threads is None else threads
    bounds = [(start, min(start + chunk, total)) for start in range(0, total, chunk)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: fn(*b), bounds))
    else:
        parts = [fn(*b) for b in bounds]
    return np.concatenate(parts)


def _as_set(values, name: str) -> Array:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    if values.shape[0] == 0:
        raise MetricError(f"{name}: empty sample set")
    return values.reshape(values.shape[0], -1)


def mse_metric(a, b) -> float:
    """Mean squared error over paired samples, averaged over every element"""
    a, b = _as_set(a, 'mse'), _as_set(b, 'mse')
    if a.shape != b.shape:
        raise MetricError(f"mse: paired sets differ in shape, {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _sorted_projection_gaps(pa: Array, pb: Array) -> Array:
    """Per-projection W2 between the columns of two projected sets"""
    pa = np.sort(pa, axis=0)
    pb = np.sort(pb, axis=0)
    if pa.shape[0] != pb.shape[0]:
        # unequal sizes: compare on a common quantile grid
        q = (np.arange(max(pa.shape[0], pb.shape[0])) + 0.5) / max(pa.shape[0], pb.shape[0])
        pa = np.quantile(pa, q, axis=0)
        pb = np.quantile(pb, q, axis=0)
    return np.sqrt(np.mean((pa - pb) ** 2, axis=0))


def swd_metric(a, b, n_proj: int = Config.SWD_PROJECTIONS, seed: int = Config.SEED,
               threads: Optional[int] = None) -> float:
    """Sliced Wasserstein-2 distance averaged over random unit directions"""
    a, b = _as_set(a, 'swd'), _as_set(b, 'swd')
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"swd: sample dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    if n_proj < 1:
        raise MetricError(f"swd: n_proj must be at least 1, got {n_proj}")
    directions = np.random.default_rng(seed).standard_normal((n_proj, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    def gaps(start, stop):
        block = directions[start:stop].T
        return _sorted_projection_gaps(a @ block, b @ block)

    return float(np.mean(_chunked(gaps, n_proj, threads, chunk=max(1, Config.METRIC_CHUNK // 8))))


def _psd_sqrt(matrix: Array) -> Array:
    try:
        values, vectors = linalg.eigh(matrix)
    except linalg.LinAlgError as e:
        raise MetricError(f"Eigendecomposition did not converge: {e}") from e
    return (vectors * np.sqrt(np.maximum(values, 0.0))) @ vectors.T


def frechet_distance(mu_a: Array, cov_a: Array, mu_b: Array, cov_b: Array) -> float:
    """||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a^1/2 cov_b cov_a^1/2)^1/2)"""
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    try:
        eigenvalues = linalg.eigvalsh((middle + middle.T) / 2.0)
    except linalg.LinAlgError as e:
        raise MetricError(f"Eigendecomposition did not converge: {e}") from e
    cross = np.sum(np.sqrt(np.maximum(eigenvalues, 0.0)))
    mean_gap = float(np.sum((mu_a - mu_b) ** 2))
    return max(0.0, mean_gap + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross))


def ffd_metric(a, b, eps: Optional[Callable[[Array], Array]] = None) -> float:
    """Frechet distance between Gaussians fitted to eps features of two sample sets"""
    fa = _as_set(eps(np.asarray(a)) if eps else a, 'ffd')
    fb = _as_set(eps(np.asarray(b)) if eps else b, 'ffd')
    feat_dim = fa.shape[1]
    if fa.shape[0] <= feat_dim or fb.shape[0] <= feat_dim:
        raise MetricError(f"ffd: need more samples ({fa.shape[0]}, {fb.shape[0]}) than feature dims ({feat_dim})")
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    return frechet_distance(fa.mean(axis=0), cov_a, fb.mean(axis=0), cov_b)


def _lerp(a: Array, b: Array, t: Array) -> Array:
    t = t.reshape(-1, 1)
    return (1.0 - t) * a + t * b


def _segment_length(view: LatentView, space: str, a: Array, b: Array, t: Array, eps_step: float) -> Array:
    """Squared eps-feature distance between path points t and t + eps_step, over eps_step^2"""
    start = view.features(view.generate(_lerp(a, b, t), space))
    stop = view.features(view.generate(_lerp(a, b, t + eps_step), space))
    return np.sum((stop - start) ** 2, axis=1) / eps_step ** 2


def path_length(view: LatentView, space: str = 'y', mode: str = 'full', n: int = Config.METRIC_SAMPLES,
                eps_step: float = Config.PATH_EPS, seed: int = Config.SEED, threads: Optional[int] = None) -> float:
    """Expected feature-space path length between random endpoint pairs.

    y-space endpoints are phi^-1 of Gaussian draws with linear interpolation in y;
    z-space interpolates the Gaussian draws and maps each point through phi^-1.
    'end' mode averages the first and last segments of every path.
    """
    _check_space(space)
    if mode not in PATH_MODES:
        raise MetricError(f"Unknown path mode '{mode}'; expected one of {PATH_MODES}")
    rng = np.random.default_rng(seed)
    za = rng.standard_normal((n, view.latent_dim))
    zb = rng.standard_normal((n, view.latent_dim))
    t = rng.random(n)
    if space == 'y':
        za, zb = view.to_y(za), view.to_y(zb)

    def lengths(start, stop):
        a, b = za[start:stop], zb[start:stop]
        if mode == 'full':
            return _segment_length(view, space, a, b, t[start:stop], eps_step)
        head = _segment_length(view, space, a, b, np.zeros(stop - start), eps_step)
        tail = _segment_length(view, space, a, b, np.full(stop - start, 1.0 - eps_step), eps_step)
        return (head + tail) / 2.0

    return float(np.mean(_chunked(lengths, n, threads)))


def _draw_pairs(rng: np.random.Generator, n: int, dim: int) -> Tuple[Array, Array]:
    a = rng.standard_normal((n, dim))
    b = rng.standard_normal((n, dim))
    # resample coincident pairs
    same = np.all(a == b, axis=1)
    while np.any(same):
        b[same] = rng.standard_normal((int(same.sum()), dim))
        same = np.all(a == b, axis=1)
    return a, b


def lipschitz_ratio_stats(view: LatentView, space: str = 'y', n_pairs: int = Config.METRIC_SAMPLES,
                          seed: int = Config.SEED, threads: Optional[int] = None) -> Tuple[float, float]:
    """(mean, 95th percentile) of ||g(v_i) - g(v_j)|| / ||v_i - v_j|| over random pairs"""
    _check_space(space)
    if n_pairs < 1:
        raise MetricError(f"lipschitz_ratio_stats: n_pairs must be at least 1, got {n_pairs}")
    rng = np.random.default_rng(seed)
    za, zb = _draw_pairs(rng, n_pairs, view.latent_dim)
    if space == 'y':
        va, vb = view.to_y(za), view.to_y(zb)
        gaps = np.linalg.norm(va - vb, axis=1)
        degenerate = gaps == 0
        while np.any(degenerate):
            vb[degenerate] = view.to_y(rng.standard_normal((int(degenerate.sum()), view.latent_dim)))
            gaps = np.linalg.norm(va - vb, axis=1)
            degenerate = gaps == 0
    else:
        va, vb = za, zb

    def ratios(start, stop):
        xa = view.generate(va[start:stop], space)
        xb = view.generate(vb[start:stop], space)
        return np.linalg.norm(xa - xb, axis=1) / np.linalg.norm(va[start:stop] - vb[start:stop], axis=1)

    values = _chunked(ratios, n_pairs, threads)
    return float(np.mean(values)), float(np.percentile(values, 95))


def jacobian_isometry_probe(view: LatentView, y, fd_step: float = Config.PATH_EPS, space: str = 'y') -> float:
    """||J^T J / a - I||_F / sqrt(d) with a = tr(J^T J) / d, J by central differences at y"""
    _check_space(space)
    if fd_step <= 0:
        raise MetricError(f"jacobian_isometry_probe: fd_step must be positive, got {fd_step}")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    d = y.size
    offsets = np.eye(d) * fd_step
    points = np.concatenate([y + offsets, y - offsets])
    outputs = view.generate(points, space)
    jacobian = ((outputs[:d] - outputs[d:]) / (2.0 * fd_step)).T
    gram = jacobian.T @ jacobian
    scale = np.trace(gram) / d
    if scale <= 0:
        raise MetricError("jacobian_isometry_probe: generator is locally constant")
    return float(np.linalg.norm(gram / scale - np.eye(d)) / np.sqrt(d))


def trajectory_straightness(trajectory) -> float:
    """Mean distance of points from the chord through the end points, over half the chord length"""
    points = np.asarray(trajectory, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 3:
        raise MetricError(f"path straightness needs at least 3 points, got shape {points.shape}")
    start, end = points[0], points[-1]
    chord = end - start
    length = np.linalg.norm(chord)
    if length == 0:
        raise MetricError("path straightness: end point features coincide")
    direction = chord / length
    offsets = points - start
    perpendicular = offsets - np.outer(offsets @ direction, direction)
    return float(np.mean(np.linalg.norm(perpendicular, axis=1)) / (length / 2.0))


def path_straightness(view: LatentView, space: str, y_i, y_j, n_steps: int = 16) -> float:
    """Straightness of the eps-feature trajectory between two y codes, walked in the given space"""
    _check_space(space)
    if n_steps < 3:
        raise MetricError(f"path_straightness: n_steps must be at least 3, got {n_steps}")
    y_i = np.asarray(y_i, dtype=np.float64).reshape(1, -1)
    y_j = np.asarray(y_j, dtype=np.float64).reshape(1, -1)
    a, b = (y_i, y_j) if space == 'y' else (view.to_z(y_i), view.to_z(y_j))
    codes = _lerp(a, b, np.linspace(0.0, 1.0, n_steps))
    return trajectory_straightness(view.features(view.generate(codes, space)))


def paired_straightness(view: LatentView, n_pairs: int = 20, n_steps: int = 16,
                        seed: int = Config.SEED) -> Tuple[Array, Array]:
    """Straightness of y- and z-paths joining the same endpoint pairs"""
    rng = np.random.default_rng(seed)
    za, zb = _draw_pairs(rng, n_pairs, view.latent_dim)
    ya, yb = view.to_y(za), view.to_y(zb)
    y_values = np.array([path_straightness(view, 'y', ya[i], yb[i], n_steps) for i in range(n_pairs)])
    z_values = np.array([path_straightness(view, 'z', ya[i], yb[i], n_steps) for i in range(n_pairs)])
    return y_values, z_values


def sign_test(smaller, larger) -> float:
    """One-sided p-value that smaller < larger more often than chance; ties dropped"""
    smaller, larger = np.asarray(smaller), np.asarray(larger)
    wins = int(np.sum(smaller < larger))
    trials = int(np.sum(smaller != larger))
    if trials == 0:
        return 1.0
    return float(binomtest(wins, trials, 0.5, alternative='greater').pvalue)


def encoded_prior_stats(model: LiaModel, x, seed: int = Config.SEED) -> List[MetricReport]:
    """How close phi(f(x)) is to N(0, I): mean |per-dim mean| and mean per-dim std"""
    with precision(np.float64):
        z = encode_to_prior(model, Tensor(np.asarray(x))).numpy()
    n = z.shape[0]
    return [MetricReport('prior_mean_abs', float(np.mean(np.abs(z.mean(axis=0)))), n, seed, 'z'),
            MetricReport('prior_std', float(np.mean(z.std(axis=0))), n, seed, 'z')]


def reconstruction_report(model: LiaModel, heldout, n: int = 256, seed: int = Config.SEED,
                          inversion_steps: int = Config.INVERSION_STEPS,
                          inversion_lr: float = Config.INVERSION_LR) -> List[MetricReport]:
    """MSE, SWD and FFD of held-out reconstructions: LIA encoder vs optimization from random codes"""
    from .inversion import invert_y, reconstruct

    x = np.asarray(heldout, dtype=np.float32)[:n]
    view = LatentView.from_model(model)
    encoded = generator_forward(model, encoder_forward(model, Tensor(x))).numpy()
    inverted = reconstruct(model, invert_y(model, x, 'random', inversion_steps, inversion_lr, seed=seed))
    reports = []
    for method, recon in (('encoder', encoded), ('inversion', inverted)):
        reports.append(MetricReport('mse', mse_metric(x, recon), len(x), seed, 'y', method))
        reports.append(MetricReport('swd', swd_metric(x, recon, seed=seed), len(x), seed, 'y', method))
        if len(x) > model.dims.feat_dim:
            reports.append(MetricReport('ffd', ffd_metric(x, recon, view.features), len(x), seed, 'y', method))
    return reports


def evaluate_model(model: LiaModel, heldout, n: int = Config.METRIC_SAMPLES, seed: int = Config.SEED,
                   n_pairs: int = 20, threads: Optional[int] = None) -> List[MetricReport]:
    """Generation quality plus the y-versus-z geometry comparison"""
    view = LatentView.from_model(model)
    heldout = np.asarray(heldout, dtype=np.float64)
    reports = []
    generated = view.generate(np.random.default_rng(seed).standard_normal((len(heldout), view.latent_dim)), 'z')
    reports.append(MetricReport('swd_generated', swd_metric(generated, heldout, seed=seed, threads=threads),
                                len(heldout), seed, 'z'))
    if len(heldout) > model.dims.feat_dim:
        reports.append(MetricReport('ffd_generated', ffd_metric(generated, heldout, view.features),
                                    len(heldout), seed, 'z'))
    for space in SPACES:
        for mode in PATH_MODES:
            value = path_length(view, space, mode, n, seed=seed, threads=threads)
            reports.append(MetricReport('path_length', value, n, seed, space, mode))
        ratio_mean, ratio_p95 = lipschitz_ratio_stats(view, space, n, seed, threads)
        reports.append(MetricReport('lipschitz_mean', ratio_mean, n, seed, space))
        reports.append(MetricReport('lipschitz_p95', ratio_p95, n, seed, space))
        points = view.to_y(np.random.default_rng(seed).standard_normal((n_pairs, view.latent_dim)))
        if space == 'z':
            points = view.to_z(points)
        isometry = np.mean([jacobian_isometry_probe(view, p, space=space) for p in points])
        reports.append(MetricReport('jacobian_isometry', isometry, n_pairs, seed, space))
    y_values, z_values = paired_straightness(view, n_pairs, seed=seed)
    reports.append(MetricReport('path_straightness', float(np.mean(y_values)), n_pairs, seed, 'y'))
    reports.append(MetricReport('path_straightness', float(np.mean(z_values)), n_pairs, seed, 'z'))
    reports.append(MetricReport('straightness_sign_test_p', sign_test(y_values, z_values), n_pairs, seed))
    if model.dims.latent_dim < model.dims.data_dim:
        reports.extend(encoded_prior_stats(model, heldout, seed))
    logger.info(f"Computed {len(reports)} metrics on {len(heldout)} held-out samples (seed {seed})")
    return reports
