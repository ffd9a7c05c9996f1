import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Dict, Tuple

import numpy as np

from config import Config
from .coupling import CouplingNet, coupling_forward, coupling_inverse, init_coupling
from .layers import MLP
from .tensor import ShapeError, Tensor, exp, mul, slice_

logger = logging.getLogger(__name__)

MODULES = ('f', 'phi', 'g', 'c', 'eps')


@dataclass
class ModelDims:
    data_dim: int = 1024
    latent_dim: int = Config.LATENT_DIM
    hidden: int = Config.HIDDEN
    depth: int = Config.DEPTH
    feat_hidden: int = Config.FEATURE_HIDDEN
    feat_dim: int = Config.FEATURE_DIM
    coupling_layers: int = Config.COUPLING_LAYERS
    coupling_hidden: int = 0  # 0 means "same as latent_dim"
    output_scale: float = 1.0

    def __post_init__(self):
        if self.coupling_hidden == 0:
            self.coupling_hidden = self.latent_dim
        # stored as float32 in checkpoints
        self.output_scale = float(np.float32(self.output_scale))

    def validate(self) -> None:
        if self.latent_dim % 2:
            raise ValueError(f"latent_dim must be even for coupling layers, got {self.latent_dim}")
        if self.depth < 2:
            raise ValueError(f"depth must be at least 2, got {self.depth}")
        for field in ('data_dim', 'latent_dim', 'hidden', 'feat_hidden', 'feat_dim', 'coupling_layers'):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    def require_bottleneck(self) -> None:
        """Encoders only make sense when the code is smaller than the sample"""
        if self.latent_dim >= self.data_dim:
            raise ValueError(f"latent_dim ({self.latent_dim}) must be smaller than data_dim ({self.data_dim}) "
                             f"to train an encoder")

    def _sizes(self, start: int, end: int):
        return [start] + [self.hidden] * (self.depth - 1) + [end]

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float32)

    @classmethod
    def from_array(cls, values: np.ndarray) -> 'ModelDims':
        kwargs = {}
        for f, value in zip(fields(cls), np.asarray(values).reshape(-1)):
            kwargs[f.name] = float(value) if f.name == 'output_scale' else int(round(float(value)))
        return cls(**kwargs)


class LiaModel:
    """Encoder f, coupling net phi, generator g, critic c and feature extractor eps"""

    def __init__(self, dims: ModelDims, f: MLP, phi: CouplingNet, g: MLP, c: MLP, eps: MLP,
                 eps_frozen: bool = True):
        if f.out_features != phi.dim or g.in_features != phi.dim:
            raise ShapeError(f"encoder output {f.out_features}, coupling dim {phi.dim} and generator input "
                             f"{g.in_features} must agree")
        self.dims = dims
        self.f = f
        self.phi = phi
        self.g = g
        self.c = c
        self.eps = eps
        self.eps_frozen = eps_frozen

    @classmethod
    def init(cls, dims: ModelDims, seed: int) -> 'LiaModel':
        dims.validate()
        seeds = np.random.SeedSequence(seed).spawn(len(MODULES))
        rngs = [np.random.default_rng(s) for s in seeds]
        f = MLP.init('f', dims._sizes(dims.data_dim, dims.latent_dim), rngs[0])
        phi = init_coupling(dims.latent_dim, dims.coupling_layers, dims.coupling_hidden,
                            int(rngs[1].integers(0, 2 ** 31)))
        g = MLP.init('g', dims._sizes(dims.latent_dim, dims.data_dim), rngs[2],
                     output='tanh', output_scale=dims.output_scale)
        c = MLP.init('c', dims._sizes(dims.data_dim, 1), rngs[3])
        eps = MLP.init('eps', [dims.data_dim, dims.feat_hidden, dims.feat_dim], rngs[4])
        logger.info(f"Initialized LIA model with dims {asdict(dims)} (seed {seed})")
        return cls(dims, f, phi, g, c, eps)

    def module(self, name: str):
        if name not in MODULES:
            raise KeyError(f"Unknown module {name}; expected one of {MODULES}")
        return getattr(self, name)

    def parameters(self, *names: str) -> Dict[str, Tensor]:
        params = OrderedDict()
        for name in names or MODULES:
            params.update(self.module(name).parameters())
        return params

    def copy(self) -> 'LiaModel':
        return LiaModel(ModelDims(**asdict(self.dims)), self.f.copy(), self.phi.copy(), self.g.copy(),
                        self.c.copy(), self.eps.copy(), self.eps_frozen)


def _check_width(op: str, x: Tensor, width: int) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{op}: expected input of shape (batch, {width}), got {x.shape}")


def encoder_forward(model: LiaModel, x: Tensor) -> Tensor:
    """y = f(x), deterministic"""
    _check_width('encoder_forward', x, model.dims.data_dim)
    return model.f(x)


def generator_forward(model: LiaModel, y: Tensor) -> Tensor:
    """x~ = g(y)"""
    _check_width('generator_forward', y, model.dims.latent_dim)
    return model.g(y)


def discriminator_forward(model: LiaModel, x: Tensor) -> Tensor:
    """Unbounded Wasserstein critic score, shape (batch, 1)"""
    _check_width('discriminator_forward', x, model.dims.data_dim)
    return model.c(x)


def feature_forward(model: LiaModel, x: Tensor) -> Tensor:
    _check_width('feature_forward', x, model.dims.data_dim)
    return model.eps(x)


def decode_prior(model: LiaModel, z: Tensor) -> Tensor:
    """z -> phi^-1 -> y -> g, the Stage-1 sampling path"""
    return generator_forward(model, coupling_inverse(model.phi, z))


def encode_to_prior(model: LiaModel, x: Tensor) -> Tensor:
    """z = phi(f(x))"""
    return coupling_forward(model.phi, encoder_forward(model, x))


def init_vae_encoder(dims: ModelDims, seed: int) -> MLP:
    rng = np.random.default_rng(seed)
    return MLP.init('q', dims._sizes(dims.data_dim, 2 * dims.latent_dim), rng)


def reparameterize(mu: Tensor, logvar: Tensor, noise: Tensor) -> Tensor:
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {noise.shape} differ")
    return mu + mul(exp(mul(logvar, 0.5)), noise)


def vae_encoder_forward(params: MLP, x: Tensor, noise: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """(mu, logvar, mu + exp(logvar / 2) * noise); noise comes from the caller"""
    latent = params.out_features // 2
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ShapeError(f"vae_encoder_forward: expected (batch, {params.in_features}), got {x.shape}")
    if noise.shape != (x.shape[0], latent):
        raise ShapeError(f"vae_encoder_forward: noise shape {noise.shape} != {(x.shape[0], latent)}")
    h = params(x)
    mu = slice_(h, 0, latent, axis=1)
    logvar = slice_(h, latent, 2 * latent, axis=1)
    return mu, logvar, reparameterize(mu, logvar, noise)


def model_to_checkpoint(model: LiaModel) -> Dict[str, np.ndarray]:
    ckpt = OrderedDict()
    ckpt['meta.dims'] = model.dims.to_array()
    ckpt['meta.eps_frozen'] = np.array([1.0 if model.eps_frozen else 0.0], dtype=np.float32)
    for name, tensor in model.parameters().items():
        ckpt[name] = tensor.numpy()
    return ckpt


def model_from_checkpoint(ckpt: Dict[str, np.ndarray]) -> LiaModel:
    if 'meta.dims' not in ckpt:
        raise KeyError("Checkpoint has no 'meta.dims' entry; not a model checkpoint")
    dims = ModelDims.from_array(ckpt['meta.dims'])
    model = LiaModel.init(dims, seed=0)
    for name in MODULES:
        model.module(name).load(ckpt)
    model.eps_frozen = bool(np.asarray(ckpt.get('meta.eps_frozen', [1.0])).reshape(-1)[0])
    return model
