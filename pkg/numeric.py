"""
numeric.py - Dense tensors, seeded randomness and per-sample gradients for small MLPs

Everything downstream (models, training, influence) builds on this module:
- MlpSpec / ParamSlot / FlatParams: network shapes and the flattened parameter vector
- Rng: seeded, splittable generator (derive() gives keyed child streams)
- mlp_forward(), gaussian_sample(), grad_dot()
- per_sample_gradient() and its batched form batch_gradients(), both on torch.func
- central_difference(): finite-difference oracle used by the gradient checks

All tensors are float64.
"""

import hashlib
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator
from torch import Tensor
from torch.func import grad, grad_and_value, vmap

from errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SEED_MASK = (1 << 64) - 1


# =========================================================================
# NETWORK SHAPES AND PARAMETER LAYOUT
# =========================================================================

class MlpSpec(BaseModel):
    """Fully connected network: affine layers, hidden activation, identity output"""

    model_config = ConfigDict(frozen=True)

    layer_widths: Tuple[int, ...]
    activation: Literal["tanh", "relu"] = "tanh"
    final_bias: bool = True

    @field_validator("layer_widths")
    @classmethod
    def _check_widths(cls, widths):
        if len(widths) < 2:
            raise ValueError(f"an MLP needs at least 2 widths, got {len(widths)}")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {list(widths)}")
        return tuple(widths)

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_tensors(self) -> int:
        return 2 * self.n_layers - (0 if self.final_bias else 1)


class ParamSlot(NamedTuple):
    layer: int
    kind: Literal["weight", "bias"]
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


ParamLayout = Tuple[ParamSlot, ...]


def layout_for(*specs: MlpSpec) -> ParamLayout:
    """
    Layout of the concatenated parameters of one or more networks.

    Layer indices keep counting across networks, so a VAE layout lists the
    encoder layers first and the decoder layers after them.
    """
    slots = []
    layer = 0
    for spec in specs:
        widths = spec.layer_widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            slots.append(ParamSlot(layer, "weight", (fan_out, fan_in)))
            if i < spec.n_layers - 1 or spec.final_bias:
                slots.append(ParamSlot(layer, "bias", (fan_out,)))
            layer += 1
    return tuple(slots)


def layout_size(layout: ParamLayout) -> int:
    return sum(slot.size for slot in layout)


def unflatten(values: Tensor, layout: ParamLayout) -> List[Tensor]:
    """Split a flat vector into per-slot views (works under torch.func transforms)"""
    chunks = torch.split(values, [slot.size for slot in layout])
    return [chunk.reshape(slot.shape) for chunk, slot in zip(chunks, layout)]


@dataclass(frozen=True, eq=False)
class FlatParams:
    """Flattened parameter (or gradient) vector together with its layout"""

    values: Tensor
    layout: ParamLayout

    def __post_init__(self):
        expected = layout_size(self.layout)
        if self.values.ndim != 1 or self.values.numel() != expected:
            raise ShapeError("flat parameter vector", (expected,), tuple(self.values.shape))

    @classmethod
    def flatten(cls, tensors: Sequence[Tensor], layout: ParamLayout) -> "FlatParams":
        if len(tensors) != len(layout):
            raise ShapeError("parameter tensor count", len(layout), len(tensors))
        for tensor, slot in zip(tensors, layout):
            if tuple(tensor.shape) != slot.shape:
                raise ShapeError(f"layer {slot.layer} {slot.kind}", slot.shape, tuple(tensor.shape))
        values = torch.cat([t.reshape(-1).to(DTYPE) for t in tensors]) if tensors else torch.zeros(0, dtype=DTYPE)
        return cls(values, tuple(layout))

    def unflatten(self) -> List[Tensor]:
        return unflatten(self.values, self.layout)

    def with_values(self, values: Tensor) -> "FlatParams":
        return FlatParams(values, self.layout)

    def __len__(self) -> int:
        return self.values.numel()

    def __eq__(self, other) -> bool:
        if not isinstance(other, FlatParams):
            return NotImplemented
        return self.layout == other.layout and torch.equal(self.values, other.values)

    __hash__ = None


def _check_layout(expected: ParamLayout, got: ParamLayout):
    if tuple(expected) != tuple(got):
        raise ShapeError("parameter layout", f"{len(expected)} slots/{layout_size(expected)} values",
                         f"{len(got)} slots/{layout_size(got)} values")


# =========================================================================
# RANDOMNESS
# =========================================================================

def derive_seed(seed: int, *keys) -> int:
    """Hash a seed and a sequence of keys (ints, strings, bytes, tensors) to a 64-bit seed"""
    digest = hashlib.sha256(int(seed & SEED_MASK).to_bytes(8, "little"))
    for key in keys:
        if isinstance(key, Tensor):
            data = key.detach().to(DTYPE).contiguous().numpy().tobytes()
        elif isinstance(key, np.ndarray):
            data = np.ascontiguousarray(key, dtype="<f8").tobytes()
        elif isinstance(key, bytes):
            data = key
        else:
            data = repr(key).encode("utf-8")
        digest.update(len(data).to_bytes(8, "little"))
        digest.update(data)
    return int.from_bytes(digest.digest()[:8], "little")


class Rng:
    """
    Seeded CPU generator. The only mutable type of this module: every thread
    owns its own instance, and child streams come from derive().
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & SEED_MASK
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def derive(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    def permutation(self, n: int) -> Tensor:
        return torch.randperm(n, generator=self.generator)

    def choice(self, n: int, m: int) -> Tensor:
        """m distinct indices out of range(n)"""
        if m > n:
            raise ValueError(f"cannot draw {m} distinct indices out of {n}")
        return self.permutation(n)[:m]

    def normal(self, shape: Tuple[int, ...]) -> Tensor:
        return torch.randn(shape, generator=self.generator, dtype=DTYPE)

    def uniform(self, shape: Tuple[int, ...], low: float, high: float) -> Tensor:
        return low + (high - low) * torch.rand(shape, generator=self.generator, dtype=DTYPE)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def gaussian_sample(rng: Rng, rows: int, cols: int) -> Tensor:
    """i.i.d. standard-normal (rows, cols) matrix"""
    return rng.normal((rows, cols))


# =========================================================================
# FORWARD PASS
# =========================================================================

def forward(spec: MlpSpec, tensors: Sequence[Tensor], x: Tensor) -> Tensor:
    """Unchecked forward pass on a sample (d,) or batch (n, d); differentiable"""
    act = torch.tanh if spec.activation == "tanh" else torch.relu
    params = iter(tensors)
    h = x
    for i in range(spec.n_layers):
        last = i == spec.n_layers - 1
        h = h @ next(params).T
        if not last or spec.final_bias:
            h = h + next(params)
        if not last:
            h = act(h)
    return h


def init_params(rng: Rng, *specs: MlpSpec) -> FlatParams:
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases"""
    layout = layout_for(*specs)
    tensors = []
    for slot in layout:
        if slot.kind == "weight":
            fan_out, fan_in = slot.shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            tensors.append(rng.uniform(slot.shape, -limit, limit))
        else:
            tensors.append(torch.zeros(slot.shape, dtype=DTYPE))
    return FlatParams.flatten(tensors, layout)


def as_matrix(batch, cols: Optional[int] = None, what: str = "batch") -> Tensor:
    matrix = torch.as_tensor(batch, dtype=DTYPE)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise ShapeError(f"{what} rank", 2, matrix.ndim)
    if cols is not None and matrix.shape[1] != cols:
        raise ShapeError(f"{what} columns", cols, matrix.shape[1])
    return matrix


def as_vector(sample, dim: Optional[int] = None, what: str = "sample") -> Tensor:
    vector = torch.as_tensor(sample, dtype=DTYPE).reshape(-1)
    if dim is not None and vector.numel() != dim:
        raise ShapeError(f"{what} dimension", dim, vector.numel())
    return vector


def check_finite(values: Tensor, what: str):
    """Raise NumericError naming the first row holding a NaN/Inf"""
    if torch.isfinite(values).all():
        return
    bad = ~torch.isfinite(values)
    if bad.ndim > 1:
        bad = bad.reshape(bad.shape[0], -1).any(dim=1)
    index = int(torch.nonzero(bad.reshape(-1))[0])
    raise NumericError(f"non-finite {what}", sample_index=index)


def mlp_forward(spec: MlpSpec, params: FlatParams, batch) -> Tensor:
    _check_layout(layout_for(spec), params.layout)
    x = as_matrix(batch, spec.input_width)
    out = forward(spec, params.unflatten(), x)
    check_finite(out, "network output")
    return out


# =========================================================================
# LOSS DESCRIPTORS
# =========================================================================

class LossKind(str, Enum):
    VAE_ELBO = "vae-elbo"
    DSVDD = "dsvdd"
    MSE = "mse"


class Objective(ABC):
    """
    Per-sample loss l(theta, x) over unflattened parameters.

    Implementations must be pure tensor code so torch.func can differentiate
    and vmap them. Objectives that need Monte-Carlo draws declare
    noise_shape(); the draws are passed in explicitly so they can be held fixed.
    """

    kind: LossKind

    @property
    @abstractmethod
    def layout(self) -> ParamLayout:
        ...

    @property
    @abstractmethod
    def sample_width(self) -> int:
        ...

    def noise_shape(self) -> Optional[Tuple[int, ...]]:
        return None

    @abstractmethod
    def __call__(self, tensors: Sequence[Tensor], x: Tensor, noise: Optional[Tensor]) -> Tensor:
        ...


class MseObjective(Objective):
    """
    1/2 ||f(u) - y||^2. Autoencoder form (u = y = x) by default; with
    split_target the last output_width entries of the sample are y.
    """

    kind = LossKind.MSE

    def __init__(self, spec: MlpSpec, split_target: bool = False):
        if not split_target and spec.input_width != spec.output_width:
            raise ConfigError(
                f"reconstruction mse needs input width == output width, got {spec.input_width} -> {spec.output_width}"
            )
        self.spec = spec
        self.split_target = split_target

    @property
    def layout(self) -> ParamLayout:
        return layout_for(self.spec)

    @property
    def sample_width(self) -> int:
        if self.split_target:
            return self.spec.input_width + self.spec.output_width
        return self.spec.input_width

    def __call__(self, tensors, x, noise=None):
        if self.split_target:
            u, y = x[: self.spec.input_width], x[self.spec.input_width:]
        else:
            u = y = x
        out = forward(self.spec, tensors, u)
        return 0.5 * ((out - y) ** 2).sum()


LossLike = Union[Objective, str, LossKind]


def resolve_objective(loss: LossLike, spec: Optional[MlpSpec] = None) -> Objective:
    if isinstance(loss, Objective):
        return loss
    try:
        kind = LossKind(loss)
    except ValueError:
        valid = ", ".join(k.value for k in LossKind)
        raise ConfigError(f"unknown loss descriptor {loss!r} (expected one of: {valid})")
    if kind is LossKind.MSE and spec is not None:
        return MseObjective(spec)
    raise ConfigError(f"loss descriptor {kind.value!r} needs model context; use the model's objective()")


def _check_noise(objective: Objective, noise: Optional[Tensor], batch: Optional[int] = None) -> Optional[Tensor]:
    shape = objective.noise_shape()
    if shape is None:
        return None
    if noise is None:
        raise ConfigError(f"{objective.kind.value} needs fixed noise draws of shape {shape}")
    noise = torch.as_tensor(noise, dtype=DTYPE)
    expected = shape if batch is None else (batch,) + tuple(shape)
    if tuple(noise.shape) != tuple(expected):
        raise ShapeError("noise", tuple(expected), tuple(noise.shape))
    return noise


# =========================================================================
# GRADIENTS
# =========================================================================

def per_sample_gradient(spec: Optional[MlpSpec], params: FlatParams, sample, loss: LossLike,
                        noise: Optional[Tensor] = None) -> FlatParams:
    """
    Gradient of the per-sample loss w.r.t. all parameters.

    Args:
        spec: network spec (only needed to resolve the bare "mse" descriptor)
        params: parameters at which the gradient is taken
        sample: one data row
        loss: loss descriptor ("mse", "vae-elbo", "dsvdd") or an Objective
        noise: fixed Monte-Carlo draws for objectives that need them

    Returns:
        FlatParams holding the gradient, in the layout of params
    """
    objective = resolve_objective(loss, spec)
    _check_layout(objective.layout, params.layout)
    x = as_vector(sample, objective.sample_width)
    noise = _check_noise(objective, noise)
    layout = params.layout

    def sample_loss(theta):
        return objective(unflatten(theta, layout), x, noise)

    return FlatParams(grad(sample_loss)(params.values), layout)


def _vmapped(objective: Objective, layout: ParamLayout, fn: Callable, noise: Optional[Tensor]):
    def single(theta, x, eps):
        return fn(lambda t: objective(unflatten(t, layout), x, eps))(theta)

    return vmap(single, in_dims=(None, 0, 0 if noise is not None else None))


def sample_losses(objective: Objective, params: FlatParams, batch, noise: Optional[Tensor] = None) -> Tensor:
    """Per-row losses of a batch, shape (n,)"""
    x = as_matrix(batch, objective.sample_width)
    noise = _check_noise(objective, noise, batch=x.shape[0])
    layout = params.layout
    fn = vmap(lambda theta, row, eps: objective(unflatten(theta, layout), row, eps),
              in_dims=(None, 0, 0 if noise is not None else None))
    return fn(params.values, x, noise)


def batch_gradients(objective: Objective, params: FlatParams, batch, noise: Optional[Tensor] = None) -> Tensor:
    """Per-row loss gradients of a batch, shape (n, p)"""
    _check_layout(objective.layout, params.layout)
    x = as_matrix(batch, objective.sample_width)
    noise = _check_noise(objective, noise, batch=x.shape[0])
    if x.shape[0] == 0:
        return torch.zeros((0, len(params)), dtype=DTYPE)
    return _vmapped(objective, params.layout, grad, noise)(params.values, x, noise)


def mean_loss_and_gradient(objective: Objective, params: FlatParams, batch,
                           noise: Optional[Tensor] = None) -> Tuple[Tensor, float]:
    """Gradient and value of the mean loss over a minibatch"""
    x = as_matrix(batch, objective.sample_width)
    noise = _check_noise(objective, noise, batch=x.shape[0])
    layout = params.layout
    per_row = vmap(lambda theta, row, eps: objective(unflatten(theta, layout), row, eps),
                   in_dims=(None, 0, 0 if noise is not None else None))
    gradient, value = grad_and_value(lambda theta: per_row(theta, x, noise).mean())(params.values)
    return gradient, float(value)


def grad_dot(a: FlatParams, b: FlatParams) -> float:
    """Euclidean inner product of two gradients sharing one layout"""
    _check_layout(a.layout, b.layout)
    return float(torch.dot(a.values, b.values))


def central_difference(fn: Callable[[Tensor], float], theta: Tensor, step: float = 1e-6) -> Tensor:
    """Central finite-difference gradient of a scalar function, one coordinate at a time"""
    theta = torch.as_tensor(theta, dtype=DTYPE)
    out = torch.zeros_like(theta)
    for i in range(theta.numel()):
        plus = theta.clone()
        minus = theta.clone()
        plus[i] += step
        minus[i] -= step
        out[i] = (float(fn(plus)) - float(fn(minus))) / (2.0 * step)
    return out
