"""Neural-operator vector field evaluable on any lattice of a fixed dimension.

Per node the field value is embedded into ``c`` channels, convolved with ``c``
radial kernels (origin masked, so the conditioner at a site never sees that
site's own value), then combined with the embedding by a per-node network into
``T`` features which are contracted with a time-dependent vector.  The result is
antisymmetrized under phi -> -phi.

Because the conditioner excludes the own site, the divergence only needs the
per-node derivative of the embedding and of the transformer in its second
argument; both come out of a single forward-mode pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from phi4flow.lattice import ContractError, LatticeSpec, distance_grid

@jax.custom_jvp
def fast_tanh(x):
    """tanh through exp; XLA's binary64 tanh is several times slower on CPU."""
    return 1.0 - 2.0 / (1.0 + jnp.exp(2.0 * x))


@fast_tanh.defjvp
def _fast_tanh_jvp(primals, tangents):
    (x,), (dx,) = primals, tangents
    y = fast_tanh(x)
    return y, (1.0 - y * y) * dx


ACTIVATIONS = {
    "tanh": fast_tanh,
    "softplus": jax.nn.softplus,
    "silu": jax.nn.silu,
    "gelu": lambda x: jax.nn.gelu(x, approximate=True),
}

NET_NAMES = ("embed", "kernel", "transformer", "time")

DENSE_CONV_MAX_SITES = 1024


@dataclass(frozen=True)
class ArchConfig:
    channels: int = 8
    time_dim: int = 8
    embed_hidden: tuple[int, ...] = (32, 32)
    kernel_hidden: tuple[int, ...] = (32, 32)
    transformer_hidden: tuple[int, ...] = (32, 32)
    time_hidden: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    # multiply the lattice convolution by a^D so it approximates the continuum integral
    measure_factor: bool = True
    # "dense" (circulant matmul), "fft", or "auto"
    conv: str = "auto"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(
                f"activation {self.activation!r} is not one of the smooth activations {sorted(ACTIVATIONS)}"
            )
        if self.conv not in ("auto", "dense", "fft"):
            raise ContractError(f"unknown convolution method {self.conv!r}")
        if self.channels < 1 or self.time_dim < 1:
            raise ContractError("channels and time_dim must be positive")
        for name in ("embed_hidden", "kernel_hidden", "transformer_hidden", "time_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))

    def layer_sizes(self) -> dict[str, list[int]]:
        c, T = self.channels, self.time_dim
        return {
            "embed": [1, *self.embed_hidden, c],
            "kernel": [1, *self.kernel_hidden, c],
            "transformer": [2 * c, *self.transformer_hidden, T],
            "time": [1, *self.time_hidden, T],
        }


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class ModelParams:
    """Trainable weights of the four per-node networks plus the architecture that shapes them.

    ``weights[net]`` is a list of ``(W, b)`` pairs, ``W`` of shape (fan_in, fan_out).
    """

    arch: ArchConfig
    weights: dict = field(default_factory=dict)

    def tree_flatten(self):
        return (self.weights,), self.arch

    @classmethod
    def tree_unflatten(cls, arch, children):
        return cls(arch, children[0])

    def num_parameters(self) -> int:
        return int(sum(np.size(x) for x in jax.tree_util.tree_leaves(self.weights)))


def init_params(arch: ArchConfig, key, zero_output: bool = True, scale: float = 1.0) -> ModelParams:
    """LeCun-normal weights, zero biases.

    With ``zero_output`` the last transformer layer is zero, so the initial flow is the identity.
    """
    if isinstance(key, (int, np.integer)):
        key = jax.random.PRNGKey(int(key))
    weights = {}
    for name, sizes in arch.layer_sizes().items():
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            key, sub = jax.random.split(key)
            W = scale * jax.random.normal(sub, (fan_in, fan_out), dtype=jnp.float64) / np.sqrt(fan_in)
            layers.append((W, jnp.zeros(fan_out)))
        weights[name] = layers
    if zero_output:
        W, b = weights["transformer"][-1]
        weights["transformer"][-1] = (jnp.zeros_like(W), jnp.zeros_like(b))
    return ModelParams(arch, weights)


def mlp(layers, x, act):
    for W, b in layers[:-1]:
        x = act(x @ W + b)
    W, b = layers[-1]
    return x @ W + b


# ---------------------------------------------------------------------------
# kernel and conditioner
# ---------------------------------------------------------------------------


def kernel_eval(params: ModelParams, lattice: LatticeSpec, mask: bool = True):
    """Radial kernels evaluated at every lattice offset, shape (c, *lattice.shape).

    Depends on the lattice only through physical periodic distances.
    """
    act = ACTIVATIONS[params.arch.activation]
    r = jnp.asarray(distance_grid(lattice)).reshape(-1, 1)
    K = mlp(params.weights["kernel"], r, act).T
    if mask:
        K = K.at[:, 0].set(0.0)
    return K.reshape((params.arch.channels,) + lattice.shape)


@lru_cache(maxsize=64)
def _circulant_index(lattice: LatticeSpec) -> np.ndarray:
    # entry [x, y] is the linear index of the offset (x - y) mod N
    coords = np.indices(lattice.shape).reshape(lattice.D, -1)
    diff = (coords[:, :, None] - coords[:, None, :]) % lattice.N
    return np.ravel_multi_index(tuple(diff), lattice.shape)


def _conv_method(arch: ArchConfig, lattice: LatticeSpec) -> str:
    if arch.conv != "auto":
        return arch.conv
    return "dense" if lattice.volume <= DENSE_CONV_MAX_SITES else "fft"


def circular_conv(emb, K, lattice: LatticeSpec, method: str = "dense"):
    """``out[b, x, ch] = sum_y K[ch, x - y] emb[b, y, ch]`` with periodic wrapping.

    ``emb`` has shape (B, V, c), ``K`` shape (c, *lattice.shape).
    """
    c = K.shape[0]
    if method == "dense":
        Kmat = K.reshape(c, -1)[:, _circulant_index(lattice)]
        return jnp.einsum("cxy,byc->bxc", Kmat, emb)
    axes = tuple(range(1, lattice.D + 1))
    e = jnp.moveaxis(emb, -1, 1).reshape((emb.shape[0], c) + lattice.shape)
    spec_axes = tuple(a + 1 for a in axes)
    out = jnp.fft.ifftn(
        jnp.fft.fftn(e, axes=spec_axes) * jnp.fft.fftn(K, axes=axes)[None], axes=spec_axes
    ).real
    return jnp.moveaxis(out.reshape(emb.shape[0], c, -1), 1, -1)


def _flatten_batch(phi, lattice: LatticeSpec):
    lattice.check_field(phi)
    phi = jnp.asarray(phi)
    single = phi.ndim == lattice.D
    flat = phi.reshape((1 if single else phi.shape[0], lattice.volume))
    return flat, single


def _conditioner_from_embedding(params: ModelParams, emb, lattice: LatticeSpec, mask: bool = True):
    arch = params.arch
    K = kernel_eval(params, lattice, mask=mask)
    C = circular_conv(emb, K, lattice, _conv_method(arch, lattice))
    if arch.measure_factor:
        C = C * lattice.a**lattice.D
    return C


def conditioner(params: ModelParams, phi, lattice: LatticeSpec, mask: bool = True):
    """C of shape (B, V, c) for a batch (or (V, c) for a single field)."""
    flat, single = _flatten_batch(phi, lattice)
    act = ACTIVATIONS[params.arch.activation]
    emb = mlp(params.weights["embed"], flat[..., None], act)
    C = _conditioner_from_embedding(params, emb, lattice, mask)
    return C[0] if single else C


def conditioner_independence_check(params: ModelParams, phi, site, lattice: LatticeSpec, mask: bool = True,
                                   delta: float = 0.731) -> bool:
    """Whether perturbing phi at ``site`` leaves the conditioner at ``site`` bit-identical."""
    phi = np.array(phi, dtype=np.float64)
    lattice.check_field(phi)
    if phi.ndim != lattice.D:
        raise ContractError("expects a single field")
    site = tuple(int(s) for s in site)
    lin = int(np.ravel_multi_index(site, lattice.shape))
    bumped = phi.copy()
    bumped[site] += delta
    before = np.asarray(conditioner(params, phi, lattice, mask))[lin]
    after = np.asarray(conditioner(params, bumped, lattice, mask))[lin]
    return bool(np.array_equal(before, after))


# ---------------------------------------------------------------------------
# vector field
# ---------------------------------------------------------------------------


def time_vector(params: ModelParams, t):
    act = ACTIVATIONS[params.arch.activation]
    return mlp(params.weights["time"], jnp.reshape(jnp.asarray(t, dtype=jnp.float64), (1, 1)), act)[0]


def _branch(params: ModelParams, psi, w, lattice: LatticeSpec):
    """Un-symmetrized field and its per-node diagonal derivative, both (B, V)."""
    act = ACTIVATIONS[params.arch.activation]
    embed = lambda x: mlp(params.weights["embed"], x, act)  # noqa: E731
    x = psi[..., None]
    emb, demb = jax.jvp(embed, (x,), (jnp.ones_like(x),))
    C = _conditioner_from_embedding(params, emb, lattice)
    transform = lambda e: mlp(params.weights["transformer"], jnp.concatenate([C, e], axis=-1), act)  # noqa: E731
    Y, dY = jax.jvp(transform, (emb,), (demb,))
    return Y @ w, dY @ w


def _field_and_div(params: ModelParams, flat, t, lattice: LatticeSpec):
    w = time_vector(params, t)
    v_plus, d_plus = _branch(params, flat, w, lattice)
    v_minus, d_minus = _branch(params, -flat, w, lattice)
    V = 0.5 * (v_plus - v_minus)
    div = 0.5 * jnp.sum(d_plus + d_minus, axis=-1)
    return V, div


def velocity_and_divergence(params: ModelParams, phi, t, lattice: LatticeSpec):
    """Vector field (same shape as ``phi``) and its exact divergence (one value per sample)."""
    flat, single = _flatten_batch(phi, lattice)
    V, div = _field_and_div(params, flat, t, lattice)
    V = V.reshape(jnp.shape(phi))
    return (V, div[0]) if single else (V, div)


def velocity(params: ModelParams, phi, t, lattice: LatticeSpec):
    return velocity_and_divergence(params, phi, t, lattice)[0]
