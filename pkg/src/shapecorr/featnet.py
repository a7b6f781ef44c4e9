"""Per-vertex feature network: spectral diffusion blocks + pointwise MLPs.

Each block diffuses its input channels over the shape (one learned time per
channel, kept positive through a softplus reparameterization), applies a
two-layer pointwise MLP, and adds a residual connection when the channel
counts match.  Gradients are exact reverse-mode, written by hand so they can
be verified against finite differences; everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Shape
from .spectral import SpectralBasis

__all__ = [
    "Architecture",
    "FeatureNet",
    "ForwardCache",
    "AdamState",
    "init_random",
    "forward",
    "backward",
    "adam_init",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass(frozen=True)
class Architecture:
    """Channel plan: in_dim -> width -> ... -> width -> out_dim over n_blocks."""

    in_dim: int = 3
    width: int = 32
    out_dim: int = 32
    n_blocks: int = 4

    def __post_init__(self):
        if min(self.in_dim, self.width, self.out_dim, self.n_blocks) < 1:
            raise ValueError("architecture dimensions must be positive")

    def channel_dims(self) -> list[int]:
        return [self.in_dim] + [self.width] * (self.n_blocks - 1) + [self.out_dim]


@dataclass(frozen=True)
class _Slot:
    name: str
    offset: int
    shape: tuple


def _layout(arch: Architecture) -> tuple[list[list[_Slot]], int]:
    dims = arch.channel_dims()
    blocks, offset = [], 0
    for b in range(arch.n_blocks):
        c_in, c_out, h = dims[b], dims[b + 1], arch.width
        slots = []
        for name, shape in [("raw_times", (c_in,)), ("W1", (h, c_in)),
                            ("b1", (h,)), ("W2", (c_out, h)), ("b2", (c_out,))]:
            slots.append(_Slot(name, offset, shape))
            offset += int(np.prod(shape))
        blocks.append(slots)
    return blocks, offset


@dataclass
class FeatureNet:
    """Architecture plus one flat float64 parameter vector."""

    arch: Architecture
    params: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        _, size = _layout(self.arch)
        if self.params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {self.params.shape}")

    @property
    def n_params(self) -> int:
        return self.params.size

    def block(self, b: int) -> dict[str, np.ndarray]:
        """Views into the flat vector for block b (no copies)."""
        slots, _ = _layout(self.arch)
        return {s.name: self.params[s.offset:s.offset + int(np.prod(s.shape))]
                .reshape(s.shape) for s in slots[b]}


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, tied to the producing parameters."""

    basis: SpectralBasis | None = None
    blocks: list = field(default_factory=list)   # per block dict of arrays
    params_snapshot: np.ndarray | None = None
    n: int = 0


def init_random(arch: Architecture, seed: int) -> FeatureNet:
    """Kaiming-style uniform affine weights, zero biases, diffusion time ~1e-2."""
    rng = np.random.default_rng(seed)
    blocks, size = _layout(arch)
    params = np.zeros(size)
    raw0 = inv_softplus(1e-2)
    for slots in blocks:
        for s in slots:
            view = params[s.offset:s.offset + int(np.prod(s.shape))]
            if s.name == "raw_times":
                view[:] = raw0
            elif s.name in ("W1", "W2"):
                fan_in = s.shape[1]
                bound = np.sqrt(6.0 / fan_in)
                view[:] = rng.uniform(-bound, bound, size=view.size)
            # biases stay zero
    return FeatureNet(arch, params, seed=seed)


def forward(net: FeatureNet, shape: Shape, basis: SpectralBasis):
    """Feature embedding of a shape, (n, out_dim), plus the backward cache.

    Input channels are the XYZ coordinates centered at the centroid.  Each
    block runs channelwise spectral heat diffusion, then a pointwise
    two-layer ReLU MLP, with a residual connection when widths match.
    """
    if shape.n_vertices != basis.n:
        raise ValueError("basis does not belong to this shape")
    X = shape.vertices - shape.vertices.mean(axis=0)
    if X.shape[1] != net.arch.in_dim:
        raise ValueError("input dimension mismatch")
    cache = ForwardCache(basis=basis, params_snapshot=net.params.copy(), n=basis.n)
    for b in range(net.arch.n_blocks):
        p = net.block(b)
        t = softplus(p["raw_times"])
        coeff = basis.Phi.T @ (basis.A[:, None] * X)          # (k, c_in)
        decay = np.exp(-basis.evals[:, None] * t[None, :])    # (k, c_in)
        D = basis.Phi @ (decay * coeff)                       # (n, c_in)
        H = D @ p["W1"].T + p["b1"]
        R = np.maximum(H, 0.0)
        Y = R @ p["W2"].T + p["b2"]
        residual = Y.shape[1] == X.shape[1]
        out = Y + X if residual else Y
        cache.blocks.append(dict(X=X, coeff=coeff, decay=decay, D=D, H=H,
                                 residual=residual))
        X = out
    return X, cache


def backward(net: FeatureNet, cache: ForwardCache, dF: np.ndarray) -> np.ndarray:
    """Exact gradients of sum(dF * features) w.r.t. the flat parameter vector."""
    if cache.params_snapshot is None or not np.array_equal(
            cache.params_snapshot, net.params):
        raise ValueError("stale cache: parameters changed since forward")
    if dF.shape[0] != cache.n:
        raise ValueError("gradient row count does not match cached forward")
    basis = cache.basis
    grads = np.zeros_like(net.params)
    slots_all, _ = _layout(net.arch)
    dOut = np.asarray(dF, dtype=np.float64)
    for b in reversed(range(net.arch.n_blocks)):
        p = net.block(b)
        cb = cache.blocks[b]
        dY = dOut
        dX = dOut if cb["residual"] else np.zeros_like(cb["X"])
        R = np.maximum(cb["H"], 0.0)
        dW2 = dY.T @ R
        db2 = dY.sum(axis=0)
        dR = dY @ p["W2"]
        dH = dR * (cb["H"] > 0)
        dW1 = dH.T @ cb["D"]
        db1 = dH.sum(axis=0)
        dD = dH @ p["W1"]
        # diffusion backward: D = Phi (decay * coeff)
        dM = basis.Phi.T @ dD                                  # (k, c_in)
        dcoeff = cb["decay"] * dM
        ddecay = cb["coeff"] * dM
        dt = -(ddecay * cb["decay"] * basis.evals[:, None]).sum(axis=0)
        draw = dt * sigmoid(p["raw_times"])
        dX = dX + basis.A[:, None] * (basis.Phi @ dcoeff)
        for s, g in zip(slots_all[b],
                        (draw, dW1, db1, dW2, db2)):
            grads[s.offset:s.offset + g.size] += g.ravel()
        dOut = dX
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators and hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(net: FeatureNet, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros_like(net.params), v=np.zeros_like(net.params),
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(net: FeatureNet, grads: np.ndarray,
              state: AdamState) -> tuple[FeatureNet, AdamState]:
    """One bias-corrected Adam update; returns fresh net and state."""
    if grads.shape != net.params.shape:
        raise ValueError("gradient shape mismatch")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    params = net.params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_net = FeatureNet(net.arch, params, seed=net.seed)
    new_state = AdamState(m=m, v=v, step=t, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return new_net, new_state


def save_checkpoint(net: FeatureNet, path) -> None:
    a = net.arch
    np.savez(path, version=1, in_dim=a.in_dim, width=a.width,
             out_dim=a.out_dim, n_blocks=a.n_blocks, params=net.params,
             seed=net.seed)


def load_checkpoint(path) -> FeatureNet:
    with np.load(path) as data:
        if int(data["version"]) != 1:
            raise ValueError(f"unsupported checkpoint version {data['version']}")
        arch = Architecture(in_dim=int(data["in_dim"]), width=int(data["width"]),
                            out_dim=int(data["out_dim"]),
                            n_blocks=int(data["n_blocks"]))
        return FeatureNet(arch, data["params"].copy(), seed=int(data["seed"]))
