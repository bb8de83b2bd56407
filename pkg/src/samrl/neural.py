"""Small MLPs, Adam, observation featurization and the text checkpoint format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, apply, grad

D_MAX = 5.0
POOL_GRID = 16
CKPT_HEADER = "SAMRL-CKPT v1"


class NeuralError(ValueError):
    pass


# ------------------------------------------------------------ featurization

def _pool_np(img: np.ndarray, g: int) -> np.ndarray:
    h, w = img.shape[:2]
    fy, fx = h // g, w // g
    return img.reshape(g, fy, g, fx, -1).mean(axis=(1, 3))


def _check_res(h, w, g=POOL_GRID):
    if h % g or w % g or h < g or w < g:
        raise NeuralError(f"observation {h}x{w} cannot be pooled to {g}x{g}")


def featurize(obs) -> np.ndarray:
    """rgb, depth / d_max and mask average-pooled to 16x16, channel-major, 1280 values."""
    rgb = np.asarray(getattr(obs.rgb, "value", obs.rgb))
    depth = np.asarray(getattr(obs.depth, "value", obs.depth))
    mask = np.asarray(getattr(obs.mask, "value", obs.mask))
    _check_res(*rgb.shape[:2])
    chans = np.concatenate([rgb, depth[..., None] / D_MAX, mask[..., None]], axis=2)
    return _pool_np(chans, POOL_GRID).transpose(2, 0, 1).reshape(-1)


def featurize_t(obs) -> Tensor:
    """Differentiable twin of ``featurize``."""
    h, w = obs.rgb.shape[:2]
    _check_res(h, w)
    chans = apply("concat", obs.rgb, (obs.depth * (1.0 / D_MAX))[:, :, None], obs.mask[:, :, None], axis=2)
    g = POOL_GRID
    pooled = chans.reshape(g, h // g, g, w // g, 5).mean(axis=(1, 3))
    return pooled.transpose(2, 0, 1).reshape(-1)


FEATURE_DIM = 5 * POOL_GRID * POOL_GRID


# ---------------------------------------------------------------------- MLP

@dataclass
class MlpParams:
    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"            # "linear" or "tanh"
    bound: np.ndarray | None = None  # per-output scale for the tanh head

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2:
            raise NeuralError("an MLP needs at least input and output dims")
        if self.head not in ("linear", "tanh"):
            raise NeuralError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.weights):
            raise NeuralError("layer count does not match dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise NeuralError(f"layer {i}: expected {(self.dims[i], self.dims[i + 1])}, got {w.shape}")
        if self.head == "tanh":
            self.bound = np.broadcast_to(np.asarray(1.0 if self.bound is None else self.bound, dtype=float),
                                         (self.dims[-1],)).copy()

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        return MlpParams(self.dims, [np.array(a) for a in arrays[0::2]], [np.array(a) for a in arrays[1::2]],
                         self.head, None if self.bound is None else self.bound.copy())

    def copy(self) -> "MlpParams":
        return self.with_arrays(self.arrays())

    def n_values(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(dims, seed: int = 0, head: str = "linear", bound=None, zero_last: bool = False) -> MlpParams:
    """Xavier-uniform weights, zero biases; ``zero_last`` zeroes the output layer."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for i in range(len(dims) - 1):
        lim = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
        w = rng.uniform(-lim, lim, size=(dims[i], dims[i + 1]))
        if zero_last and i == len(dims) - 2:
            w = np.zeros_like(w)
        ws.append(w)
        bs.append(np.zeros(dims[i + 1]))
    return MlpParams(tuple(dims), ws, bs, head, bound)


def track(params: MlpParams, tape: Tape) -> list[Tensor]:
    return [tape.variable(a) for a in params.arrays()]


def mlp_forward(params: MlpParams, x, leaves: list[Tensor] | None = None) -> Tensor:
    """Affine + tanh hidden layers; ``leaves`` (from ``track``) routes parameter gradients."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    if x.shape[-1] != params.dims[0]:
        raise NeuralError(f"input dim {x.shape[-1]} != network input dim {params.dims[0]}")
    arrs = leaves if leaves is not None else [Tensor(a, check=False) for a in params.arrays()]
    n = len(params.weights)
    h = x
    for i in range(n):
        h = h @ arrs[2 * i] + arrs[2 * i + 1]
        if i < n - 1:
            h = apply("tanh", h)
    if params.head == "tanh":
        h = apply("tanh", h) * params.bound
    return h


def mlp_np(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass (no tape, no checks) for hot loops."""
    h = np.asarray(x, dtype=float)
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < n - 1:
            h = np.tanh(h)
    if params.head == "tanh":
        h = np.tanh(h) * params.bound
    return h


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a, dtype=float) for a in arrays], [np.zeros_like(a, dtype=float) for a in arrays])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """Descent step with bias correction; returns new arrays and a new state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise NeuralError("adam_step: parameter, gradient and moment counts differ")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise NeuralError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# --------------------------------------------------------------- training

@dataclass
class FitResult:
    params: MlpParams
    losses: list[float] = field(default_factory=list)


def fit_regression(params: MlpParams, x: np.ndarray, y: np.ndarray, epochs: int, lr: float = 1e-3,
                   batch: int = 128, seed: int = 0, weights: np.ndarray | None = None) -> FitResult:
    """Minimize mean squared error with minibatch Adam; returns per-epoch mean losses."""
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        raise NeuralError("no training data")
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    rng = np.random.default_rng(seed)
    state = AdamState.zeros_like(params.arrays())
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        tot = 0.0
        for lo in range(0, len(x), batch):
            idx = order[lo:lo + batch]
            tape = Tape()
            leaves = track(params, tape)
            pred = mlp_forward(params, Tensor(x[idx], check=False), leaves)
            diff = pred - y[idx]
            sq = (diff * diff).sum(axis=1)
            if weights is not None:
                sq = sq * weights[idx]
            loss = sq.mean()
            grads = grad(loss, leaves)
            arrs, state = adam_step(params.arrays(), grads, state, lr)
            params = params.with_arrays(arrs)
            tot += loss.item() * len(idx)
        losses.append(tot / len(x))
    return FitResult(params, losses)


# -------------------------------------------------------------- checkpoint

def checkpoint_save(params: MlpParams, path) -> None:
    """Header, a dims line (with head and bound), then one 17-digit value per line."""
    dims = " ".join(str(d) for d in params.dims)
    extra = f" head={params.head}"
    if params.head == "tanh":
        extra += " bound=" + ",".join(format(b, ".17g") for b in params.bound)
    lines = [CKPT_HEADER, dims + extra]
    for a in params.arrays():
        lines.extend(format(v, ".17g") for v in a.ravel())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def checkpoint_load(path) -> MlpParams:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != CKPT_HEADER:
        found = text[0].strip() if text else "<empty file>"
        raise NeuralError(f"{path}: bad checkpoint header {found!r}, expected {CKPT_HEADER!r}")
    if len(text) < 2:
        raise NeuralError(f"{path}: missing dims line")
    head, bound, dims = "linear", None, []
    try:
        for tok in text[1].split():
            if tok.startswith("head="):
                head = tok[5:]
            elif tok.startswith("bound="):
                bound = np.array([float(b) for b in tok[6:].split(",")])
            else:
                dims.append(int(tok))
    except ValueError as exc:
        raise NeuralError(f"{path}: malformed dims line: {exc}") from None
    if len(dims) < 2 or min(dims) < 1:
        raise NeuralError(f"{path}: invalid layer dims {dims}")
    values = [ln for ln in text[2:] if ln.strip()]
    expected = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    if len(values) != expected:
        raise NeuralError(f"{path}: expected {expected} values for dims {dims}, found {len(values)}")
    flat = np.array([float(v) for v in values])
    ws, bs, pos = [], [], 0
    for i in range(len(dims) - 1):
        n = dims[i] * dims[i + 1]
        ws.append(flat[pos:pos + n].reshape(dims[i], dims[i + 1]))
        pos += n
        bs.append(flat[pos:pos + dims[i + 1]].copy())
        pos += dims[i + 1]
    return MlpParams(tuple(dims), ws, bs, head, bound)
