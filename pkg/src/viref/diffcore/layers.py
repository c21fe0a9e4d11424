"""Network building blocks: multi-layer LSTM, 3-layer affine stacks, dropout, losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Function, Tensor, _sigmoid, _zeros_if_none
from .params import ParameterStore


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# LSTM


class _LstmSequence(Function):
    """One LSTM layer unrolled over a whole sequence, gates ordered (i, f, g, o).

    Rows whose ``mask`` entry is False at step t carry their state through
    unchanged, which lets sequences of different length share a batch.
    """

    def forward(self, x, h0, c0, wx, wh, b, mask=None):
        B, T, _ = x.shape
        H = h0.shape[1]
        self.x, self.wx, self.wh, self.mask = x, wx, wh, mask
        zx = x @ wx + b
        hs = np.empty((B, T, H), dtype=x.dtype)
        self.cache = []
        h, c = h0, c0
        for t in range(T):
            z = zx[:, t] + h @ wh
            s = _sigmoid(z)
            i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 3 * H :]
            g = np.tanh(z[:, 2 * H : 3 * H])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            self.cache.append((h, c, i, f, g, o, tc))
            if mask is not None:
                m = mask[:, t, None]
                h_new = np.where(m, h_new, h)
                c_new = np.where(m, c_new, c)
            h, c = h_new, c_new
            hs[:, t] = h
        return hs, h, c

    def backward(self, g_hs, g_h, g_c):
        x, wx, wh, mask = self.x, self.wx, self.wh, self.mask
        B, T, _ = x.shape
        H = wh.shape[0]
        dtype = x.dtype
        g_hs = _zeros_if_none(g_hs, np.empty((B, T, H), dtype))
        dh = _zeros_if_none(g_h, np.empty((B, H), dtype)).copy()
        dc = _zeros_if_none(g_c, np.empty((B, H), dtype)).copy()
        dz_all = np.empty((B, T, 4 * H), dtype=dtype)
        dwh = np.zeros_like(wh)
        for t in range(T - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = self.cache[t]
            dh = dh + g_hs[:, t]
            if mask is not None:
                m = mask[:, t, None]
                dh_carry = np.where(m, 0.0, dh)
                dc_carry = np.where(m, 0.0, dc)
                dh = np.where(m, dh, 0.0)
                dc = np.where(m, dc, 0.0)
            do = dh * tc
            dcn = dc + dh * o * (1.0 - tc * tc)
            di = dcn * g
            dg = dcn * i
            df = dcn * c_prev
            dz = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1
            )
            dz_all[:, t] = dz
            dwh += h_prev.T @ dz
            dh = dz @ wh.T
            dc = dcn * f
            if mask is not None:
                dh = dh + dh_carry
                dc = dc + dc_carry
        dx = dz_all @ wx.T
        dwx = x.reshape(-1, x.shape[2]).T @ dz_all.reshape(-1, 4 * H)
        db = dz_all.sum(axis=(0, 1))
        return dx, dh, dc, dwx, dwh, db


@dataclass
class LstmState:
    """Per-layer (hidden, cell) pairs, each of shape (batch, hidden_dim)."""

    layers: list[tuple[Tensor, Tensor]]

    @property
    def top_hidden(self) -> Tensor:
        return self.layers[-1][0]

    def __len__(self) -> int:
        return len(self.layers)

    def select(self, rows) -> "LstmState":
        return LstmState([(ad.take_rows(h, rows), ad.take_rows(c, rows)) for h, c in self.layers])


@dataclass
class LstmStack:
    """Geometry of a stacked LSTM whose weights live in a ParameterStore under ``prefix``."""

    prefix: str
    num_layers: int
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.num_layers < 1 or self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigError(f"{self.prefix}: layers and dims must be positive")

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden_dim

    def param_names(self, layer: int) -> tuple[str, str, str]:
        p = f"{self.prefix}.l{layer}"
        return f"{p}.wx", f"{p}.wh", f"{p}.b"

    def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
        H = self.hidden_dim
        for layer in range(self.num_layers):
            wx, wh, b = self.param_names(layer)
            n_in = self.layer_input_dim(layer)
            store.add(wx, uniform_init(rng, (n_in, 4 * H), n_in))
            store.add(wh, uniform_init(rng, (H, 4 * H), H))
            store.add(b, uniform_init(rng, (4 * H,), H))

    def zero_state(self, batch: int, dtype=np.float32) -> LstmState:
        z = np.zeros((batch, self.hidden_dim), dtype=dtype)
        return LstmState([(Tensor(z), Tensor(z)) for _ in range(self.num_layers)])

    def check(self, store: ParameterStore) -> None:
        H = self.hidden_dim
        for layer in range(self.num_layers):
            wx, wh, b = self.param_names(layer)
            want = {wx: (self.layer_input_dim(layer), 4 * H), wh: (H, 4 * H), b: (4 * H,)}
            for name, shape in want.items():
                if store[name].shape != shape:
                    raise ShapeError(f"{self.prefix} layer {layer}: {name} has shape {store[name].shape}, expected {shape}")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return ad.mul(x, keep)


def lstm_forward(
    inputs,
    init_state: LstmState,
    stack: LstmStack,
    store: ParameterStore,
    *,
    train: bool = False,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, LstmState]:
    """Run ``stack`` over inputs of shape (batch, time, input_dim).

    Returns the top layer's outputs (batch, time, hidden) and the final state.
    Dropout is applied to each layer's outputs except the last.
    """
    x = ad.as_tensor(inputs)
    if x.data.ndim != 3:
        raise ShapeError(f"{stack.prefix}: inputs must be (batch, time, dim), got {x.shape}")
    if len(init_state) != stack.num_layers:
        raise ShapeError(f"{stack.prefix}: init state has {len(init_state)} layers, stack has {stack.num_layers}")
    B = x.shape[0]
    final = []
    for layer in range(stack.num_layers):
        n_in = stack.layer_input_dim(layer)
        if x.shape[2] != n_in:
            raise ShapeError(f"{stack.prefix} layer {layer}: input dim {x.shape[2]}, expected {n_in}")
        h0, c0 = init_state.layers[layer]
        for s in (h0, c0):
            if s.shape != (B, stack.hidden_dim):
                raise ShapeError(f"{stack.prefix} layer {layer}: state shape {s.shape}, expected {(B, stack.hidden_dim)}")
        wx, wh, b = (store[n] for n in stack.param_names(layer))
        if wx.shape != (n_in, 4 * stack.hidden_dim):
            raise ShapeError(f"{stack.prefix} layer {layer}: weight shape {wx.shape}")
        hs, h, c = _LstmSequence.apply(x, h0, c0, wx, wh, b, mask=mask)
        final.append((h, c))
        x = hs
        if layer < stack.num_layers - 1:
            x = dropout(x, dropout_p, rng, train)
    return x, LstmState(final)


# ---------------------------------------------------------------------------
# fully-connected stacks


@dataclass
class AffineStack:
    """Three affine layers with rectifiers between them and a linear output."""

    prefix: str
    input_dim: int
    widths: tuple[int, ...]

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ConfigError(f"{self.prefix}: expected exactly 3 layer widths, got {len(self.widths)}")
        if self.input_dim < 1 or min(self.widths) < 1:
            raise ConfigError(f"{self.prefix}: widths must be positive")

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def param_names(self, layer: int) -> tuple[str, str]:
        return f"{self.prefix}.l{layer}.w", f"{self.prefix}.l{layer}.b"

    def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
        n_in = self.input_dim
        for layer, width in enumerate(self.widths):
            w, b = self.param_names(layer)
            store.add(w, uniform_init(rng, (n_in, width), n_in))
            store.add(b, uniform_init(rng, (width,), n_in))
            n_in = width


def affine_stack_forward(
    x,
    stack: AffineStack,
    store: ParameterStore,
    *,
    train: bool = False,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != stack.input_dim:
        raise ShapeError(f"{stack.prefix}: input dim {x.shape[-1]}, expected {stack.input_dim}")
    for layer in range(3):
        w, b = (store[n] for n in stack.param_names(layer))
        x = ad.add(ad.matmul(x, w), b)
        if layer < 2:
            x = dropout(ad.relu(x), dropout_p, rng, train)
    return x


# ---------------------------------------------------------------------------
# probabilities and losses


def softmax(logits) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = ad.as_tensor(logits)
    if not np.issubdtype(x.dtype, np.floating):
        x = ad.Tensor(x.data.astype(np.float64))
    return ad.softmax_op(x)


def _masked_rows(targets, mask) -> tuple[np.ndarray, np.ndarray]:
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    mask = np.ones_like(targets, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape != targets.shape:
        raise ShapeError(f"mask has {mask.size} entries for {targets.size} targets")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise DegenerateBatchError("loss mask selects no positions")
    return rows, targets[rows]


def nll(log_probs, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over mask-true rows of (rows, vocab) log-probs."""
    lp = ad.as_tensor(log_probs)
    lp = ad.reshape(lp, (-1, lp.shape[-1]))
    rows, tgt = _masked_rows(targets, mask)
    picked = ad.pick(ad.take_rows(lp, rows), tgt)
    return ad.mul(ad.tsum(picked), -1.0 / rows.size)


def cross_entropy(step_distributions, targets, mask=None) -> Tensor:
    """Mean of -log p(target) over masked steps of already-normalised distributions.

    Only mask-true rows are read, so padded positions cannot leak into the
    value or gradient.
    """
    p = ad.as_tensor(step_distributions)
    p = ad.reshape(p, (-1, p.shape[-1]))
    rows, tgt = _masked_rows(targets, mask)
    picked = ad.pick(ad.take_rows(p, rows), tgt)
    return ad.mul(ad.tsum(ad.log(picked)), -1.0 / rows.size)


def backward(loss: Tensor, store: ParameterStore) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every trainable entry of ``store``.

    Parameters the loss does not reach get zero arrays.
    """
    trainable = store.trainable()
    grads = ad.grad(loss, list(trainable.values()))
    return dict(zip(trainable.keys(), grads))
