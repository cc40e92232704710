"""Hand-derived recurrent network engine (float64, numpy only).

LSTM gates are packed as ``(i, f, g, o)`` along the leading ``4 * hidden``
axis of ``W``, ``U`` and ``b``. Checkpoints rely on this ordering.

Batched arrays are laid out ``(batch, time, features)``. Every function also
accepts unbatched inputs where noted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FLOAT = np.float64


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


@dataclass
class LstmLayerParams:
    W: np.ndarray  # (4H, D)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=FLOAT)
        self.U = np.asarray(self.U, dtype=FLOAT)
        self.b = np.asarray(self.b, dtype=FLOAT)
        H = self.U.shape[1] if self.U.ndim == 2 else -1
        if (self.U.shape != (4 * H, H) or self.W.ndim != 2 or self.W.shape[0] != 4 * H
                or self.b.shape != (4 * H,)):
            raise ValueError(
                f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}")
        for a in (self.W, self.U, self.b):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite LSTM parameter")

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
             forget_bias: float = 1.0) -> "LstmLayerParams":
        """Glorot-uniform weights, zero biases except the forget gate."""
        H = hidden_dim
        kw = np.sqrt(6.0 / (input_dim + 4 * H))
        ku = np.sqrt(6.0 / (H + 4 * H))
        W = rng.uniform(-kw, kw, size=(4 * H, input_dim))
        U = rng.uniform(-ku, ku, size=(4 * H, H))
        b = np.zeros(4 * H)
        b[H:2 * H] = forget_bias
        return cls(W, U, b)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmLayerParams":
        H = hidden_dim
        return cls(np.zeros((4 * H, input_dim)), np.zeros((4 * H, H)), np.zeros(4 * H))


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class DenseParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=FLOAT)
        self.b = np.asarray(self.b, dtype=FLOAT)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("non-finite dense parameter")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseParams":
        k = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-k, k, size=(out_dim, in_dim)), np.zeros(out_dim))


def dense_forward(params: DenseParams, h: np.ndarray) -> np.ndarray:
    return h @ params.W.T + params.b


def dense_backward(params: DenseParams, h: np.ndarray, dy: np.ndarray):
    """Return ``(dW, db, dh)`` for ``y = h W^T + b`` over arbitrary leading axes."""
    h2 = h.reshape(-1, h.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy2.T @ h2, dy2.sum(axis=0), dy @ params.W


def _check_input(params: LstmLayerParams, x: np.ndarray) -> None:
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"input has {x.shape[-1]} features, layer expects {params.input_dim}")


def lstm_step(params: LstmLayerParams, x: np.ndarray, prev: LstmState) -> LstmState:
    """Advance one LSTM cell by one time step.

    ``x`` is ``(D,)`` or ``(B, D)``; ``prev`` matches with ``(H,)`` or ``(B, H)``.
    """
    x = np.asarray(x, dtype=FLOAT)
    _check_input(params, x)
    H = params.hidden_dim
    if prev.h.shape[-1] != H or prev.c.shape[-1] != H:
        raise ValueError(f"state width {prev.h.shape[-1]} != hidden_dim {H}")
    z = x @ params.W.T + prev.h @ params.U.T + params.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * prev.c + i * g
    return LstmState(o * np.tanh(c), c)


@dataclass
class LayerHistory:
    """Everything one layer's forward pass keeps for BPTT."""
    x: np.ndarray       # (B, T, D) layer inputs
    h: np.ndarray       # (B, T+1, H); index 0 is the initial state
    c: np.ndarray       # (B, T+1, H)
    gates: np.ndarray   # (B, T, 4H) post-activation i, f, g, o
    mask: np.ndarray    # (B, T) bool

    @property
    def outputs(self) -> np.ndarray:
        return self.h[:, 1:]


def lstm_layer_forward(params: LstmLayerParams, x: np.ndarray, init: LstmState,
                       mask: np.ndarray | None = None) -> LayerHistory:
    """Run one layer over ``x`` of shape ``(B, T, D)``.

    Where ``mask`` is false the state is carried over unchanged.
    """
    B, T, _ = x.shape
    if T == 0:
        raise ValueError("empty sequence")
    _check_input(params, x)
    H = params.hidden_dim
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    h = np.empty((B, T + 1, H))
    c = np.empty((B, T + 1, H))
    gates = np.empty((B, T, 4 * H))
    h[:, 0] = init.h
    c[:, 0] = init.c
    xw = x @ params.W.T + params.b
    UT = params.U.T
    all_valid = bool(mask.all())
    for t in range(T):
        z = xw[:, t] + h[:, t] @ UT
        a = gates[:, t]
        a[:, :2 * H] = sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = sigmoid(z[:, 3 * H:])
        ct = a[:, H:2 * H] * c[:, t] + a[:, :H] * a[:, 2 * H:3 * H]
        ht = a[:, 3 * H:] * np.tanh(ct)
        if all_valid:
            c[:, t + 1] = ct
            h[:, t + 1] = ht
        else:
            m = mask[:, t, None]
            c[:, t + 1] = np.where(m, ct, c[:, t])
            h[:, t + 1] = np.where(m, ht, h[:, t])
    return LayerHistory(x=x, h=h, c=c, gates=gates, mask=mask)


def lstm_forward(layers: list[LstmLayerParams], inputs: np.ndarray,
                 init: list[LstmState] | None = None,
                 mask: np.ndarray | None = None):
    """Stacked LSTM forward pass.

    Returns ``(history, finals)``: one :class:`LayerHistory` per layer and the
    final :class:`LstmState` of each layer.
    """
    x = np.asarray(inputs, dtype=FLOAT)
    unbatched = x.ndim == 2
    if unbatched:
        x = x[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    B = x.shape[0]
    if x.shape[1] == 0:
        raise ValueError("empty sequence")
    if init is None:
        init = [LstmState.zeros(p.hidden_dim, B) for p in layers]
    elif unbatched:
        init = [LstmState(s.h[None], s.c[None]) for s in init]
    history = []
    for p, s0 in zip(layers, init):
        hist = lstm_layer_forward(p, x, s0, mask)
        history.append(hist)
        x = hist.outputs
    finals = [LstmState(hh.h[:, -1], hh.c[:, -1]) for hh in history]
    if unbatched:
        finals = [LstmState(s.h[0], s.c[0]) for s in finals]
    return history, finals


@dataclass
class LayerGrads:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray


def lstm_layer_backward(params: LstmLayerParams, hist: LayerHistory,
                        d_out: np.ndarray | None,
                        d_final: LstmState | None = None):
    """Backpropagate through one layer.

    ``d_out`` is the loss gradient w.r.t. the layer outputs ``(B, T, H)``;
    ``d_final`` is the gradient w.r.t. the final ``(h, c)``. Returns
    ``(LayerGrads, dx, d_init)``.
    """
    B, T, H = hist.gates.shape[0], hist.gates.shape[1], params.hidden_dim
    if d_out is not None and d_out.shape != (B, T, H):
        raise ValueError(f"output gradient shape {d_out.shape} != {(B, T, H)}")
    dh = np.zeros((B, H)) if d_final is None else np.array(d_final.h, dtype=FLOAT).reshape(B, H)
    dc = np.zeros((B, H)) if d_final is None else np.array(d_final.c, dtype=FLOAT).reshape(B, H)
    dz_all = np.empty((B, T, 4 * H))
    U = params.U
    all_valid = bool(hist.mask.all())
    for t in range(T - 1, -1, -1):
        if d_out is not None:
            dh = dh + d_out[:, t]
        a = hist.gates[:, t]
        i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        c_prev = hist.c[:, t]
        tc = np.tanh(hist.c[:, t + 1]) if all_valid else None
        if all_valid:
            dh_e, dc_e = dh, dc
            dh_carry = dc_carry = 0.0
        else:
            m = hist.mask[:, t, None]
            dh_e = np.where(m, dh, 0.0)
            dc_e = np.where(m, dc, 0.0)
            dh_carry = np.where(m, 0.0, dh)
            dc_carry = np.where(m, 0.0, dc)
            # on masked steps the stored c is the carried one; recompute the cell value
            tc = np.tanh(f * c_prev + i * g)
        dct = dc_e + dh_e * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dct * g * i * (1.0 - i)
        dz[:, H:2 * H] = dct * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dct * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh_e * tc * o * (1.0 - o)
        dc = dct * f + dc_carry
        dh = dz @ U + dh_carry
    dz2 = dz_all.reshape(B * T, 4 * H)
    grads = LayerGrads(
        W=dz2.T @ hist.x.reshape(B * T, -1),
        U=dz2.T @ hist.h[:, :-1].reshape(B * T, H),
        b=dz2.sum(axis=0),
    )
    dx = dz_all @ params.W
    return grads, dx, LstmState(dh, dc)


def backward_through_time(layers: list[LstmLayerParams], history: list[LayerHistory],
                          d_outputs: np.ndarray | None,
                          d_finals: list[LstmState | None] | None = None):
    """Exact gradients of a stacked LSTM.

    ``d_outputs`` is the gradient w.r.t. the top layer outputs, ``d_finals`` an
    optional per-layer gradient w.r.t. the final states. Returns
    ``(layer_grads, d_inputs, d_inits)``.
    """
    if len(history) != len(layers):
        raise ValueError("history does not match layer count")
    if d_finals is None:
        d_finals = [None] * len(layers)
    grads: list[LayerGrads] = [None] * len(layers)
    d_inits: list[LstmState] = [None] * len(layers)
    d = d_outputs
    for k in range(len(layers) - 1, -1, -1):
        grads[k], d, d_inits[k] = lstm_layer_backward(layers[k], history[k], d, d_finals[k])
    return grads, d, d_inits


def masked_mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Half summed squared error over unmasked steps and its gradient.

    ``pred``/``target`` are ``(..., T, D)``, ``mask`` is ``(..., T)``.
    """
    pred = np.asarray(pred, dtype=FLOAT)
    target = np.asarray(target, dtype=FLOAT)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape[:-1] != mask.shape:
        raise ValueError(f"shape mismatch pred{pred.shape} target{target.shape} mask{mask.shape}")
    if not mask.any():
        raise ValueError("no valid timesteps")
    grad = np.where(mask[..., None], pred - target, 0.0)
    return 0.5 * float(np.sum(grad * grad)), grad


# -- gradient sets are plain ``{name: ndarray}`` dicts -------------------------

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class RmspropState:
    learning_rate: float
    decay_rho: float = 0.9
    epsilon: float = 1e-8
    s: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay_rho < 1:
            raise ValueError("decay_rho must lie in (0, 1)")


def rmsprop_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: RmspropState):
    """One RMSprop step; returns fresh ``(params, state)`` and leaves inputs untouched."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {k}")
    rho, lr, eps = state.decay_rho, state.learning_rate, state.epsilon
    new_s, new_p = {}, {}
    for k, p in params.items():
        g = grads[k]
        s = state.s.get(k)
        s = (1.0 - rho) * g * g if s is None else rho * s + (1.0 - rho) * g * g
        new_s[k] = s
        new_p[k] = p - lr * g / np.sqrt(s + eps)
    return new_p, RmspropState(lr, rho, eps, new_s)
