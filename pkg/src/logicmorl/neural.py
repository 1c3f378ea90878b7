"""Small reverse-mode autodiff and the specification-conditioned Q-network.

Only the operations needed by the network are provided: affine layers,
rectifiers, concatenation, row gathers, a fused bidirectional-GRU layer with
hand-written backpropagation through time, and a squared-error loss. Every
array is float64.
"""
from __future__ import annotations

import contextlib
import copy
import io
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import CheckpointError, EmptySequence, NoTape, ShapeError
from .speclang import VOCAB_SIZE

CHECKPOINT_VERSION = 1
N_ACTIONS = 4

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record nothing."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An array plus the information needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=float)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.backward_fn is None:
        raise NoTape("loss was not produced by a recorded forward pass")
    if loss.data.size != 1:
        raise ShapeError("backward() needs a scalar loss")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# operations


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _node(out, (x, w, b), bw)


def joint_linear(states: np.ndarray, goals: Tensor, goal_index: np.ndarray, w: Tensor,
                 b: Tensor) -> Tensor:
    """``concat([states, goals[goal_index]]) @ w + b`` without materializing repeated goal rows."""
    S = states.shape[1]
    if w.shape[0] != S + goals.shape[1]:
        raise ShapeError(f"input width {S + goals.shape[1]} does not match weight {w.shape}")
    w_s, w_g = w.data[:S], w.data[S:]
    gd = goals.data
    projected = gd @ w_g
    out = states @ w_s + projected[goal_index] + b.data

    def bw(g):
        selector = (goal_index[None, :] == np.arange(len(projected))[:, None]).astype(float)
        d_proj = selector @ g
        return d_proj @ w_g.T, np.concatenate([states.T @ g, gd.T @ d_proj]), g.sum(axis=0)

    return _node(out, (goals, w, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return _node(out, parts, bw)


def take_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; gradients scatter-add back."""
    index = np.asarray(index, dtype=int)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), bw)


def _slice(x: Tensor, t: int, lo: int, hi: int) -> Tensor:
    """``x[:, t, lo:hi]`` of a (batch, time, features) tensor."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, t, lo:hi] = g
        return (full,)

    return _node(x.data[:, t, lo:hi], (x,), bw)


def gather_actions(q: Tensor, actions) -> Tensor:
    """``q[i, actions[i]]`` for every row i."""
    actions = np.asarray(actions, dtype=int)
    rows = np.arange(len(actions))

    def bw(g):
        full = np.zeros_like(q.data)
        full[rows, actions] = g
        return (full,)

    return _node(q.data[rows, actions], (q,), bw)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as a constant."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    scale = 2.0 / diff.size
    return _node(np.array(np.mean(diff * diff)), (pred,), lambda g: (g * scale * diff,))


def bigru_layer(x: Tensor, mask: np.ndarray, fwd: Sequence[Tensor], bwd: Sequence[Tensor]) -> Tensor:
    """One bidirectional GRU layer over a padded batch.

    x: (B, T, D); mask: (B, T) with 1 on real tokens, padding at the end.
    ``fwd`` and ``bwd`` are (w_i (D, 3H), w_h (H, 3H), b_i (3H), b_h (3H)) with
    gates laid out [reset | update | candidate]::

        r = s(x Wr + br + h Ur + cr)      z = s(x Wz + bz + h Uz + cz)
        n = tanh(x Wn + bn + r * (h Un + cn))
        h' = (1 - z) * n + z * h          (h' = h where mask is 0)

    Returns (B, T, 2H): forward states followed by backward states at each
    position. Both directions advance together, the backward one reading the
    sequence from the end.
    """
    B, T, D = x.shape
    H = fwd[1].shape[0]
    for w_i, w_h, b_i, b_h in (fwd, bwd):
        if w_i.shape != (D, 3 * H) or w_h.shape != (H, 3 * H) or b_i.shape != (3 * H,) \
                or b_h.shape != (3 * H,):
            raise ShapeError("GRU weight shapes do not match input/hidden sizes")
    x_flat = x.data.reshape(B * T, D)
    wi = (fwd[0].data, bwd[0].data)
    wh = np.ascontiguousarray(np.stack([fwd[1].data, bwd[1].data]))    # (2, H, 3H)
    bh = np.stack([fwd[3].data, bwd[3].data])
    gi = [(x_flat @ wi[d] + (fwd, bwd)[d][2].data).reshape(B, T, 3 * H) for d in range(2)]
    # time-major, direction-stacked gate inputs; step k of the backward pass reads position T-1-k
    G = np.stack([gi[0].transpose(1, 0, 2), gi[1].transpose(1, 0, 2)[::-1]], axis=1)
    G[..., : 2 * H] += bh[None, :, None, : 2 * H]
    m_tb = np.asarray(mask, dtype=float).T
    M = np.ascontiguousarray(np.stack([m_tb, m_tb[::-1]], axis=1))     # (T, 2, B)

    h_prev = np.empty((T, 2, B, H))
    RZ = np.empty((T, 2, B, 2 * H))
    N = np.empty((T, 2, B, H))
    GHN = np.empty((T, 2, B, H))
    out = np.empty((T, 2, B, H))
    _kernels.gru_scan(G, M, wh, np.ascontiguousarray(bh[:, 2 * H:]), h_prev, RZ, N, GHN, out)
    result = np.concatenate([out[:, 0].transpose(1, 0, 2), out[::-1, 1].transpose(1, 0, 2)], axis=2)

    def bw(g):
        d_out = np.ascontiguousarray(
            np.stack([g[:, :, :H].transpose(1, 0, 2), g[:, ::-1, H:].transpose(1, 0, 2)], axis=1))
        dG = np.empty((T, 2, B, 3 * H))
        dGH = np.empty((T, 2, B, 3 * H))
        wh_t = np.ascontiguousarray(wh.transpose(0, 2, 1))
        _kernels.gru_scan_backward(d_out, M, wh_t, h_prev, RZ, N, GHN, dG, dGH)
        grads_dir = []
        dx = np.zeros((B * T, D))
        for d in range(2):
            dgi = dG[:, d] if d == 0 else dG[::-1, d]              # back to position order (T, B, 3H)
            dgi = dgi.transpose(1, 0, 2).reshape(B * T, 3 * H)
            dx += dgi @ wi[d].T
            dwi = x_flat.T @ dgi
            dwh = h_prev[:, d].reshape(T * B, H).T @ dGH[:, d].reshape(T * B, 3 * H)
            grads_dir.append((dwi, dwh, dgi.sum(axis=0), dGH[:, d].sum(axis=(0, 1))))
        return (dx.reshape(B, T, D),) + grads_dir[0] + grads_dir[1]

    return _node(result, (x, *fwd, *bwd), bw)


# ---------------------------------------------------------------------------
# network


def pad_tokens(batch: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """One-hot (B, T, V) inputs and a (B, T) mask for ragged token lists."""
    if not batch or any(len(seq) == 0 for seq in batch):
        raise EmptySequence("cannot encode an empty token sequence")
    T = max(len(seq) for seq in batch)
    x = np.zeros((len(batch), T, VOCAB_SIZE))
    mask = np.zeros((len(batch), T))
    for i, seq in enumerate(batch):
        x[i, np.arange(len(seq)), seq] = 1.0
        mask[i, : len(seq)] = 1.0
    return x, mask


@dataclass(frozen=True)
class Architecture:
    state_dim: int
    vocab: int = VOCAB_SIZE
    enc_hidden: int = 64
    enc_layers: int = 3
    head_hidden: int = 128
    head_layers: int = 4
    n_actions: int = N_ACTIONS

    @property
    def encoding_dim(self) -> int:
        return 2 * self.enc_hidden


class QNetwork:
    """Bidirectional-GRU specification encoder followed by an MLP Q-head.

    Parameters live in ``self.params`` (insertion-ordered name -> Tensor). All
    parameter and gradient arrays are views into two flat buffers, ``flat`` and
    ``flat_grad``, so optimizers can update everything in a handful of
    vectorized operations.
    """

    def __init__(self, arch: Architecture, rng: np.random.Generator | None = None):
        self.arch = arch
        rng = np.random.default_rng(0) if rng is None else rng
        values: dict[str, np.ndarray] = {}
        H = arch.enc_hidden
        for layer in range(arch.enc_layers):
            d_in = arch.vocab if layer == 0 else 2 * H
            for direction in ("fwd", "bwd"):
                bound = 1.0 / np.sqrt(H)
                prefix = f"enc.{layer}.{direction}"
                values[f"{prefix}.w_i"] = rng.uniform(-bound, bound, (d_in, 3 * H))
                values[f"{prefix}.w_h"] = rng.uniform(-bound, bound, (H, 3 * H))
                values[f"{prefix}.b_i"] = rng.uniform(-bound, bound, 3 * H)
                values[f"{prefix}.b_h"] = rng.uniform(-bound, bound, 3 * H)
        widths = [arch.state_dim + arch.encoding_dim] + [arch.head_hidden] * (arch.head_layers - 1)
        widths.append(arch.n_actions)
        for k in range(arch.head_layers):
            bound = 1.0 / np.sqrt(widths[k])
            values[f"head.{k}.w"] = rng.uniform(-bound, bound, (widths[k], widths[k + 1]))
            values[f"head.{k}.b"] = rng.uniform(-bound, bound, widths[k + 1])

        total = sum(v.size for v in values.values())
        self.flat = np.empty(total)
        self.flat_grad = np.zeros(total)
        self.params: dict[str, Tensor] = {}
        offset = 0
        for name, value in values.items():
            view = self.flat[offset: offset + value.size].reshape(value.shape)
            view[...] = value
            p = Tensor(view, requires_grad=True, name=name)
            p.grad = self.flat_grad[offset: offset + value.size].reshape(value.shape)
            self.params[name] = p
            offset += value.size

    # -- forward ----------------------------------------------------------

    def encode(self, token_batch: Sequence[Sequence[int]]) -> Tensor:
        """Encodings (B, 2*hidden): final forward and final backward state of the top layer."""
        x, mask = pad_tokens(token_batch)
        h: Tensor = Tensor(x)
        for layer in range(self.arch.enc_layers):
            dirs = [[self.params[f"enc.{layer}.{d}.{k}"] for k in ("w_i", "w_h", "b_i", "b_h")]
                    for d in ("fwd", "bwd")]
            h = bigru_layer(h, mask, dirs[0], dirs[1])
        T, H = x.shape[1], self.arch.enc_hidden
        return concat([_slice(h, T - 1, 0, H), _slice(h, 0, H, 2 * H)])

    def head(self, states, goals, goal_index=None) -> Tensor:
        """Q-values (N, 4) for state features (N, state_dim) and goal rows.

        ``goals`` is (N, 2*hidden), or (K, 2*hidden) unique rows selected per
        state by ``goal_index`` (N,).
        """
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[1] != self.arch.state_dim:
            raise ShapeError(f"state features must be (N, {self.arch.state_dim}), got {states.shape}")
        goals = as_tensor(goals)
        if goal_index is None:
            goal_index = np.arange(states.shape[0])
        goal_index = np.asarray(goal_index, dtype=int)
        if goals.data.ndim != 2 or goals.shape[1] != self.arch.encoding_dim \
                or goal_index.shape != (states.shape[0],):
            raise ShapeError(f"goal rows must be (K, {self.arch.encoding_dim}) with one index per state")
        h = joint_linear(states, goals, goal_index, self.params["head.0.w"], self.params["head.0.b"])
        for k in range(1, self.arch.head_layers):
            h = linear(relu(h), self.params[f"head.{k}.w"], self.params[f"head.{k}.b"])
        return h

    def forward(self, states, token_batch: Sequence[Sequence[int]], spec_index) -> Tensor:
        """Q-values for rows (states[i], token_batch[spec_index[i]])."""
        return self.head(states, self.encode(token_batch), spec_index)

    def q_values(self, state_features, tokens: Sequence[int]) -> np.ndarray:
        """Length-4 Q-vector for one state and one token sequence."""
        with no_grad():
            q = self.forward(np.asarray(state_features, dtype=float)[None, :], [tokens], [0])
        return q.data[0]

    # -- parameters ---------------------------------------------------------

    def zero_grad(self) -> None:
        self.flat_grad.fill(0.0)

    def backward(self, loss: Tensor) -> None:
        """Backpropagate ``loss``; parameters outside the graph keep a zero gradient."""
        backward(loss)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state or np.shape(state[name]) != p.shape:
                raise ShapeError(f"parameter {name} missing or mis-shaped")
        for name, p in self.params.items():
            p.data[...] = state[name]

    def n_parameters(self) -> int:
        return self.flat.size


def copy_into_target(net: QNetwork, target: QNetwork | None = None) -> QNetwork:
    """Copy the parameters of ``net`` into ``target`` (a new network if omitted)."""
    if target is None:
        target = QNetwork(net.arch)
    target.flat[...] = net.flat
    return target


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a network's flat parameter buffer."""

    def __init__(self, net: QNetwork, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = np.zeros_like(net.flat)
        self.v = np.zeros_like(net.flat)

    def reset(self) -> None:
        self.t = 0
        self.m.fill(0.0)
        self.v.fill(0.0)

    def step(self) -> None:
        self.t += 1
        _kernels.adam_update(self.net.flat, self.net.flat_grad, self.m, self.v,
                             self.lr / (1.0 - self.beta1 ** self.t), self.beta1, self.beta2,
                             1.0 - self.beta2 ** self.t, self.eps)


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One Adam update at step ``t`` (1-based). ``m`` and ``v`` are updated in place."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError("parameter, gradient and moment shapes differ")
    m[...] = beta1 * m + (1.0 - beta1) * grad
    v[...] = beta2 * v + (1.0 - beta2) * (grad * grad)
    step = lr / (1.0 - beta1 ** t)
    return param - step * m / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: QNetwork, optimizer: Adam | None = None, step: int = 0,
                    config: dict | None = None, extra: dict | None = None) -> None:
    """Write an ``.npz`` container with parameters, Adam moments and metadata."""
    meta = {
        "format": "logicmorl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "architecture": net.arch.__dict__,
        "config": config or {},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.data for k, v in net.params.items()}
    if optimizer is not None:
        meta["adam"] = {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
                        "beta2": optimizer.beta2, "eps": optimizer.eps}
        arrays["adam_m"] = optimizer.m
        arrays["adam_v"] = optimizer.v
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


@dataclass
class Checkpoint:
    net: QNetwork
    optimizer: Adam | None
    step: int
    config: dict
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            arrays = {k: data[k] for k in data.files if k != "meta"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != "logicmorl-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    net = QNetwork(Architecture(**meta["architecture"]))
    net.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    optimizer = None
    if "adam" in meta:
        a = meta["adam"]
        optimizer = Adam(net, a["lr"], a["beta1"], a["beta2"], a["eps"])
        optimizer.t = a["t"]
        optimizer.m[...] = arrays["adam_m"]
        optimizer.v[...] = arrays["adam_v"]
    return Checkpoint(net, optimizer, meta["step"], meta["config"], meta["extra"])


def parameter_slice(net: QNetwork, count: int, rng: np.random.Generator,
                    prefixes: Iterable[str] = ("enc.", "head.")) -> list[tuple[str, tuple[int, ...]]]:
    """Random (name, index) pairs spread evenly over parameters matching ``prefixes``."""
    names = [n for n in net.params if any(n.startswith(p) for p in prefixes)]
    picks = []
    for k in range(count):
        name = names[k % len(names)]
        shape = net.params[name].shape
        picks.append((name, tuple(int(rng.integers(s)) for s in shape)))
    return picks
