"""Gated transformer trajectory encoder.

Each step becomes a token (observation features, previous action one-hot,
previous cost, previous constraint cost). Tokens pass through a stack of
pre-norm layers; each layer applies multi-head self-attention over the
strictly earlier part of the episode (relative sinusoidal positions, a soft
learnable span per head) and a position-wise feed-forward block, both merged
into the residual stream by GRU-style gates.

A learned "begin" key sits at position -1 of every layer, so the first step
always has something to attend to.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import CausalityError, DegenerateSpanError, DimensionError, ParameterError
from .nn import functional as F
from .nn.params import ParamStore
from .nn.tensor import Tensor, as_tensor, concat, matmul, reshape, sigmoid, tanh, transpose


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    span: int = 100
    ramp: int = 8
    n_layers: int = 2
    gate_bias: float = 2.0
    span_penalty: float = 0.0
    ff_mult: int = 4
    obs_mode: str = "discrete"
    obs_shape: tuple = (16,)
    n_actions: int = 5
    conv_channels: tuple = (8, 16)
    conv_padding: int = 1
    cost_scale: float = 1e-3  # previous-cost input is multiplied by this
    z_init: float | None = None  # default span / 2
    relative_positions: bool = True

    def __post_init__(self):
        self.obs_shape = tuple(int(v) for v in self.obs_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if self.d_model % self.n_heads:
            raise ParameterError("d_model must be divisible by n_heads")
        if self.span < 1 or self.ramp < 1:
            raise ParameterError("span and ramp must be at least 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def aux_dim(self) -> int:
        return self.n_actions + 2

    @property
    def image_input(self) -> bool:
        return self.obs_mode in ("image", "partial")


# -- elementary operations ----------------------------------------------------------------------
def relative_positional_encoding(offset, dim: int) -> np.ndarray:
    """Sinusoid with ``sin`` at even and ``cos`` at odd components; ``offset`` may be an array."""
    off = np.asarray(offset, dtype=np.float64)
    if np.any(off < 0):
        raise ParameterError("offsets must be non-negative")
    freq = 1.0 / (10000.0 ** (2 * np.arange((dim + 1) // 2) / dim))
    angles = off[..., None] * freq
    out = np.empty(off.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles[..., : dim // 2])
    return out


def attention_scores(x_t, x_r, offset: int, W_q, W_k, pos=None) -> float:
    """``x_t^T W_q^T (W_k x_r + p_offset) / sqrt(d_k)`` for a single head."""
    if offset < 1:
        raise CausalityError("a query may only attend to strictly earlier tokens")
    W_q, W_k = np.asarray(W_q), np.asarray(W_k)
    d_k = W_q.shape[0]
    p = relative_positional_encoding(offset, d_k) if pos is None else np.asarray(pos)
    return float((W_q @ np.asarray(x_t)) @ (W_k @ np.asarray(x_r) + p) / math.sqrt(d_k))


def span_mask(distance, z, ramp: float):
    """Soft ramp ``clip((ramp + z - distance) / ramp, 0, 1)``; differentiable in ``z`` when a Tensor."""
    if isinstance(z, Tensor):
        return nn.clip((z + (ramp - np.asarray(distance, dtype=np.float64))) * (1.0 / ramp), 0.0, 1.0)
    return np.clip((ramp + np.asarray(z, dtype=np.float64) - np.asarray(distance, dtype=np.float64)) / ramp, 0.0, 1.0)


def attention_weights(scores, masks, axis: int = -1) -> Tensor:
    """Span-masked softmax; raises if any row has no positive mask."""
    m = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    live = np.broadcast_to(m > 0, np.broadcast_shapes(m.shape, s.shape))
    if not live.any(axis=axis).all():
        raise DegenerateSpanError("every position in the span is masked out")
    return F.masked_softmax(scores, masks, axis=axis)


def attention_output(weights, values, W_v=None) -> np.ndarray:
    """``sum_r a_r W_v x_r`` over the span (``values`` rows are tokens)."""
    values = np.asarray(values)
    if W_v is not None:
        values = values @ np.asarray(W_v).T
    return np.asarray(getattr(weights, "data", weights)) @ values


def gru_gate(x, y, params: dict, gate_bias) -> Tensor:
    """GRU-style merge of skip input ``x`` with sublayer output ``y``.

    ``params`` maps ``Wr, Ur, Wz, Uz, Wg, Ug`` to (d, d) weights; ``gate_bias``
    shifts the update gate towards passing ``x`` through unchanged.
    """
    x, y = as_tensor(x), as_tensor(y)

    def lin(W, v):
        return matmul(v, transpose(as_tensor(W)))

    r = sigmoid(lin(params["Wr"], y) + lin(params["Ur"], x))
    z = sigmoid(lin(params["Wz"], y) + lin(params["Uz"], x) - gate_bias)
    h = tanh(lin(params["Wg"], y) + lin(params["Ug"], r * x))
    return (1.0 - z) * x + z * h


def distance_table(T: int, span: int) -> tuple[np.ndarray, np.ndarray]:
    """Query-by-key distances with key column 0 the begin token at position -1."""
    q = np.arange(T)[:, None]
    kpos = np.arange(-1, T)[None, :]
    dist = q - kpos
    valid = (dist >= 1) & (dist <= span)
    return dist, valid


# -- encoder --------------------------------------------------------------------------------------
_GATE_KEYS = ("Wr", "Ur", "Wz", "Uz", "Wg", "Ug")


class Encoder:
    """Parameter layout under ``prefix``; evaluation against any compatible :class:`ParamStore`."""

    def __init__(self, cfg: EncoderConfig, prefix: str = "enc"):
        self.cfg = cfg
        self.prefix = prefix
        if cfg.image_input:
            if len(cfg.obs_shape) != 3:
                raise DimensionError("image observations must be (C, H, W)")
            self.conv = nn.ConvStack(f"{prefix}.conv", cfg.obs_shape, cfg.conv_channels, 3, cfg.conv_padding)
            feat = self.conv.out_dim
        else:
            if len(cfg.obs_shape) != 1:
                raise DimensionError("discrete observations must be flat vectors")
            self.conv = None
            feat = cfg.obs_shape[0]
        self.feat_dim = feat
        self.embed = nn.Dense(f"{prefix}.embed", feat + cfg.aux_dim, cfg.d_model)
        d, ff = cfg.d_model, cfg.d_model * cfg.ff_mult
        self.ff = [
            (nn.Dense(f"{prefix}.l{i}.ff0", d, ff), nn.Dense(f"{prefix}.l{i}.ff1", ff, d)) for i in range(cfg.n_layers)
        ]
        self._pos_cache: dict = {}

    # parameters ---------------------------------------------------------------------------------
    def p(self, layer: int, name: str) -> str:
        return f"{self.prefix}.l{layer}.{name}"

    def init(self, store: ParamStore, rng) -> None:
        cfg = self.cfg
        d = cfg.d_model
        if self.conv is not None:
            self.conv.init(store, rng)
        self.embed.init(store, rng)
        z0 = cfg.span / 2.0 if cfg.z_init is None else cfg.z_init
        for i in range(cfg.n_layers):
            for ln in ("ln1", "ln2"):
                store.add(self.p(i, f"{ln}.scale"), np.ones(d))
                store.add(self.p(i, f"{ln}.shift"), np.zeros(d))
            for w in ("Wq", "Wk", "Wv", "Wo"):
                store.add(self.p(i, w), nn.uniform_init(rng, d, (d, d)))
            store.add(self.p(i, "begin"), nn.uniform_init(rng, d, (d,)))
            store.add(self.p(i, "z"), np.full(cfg.n_heads, float(np.clip(z0, 1.0, cfg.span))))
            for g in ("g1", "g2"):
                for k in _GATE_KEYS:
                    store.add(self.p(i, f"{g}.{k}"), nn.uniform_init(rng, d, (d, d)))
                store.add(self.p(i, f"{g}.bg"), np.full(d, float(cfg.gate_bias)))
            self.ff[i][0].init(store, rng)
            self.ff[i][1].init(store, rng)

    def clamp_spans(self, store: ParamStore) -> None:
        """Project every head's span length back into [1, span]."""
        for i in range(self.cfg.n_layers):
            t = store[self.p(i, "z")]
            t.data = np.clip(t.data, 1.0, float(self.cfg.span))

    def span_penalty(self, store: ParamStore) -> Tensor:
        total = Tensor(0.0)
        for i in range(self.cfg.n_layers):
            total = total + store[self.p(i, "z")].sum()
        return total * self.cfg.span_penalty

    # tokens -------------------------------------------------------------------------------------
    def aux_features(self, prev_actions, prev_costs, prev_constraint) -> np.ndarray:
        """(..., n_actions + 2) block: one-hot previous action (-1 for none), scaled cost, constraint cost."""
        a = np.asarray(prev_actions, dtype=int)
        onehot = np.zeros(a.shape + (self.cfg.n_actions,))
        valid = a >= 0
        onehot[valid, a[valid]] = 1.0
        c = np.asarray(prev_costs, dtype=np.float64)[..., None] * self.cfg.cost_scale
        dd = np.asarray(prev_constraint, dtype=np.float64)[..., None]
        return np.concatenate([onehot, c, dd], axis=-1)

    def embed_tokens(self, store: ParamStore, obs, aux) -> Tensor:
        """Map (N, T, *obs_shape) observations and (N, T, aux) scalars to (N, T, d_model)."""
        obs = np.asarray(obs, dtype=np.float64)
        aux = np.asarray(aux, dtype=np.float64)
        if obs.shape[2:] != self.cfg.obs_shape:
            raise DimensionError(f"observation shape {obs.shape[2:]} != configured {self.cfg.obs_shape}")
        N, T = obs.shape[:2]
        flat = obs.reshape((N * T,) + self.cfg.obs_shape)
        feats = self.conv(store, flat) if self.conv is not None else Tensor(flat)
        x = concat([feats, Tensor(aux.reshape(N * T, -1))], axis=-1)
        return reshape(self.embed(store, x), (N, T, self.cfg.d_model))

    # layers -------------------------------------------------------------------------------------
    def positions(self, T: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if T not in self._pos_cache:
            dist, valid = distance_table(T, self.cfg.span)
            P = relative_positional_encoding(np.maximum(dist, 0), self.cfg.d_k) * valid[..., None]
            if not self.cfg.relative_positions:
                P = np.zeros_like(P)
            self._pos_cache[T] = (dist.astype(np.float64), valid, P)
        return self._pos_cache[T]

    def span_masks(self, store: ParamStore, layer: int, T: int) -> Tensor:
        dist, valid, _ = self.positions(T)
        z = reshape(store[self.p(layer, "z")], (self.cfg.n_heads, 1, 1))
        return span_mask(dist[None], z, self.cfg.ramp) * valid[None].astype(np.float64)

    def attention(self, store: ParamStore, layer: int, y: Tensor, keep: list | None = None) -> Tensor:
        cfg = self.cfg
        N, T, d = y.shape
        H, dk = cfg.n_heads, cfg.d_k
        begin = store[self.p(layer, "begin")]
        keys_in = concat([reshape(begin, (1, 1, d)) * np.ones((N, 1, 1)), y], axis=1)

        def heads(t: Tensor, L: int) -> Tensor:
            return transpose(reshape(t, (N, L, H, dk)), (0, 2, 1, 3))

        q = heads(matmul(y, transpose(store[self.p(layer, "Wq")])), T)
        k = heads(matmul(keys_in, transpose(store[self.p(layer, "Wk")])), T + 1)
        v = heads(matmul(keys_in, transpose(store[self.p(layer, "Wv")])), T + 1)
        _, _, P = self.positions(T)
        # positional term per query step as one batched matmul: (T, N*H, dk) @ (T, dk, T+1)
        qt = reshape(transpose(q, (2, 0, 1, 3)), (T, N * H, dk))
        pos = transpose(reshape(matmul(qt, np.swapaxes(P, 1, 2)), (T, N, H, T + 1)), (1, 2, 0, 3))
        scores = (matmul(q, transpose(k, (0, 1, 3, 2))) + pos) * (1.0 / math.sqrt(dk))
        masks = self.span_masks(store, layer, T)
        weights = attention_weights(scores, reshape(masks, (1, H, T, T + 1)))
        if keep is not None:
            keep.append(weights.data)
        out = transpose(matmul(weights, v), (0, 2, 1, 3))
        return matmul(reshape(out, (N, T, d)), transpose(store[self.p(layer, "Wo")]))

    def gate(self, store: ParamStore, layer: int, which: str, x: Tensor, y: Tensor) -> Tensor:
        params = {k: store[self.p(layer, f"{which}.{k}")] for k in _GATE_KEYS}
        return gru_gate(x, y, params, store[self.p(layer, f"{which}.bg")])

    def layer_norm(self, store, layer, name, x):
        return F.layer_norm(x, store[self.p(layer, f"{name}.scale")], store[self.p(layer, f"{name}.shift")])

    def run_layers(self, store: ParamStore, h: Tensor, keep: list | None = None) -> Tensor:
        for i in range(self.cfg.n_layers):
            a = self.attention(store, i, self.layer_norm(store, i, "ln1", h), keep)
            g1 = self.gate(store, i, "g1", h, a)
            f0, f1 = self.ff[i]
            ffo = f1(store, nn.relu(f0(store, self.layer_norm(store, i, "ln2", g1))))
            h = self.gate(store, i, "g2", g1, ffo)
        return h

    def forward(self, store: ParamStore, obs, aux, keep: list | None = None) -> Tensor:
        """Full (N, T, d_model) encoded sequence; row t depends only on tokens 0..t.

        Pass a list as ``keep`` to collect each layer's (N, H, T, T+1) attention weights.
        """
        return self.run_layers(store, self.embed_tokens(store, obs, aux), keep)

    def encode_last(self, store: ParamStore, obs, aux) -> Tensor:
        """Encoding ``g`` at the final step of each sequence, shape (N, d_model)."""
        out = self.forward(store, obs, aux)
        return out[:, -1, :]


class EncoderStream:
    """Step-by-step encoding of one episode with cached keys and values.

    ``push`` returns the same row that :meth:`Encoder.forward` would produce for
    the newest step of the prefix, without re-encoding the earlier steps.
    Evaluation only (no gradients).
    """

    def __init__(self, encoder: Encoder, store: ParamStore):
        self.enc = encoder
        self.store = store
        cfg = encoder.cfg
        self.t = 0
        self.keys: list[list[np.ndarray]] = [[] for _ in range(cfg.n_layers)]
        self.values: list[list[np.ndarray]] = [[] for _ in range(cfg.n_layers)]
        self._begin = []
        for i in range(cfg.n_layers):
            b = store[encoder.p(i, "begin")].data
            self._begin.append((self._heads(store[encoder.p(i, "Wk")].data @ b),
                                self._heads(store[encoder.p(i, "Wv")].data @ b)))

    def _heads(self, v: np.ndarray) -> np.ndarray:
        return v.reshape(self.enc.cfg.n_heads, self.enc.cfg.d_k)

    def _ln(self, layer: int, name: str, x: np.ndarray) -> np.ndarray:
        mu = x.mean()
        xc = x - mu
        xhat = xc / np.sqrt((xc * xc).mean() + 1e-5)
        return xhat * self.store[self.enc.p(layer, f"{name}.scale")].data + self.store[self.enc.p(layer, f"{name}.shift")].data

    def _gate(self, layer: int, which: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        W = {k: self.store[self.enc.p(layer, f"{which}.{k}")].data for k in _GATE_KEYS + ("bg",)}
        sig = nn.tensor._sigmoid
        r = sig(W["Wr"] @ y + W["Ur"] @ x)
        z = sig(W["Wz"] @ y + W["Uz"] @ x - W["bg"])
        h = np.tanh(W["Wg"] @ y + W["Ug"] @ (r * x))
        return (1.0 - z) * x + z * h

    def push(self, obs, aux) -> np.ndarray:
        enc, cfg, store = self.enc, self.enc.cfg, self.store
        with nn.no_grad():
            h = enc.embed_tokens(store, np.asarray(obs, dtype=np.float64)[None, None],
                                 np.asarray(aux, dtype=np.float64)[None, None]).data[0, 0]
        t = self.t
        dist = t - np.arange(-1, t)  # t+1 .. 1
        valid = dist <= cfg.span
        P = relative_positional_encoding(dist, cfg.d_k) * valid[:, None]
        if not cfg.relative_positions:
            P = np.zeros_like(P)
        for i in range(cfg.n_layers):
            y = self._ln(i, "ln1", h)
            q = self._heads(store[enc.p(i, "Wq")].data @ y)
            bk, bv = self._begin[i]
            K = np.concatenate([bk[:, None], *[k[:, None] for k in self.keys[i]]], axis=1)
            V = np.concatenate([bv[:, None], *[v[:, None] for v in self.values[i]]], axis=1)
            scores = (np.einsum("hd,hjd->hj", q, K) + q @ P.T) / math.sqrt(cfg.d_k)
            z = store[enc.p(i, "z")].data[:, None]
            masks = span_mask(dist[None], z, cfg.ramp) * valid[None]
            w = F.masked_softmax(scores, masks).data
            a = store[enc.p(i, "Wo")].data @ np.einsum("hj,hjd->hd", w, V).reshape(-1)
            self.keys[i].append(self._heads(store[enc.p(i, "Wk")].data @ y))
            self.values[i].append(self._heads(store[enc.p(i, "Wv")].data @ y))
            g1 = self._gate(i, "g1", h, a)
            f0, f1 = enc.ff[i]
            u = self._ln(i, "ln2", g1)
            u = np.maximum(store[f"{f0.prefix}.W"].data @ u + store[f"{f0.prefix}.b"].data, 0.0)
            u = store[f"{f1.prefix}.W"].data @ u + store[f"{f1.prefix}.b"].data
            h = self._gate(i, "g2", g1, u)
        self.t += 1
        return h


def encoder_forward(tokens, cfg: EncoderConfig, store: ParamStore, encoder: Encoder | None = None) -> Tensor:
    """Encode pre-embedded (T, d_model) or (N, T, d_model) tokens; returns the same shape."""
    enc = encoder or Encoder(cfg)
    t = as_tensor(tokens)
    squeeze = t.ndim == 2
    if squeeze:
        t = reshape(t, (1,) + t.shape)
    out = enc.run_layers(store, t)
    return out[0] if squeeze else out


# -- attention dump -----------------------------------------------------------------------------
ATTENTION_COLUMNS = ("step", "layer", "head", "key_step", "weight")


def attention_rows(weights_per_layer, episode: int = 0, min_weight: float = 0.0):
    """Yield ``(step, layer, head, key_step, weight)``; key step -1 is the begin token."""
    for layer, w in enumerate(weights_per_layer):
        w = np.asarray(w)[episode]
        H, T, K = w.shape
        for t in range(T):
            for h in range(H):
                for j in range(K):
                    key = j - 1
                    if 1 <= t - key and w[h, t, j] > min_weight:
                        yield t, layer, h, key, float(w[h, t, j])


def dump_attention(path, weights_per_layer, episode: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ATTENTION_COLUMNS)
        for row in attention_rows(weights_per_layer, episode):
            writer.writerow([row[0], row[1], row[2], row[3], repr(row[4])])
    return path
