"""Encoder, projection heads, aggregation functions and the momentum pair.

The encoder is a small 3D CNN: conv -> bias -> ReLU -> average pool per
block, then a global average pool, so the same weights accept any clip
length. The pooled feature vector splits positionally into a stationary
half (leading components) and a non-stationary half (trailing
components).

The key branch mirrors the query branch structurally; its parameters are
never attached to a differentiation graph and change only through the
momentum update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelError(ValueError):
    """Raised on model configuration or shape problems."""


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 64

    def __post_init__(self):
        if self.feature_dim % 2 != 0:
            raise ModelError(f"feature_dim must be even, got {self.feature_dim}")
        if self.channels[-1] != self.feature_dim:
            raise ModelError(
                f"last conv width {self.channels[-1]} must equal "
                f"feature_dim {self.feature_dim}")

    @property
    def half_dim(self) -> int:
        return self.feature_dim // 2


@dataclass
class Features:
    """Batched encoder output with its positional half split."""
    full: Tensor            # [B, D]
    stationary: Tensor      # [B, D/2], leading components
    non_stationary: Tensor  # [B, D/2], trailing components


def split_features(full: Tensor) -> Features:
    d = full.shape[-1]
    return Features(full=full,
                    stationary=T.slice_lastdim(full, 0, d // 2),
                    non_stationary=T.slice_lastdim(full, d // 2, d))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Encoder:
    """Small 3D CNN mapping [B,3,T,H,W] clips to [B,D] features."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 trainable: bool = True):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        c_prev = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            fan_in = c_prev * 27
            # channels-last kernel layout [kt,kh,kw,C_in,C_out]
            self.params[f"conv{i}.w"] = Tensor(
                _uniform(rng, (3, 3, 3, c_prev, c), fan_in), requires_grad=trainable)
            self.params[f"conv{i}.b"] = Tensor(
                _uniform(rng, (c,), fan_in), requires_grad=trainable)
            c_prev = c

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @staticmethod
    def _pool_window(block: int, t: int, h: int, w: int) -> tuple[int, int, int]:
        # spatial halving whenever divisible; temporal halving from block 1 on
        wt = 2 if block >= 1 and t % 2 == 0 and t >= 2 else 1
        wh = 2 if h % 2 == 0 and h >= 2 else 1
        ww = 2 if w % 2 == 0 and w >= 2 else 1
        return (wt, wh, ww)

    def forward(self, clips: np.ndarray) -> Tensor:
        arr = np.asarray(clips, dtype=np.float64)
        if arr.ndim != 5 or arr.shape[1] != self.cfg.in_channels:
            raise ModelError(
                f"encoder expects [B,{self.cfg.in_channels},T,H,W], got {arr.shape}")
        # channels-last internally; only the 3-channel input pays a transpose
        x = Tensor(np.ascontiguousarray(np.moveaxis(arr, 1, -1)))
        for i in range(len(self.cfg.channels)):
            x = T.conv3d_cl(x, self.params[f"conv{i}.w"], pad=(1, 1, 1))
            x = T.bias_add(x, self.params[f"conv{i}.b"], axis=4)
            x = T.relu(x)
            window = self._pool_window(i, *x.shape[1:4])
            if window != (1, 1, 1):
                x = T.avg_pool3d_cl(x, window=window)
        return T.global_avg_pool3d_cl(x)

    def encode(self, clips: np.ndarray) -> Features:
        """Features for a batch of clips; accepts a single [3,T,H,W] clip too."""
        arr = np.asarray(clips, dtype=np.float64)
        if arr.ndim == 4:
            arr = arr[None]
        return split_features(self.forward(arr))


class TwoLayerHead:
    """linear -> ReLU -> linear, square in every layer (output dim = input dim)."""

    def __init__(self, dim: int, rng: np.random.Generator, trainable: bool = True):
        self.dim = dim
        self.params = {
            "w1": Tensor(_uniform(rng, (dim, dim), dim), requires_grad=trainable),
            "b1": Tensor(_uniform(rng, (dim,), dim), requires_grad=trainable),
            "w2": Tensor(_uniform(rng, (dim, dim), dim), requires_grad=trainable),
            "b2": Tensor(_uniform(rng, (dim,), dim), requires_grad=trainable),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def apply(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.dim:
            raise ModelError(f"head expects [B,{self.dim}], got {z.shape}")
        hidden = T.relu(T.bias_add(T.matmul(z, self.params["w1"]), self.params["b1"], axis=1))
        return T.bias_add(T.matmul(hidden, self.params["w2"]), self.params["b2"], axis=1)


# ---------------------------------------------------------------------------
# aggregation functions

class SumAggregator:
    kind = "sum"

    def __init__(self, n_views: int, half_dim: int):
        self.n_views = n_views
        self.half_dim = half_dim

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def __call__(self, parts: list[Tensor]) -> Tensor:
        if not parts:
            raise ModelError("aggregate: empty input list")
        out = parts[0]
        for p in parts[1:]:
            out = T.add(out, p)
        return out


class LinearAggregator:
    kind = "linear"

    def __init__(self, n_views: int, half_dim: int, rng: np.random.Generator,
                 trainable: bool = True):
        self.n_views = n_views
        self.half_dim = half_dim
        fan_in = n_views * half_dim
        self.params = {
            "w": Tensor(_uniform(rng, (fan_in, half_dim), fan_in), requires_grad=trainable),
            "b": Tensor(_uniform(rng, (half_dim,), fan_in), requires_grad=trainable),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, parts: list[Tensor]) -> Tensor:
        if len(parts) != self.n_views:
            raise ModelError(f"linear aggregator built for N={self.n_views}, got {len(parts)}")
        joined = T.concat_lastdim(parts)
        return T.bias_add(T.matmul(joined, self.params["w"]), self.params["b"], axis=1)


class MLPAggregator:
    kind = "mlp"

    def __init__(self, n_views: int, half_dim: int, rng: np.random.Generator,
                 trainable: bool = True):
        self.n_views = n_views
        self.half_dim = half_dim
        fan_in = n_views * half_dim
        self.params = {
            "w1": Tensor(_uniform(rng, (fan_in, fan_in), fan_in), requires_grad=trainable),
            "b1": Tensor(_uniform(rng, (fan_in,), fan_in), requires_grad=trainable),
            "w2": Tensor(_uniform(rng, (fan_in, half_dim), fan_in), requires_grad=trainable),
            "b2": Tensor(_uniform(rng, (half_dim,), fan_in), requires_grad=trainable),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, parts: list[Tensor]) -> Tensor:
        if len(parts) != self.n_views:
            raise ModelError(f"mlp aggregator built for N={self.n_views}, got {len(parts)}")
        joined = T.concat_lastdim(parts)
        hidden = T.relu(T.bias_add(T.matmul(joined, self.params["w1"]),
                                   self.params["b1"], axis=1))
        return T.bias_add(T.matmul(hidden, self.params["w2"]), self.params["b2"], axis=1)


class GRUAggregator:
    """Single GRU cell consuming the short-view features in index order
    from a zero initial state; the aggregate is the final hidden state.

    Cell equations (per step, input x, state h):
        r = sigmoid(x Wr + h Ur + br)
        z = sigmoid(x Wz + h Uz + bz)
        n = tanh(x Wn + r * (h Un) + bn)
        h' = (1 - z) * n + z * h
    """

    kind = "gru"

    def __init__(self, n_views: int, half_dim: int, rng: np.random.Generator,
                 trainable: bool = True):
        self.n_views = n_views
        self.half_dim = half_dim
        self.params = {}
        for gate in ("r", "z", "n"):
            self.params[f"w{gate}"] = Tensor(
                _uniform(rng, (half_dim, half_dim), half_dim), requires_grad=trainable)
            self.params[f"u{gate}"] = Tensor(
                _uniform(rng, (half_dim, half_dim), half_dim), requires_grad=trainable)
            self.params[f"b{gate}"] = Tensor(
                _uniform(rng, (half_dim,), half_dim), requires_grad=trainable)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, parts: list[Tensor]) -> Tensor:
        if not parts:
            raise ModelError("aggregate: empty input list")
        p = self.params
        batch = parts[0].shape[0]
        h = Tensor(np.zeros((batch, self.half_dim)))
        ones = Tensor(np.ones((batch, self.half_dim)))
        for x in parts:
            r = T.sigmoid(T.bias_add(T.add(T.matmul(x, p["wr"]), T.matmul(h, p["ur"])),
                                     p["br"], axis=1))
            z = T.sigmoid(T.bias_add(T.add(T.matmul(x, p["wz"]), T.matmul(h, p["uz"])),
                                     p["bz"], axis=1))
            n = T.tanh(T.bias_add(T.add(T.matmul(x, p["wn"]),
                                        T.mul(r, T.matmul(h, p["un"]))),
                                  p["bn"], axis=1))
            h = T.add(T.mul(T.sub(ones, z), n), T.mul(z, h))
        return h


AGGREGATOR_KINDS = ("sum", "linear", "mlp", "gru")


def make_aggregator(kind: str, n_views: int, half_dim: int,
                    rng: np.random.Generator, trainable: bool = True):
    if kind == "sum":
        return SumAggregator(n_views, half_dim)
    if kind == "linear":
        return LinearAggregator(n_views, half_dim, rng, trainable)
    if kind == "mlp":
        return MLPAggregator(n_views, half_dim, rng, trainable)
    if kind == "gru":
        return GRUAggregator(n_views, half_dim, rng, trainable)
    raise ModelError(f"unknown aggregator kind {kind!r}")


# ---------------------------------------------------------------------------
# query/key pair

class Branch:
    """One encoder plus its three projection heads."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 trainable: bool = True):
        self.encoder = Encoder(cfg, rng, trainable)
        self.head_stationary = TwoLayerHead(cfg.half_dim, rng, trainable)
        self.head_non_stationary = TwoLayerHead(cfg.half_dim, rng, trainable)
        self.head_instance = TwoLayerHead(cfg.feature_dim, rng, trainable)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, comp in (("enc", self.encoder),
                             ("head_s", self.head_stationary),
                             ("head_n", self.head_non_stationary),
                             ("head_i", self.head_instance)):
            for name, p in comp.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out


class ModelPair:
    """Gradient-trained query branch plus momentum-averaged key branch.

    The key branch starts as a value copy of the query branch. Its
    parameters carry requires_grad=False, so no forward pass through it
    ever records a graph; they move only in momentum_update().
    """

    def __init__(self, cfg: EncoderConfig, n_views: int, aggregator_kind: str,
                 momentum: float, rng: np.random.Generator):
        if not (0.0 <= momentum < 1.0 or momentum == 1.0):
            raise ModelError(f"momentum must be in [0, 1], got {momentum}")
        self.cfg = cfg
        self.momentum = momentum
        self.query = Branch(cfg, rng, trainable=True)
        self.aggregator = make_aggregator(aggregator_kind, n_views, cfg.half_dim, rng)
        self.key = Branch(cfg, np.random.default_rng(0), trainable=False)
        for name, kp in self.key.parameters().items():
            kp.data[...] = self.query.parameters()[name].data

    def momentum_update(self) -> None:
        m = self.momentum
        qp = self.query.parameters()
        for name, kp in self.key.parameters().items():
            q = qp[name]
            if q.data.shape != kp.data.shape:
                raise ModelError(
                    f"momentum_update: {name} shapes differ {q.data.shape} vs {kp.data.shape}")
            # delta form of m*k + (1-m)*q: exact fixed point when k == q
            kp.data += (1.0 - m) * (q.data - kp.data)

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {f"query.{n}": p for n, p in self.query.parameters().items()}
        out.update({f"agg.{n}": p for n, p in self.aggregator.parameters().items()})
        return out

    def all_parameters(self) -> dict[str, Tensor]:
        out = {f"query.{n}": p for n, p in self.query.parameters().items()}
        out.update({f"key.{n}": p for n, p in self.key.parameters().items()})
        out.update({f"agg.{n}": p for n, p in self.aggregator.parameters().items()})
        return out
