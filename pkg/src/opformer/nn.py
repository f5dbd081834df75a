"""Encoder-decoder operator transformer built on :mod:`opformer.tensor`.

The encoder embeds input tokens (coordinate, function value, problem
parameters) and applies softmax-free Fourier-type attention blocks.  Query
coordinates go through a separate fully connected stack, and the decoder
mixes them with the encoded tokens by linear cross-attention.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from .tensor import Tensor, affine, gelu, layer_norm, no_grad

__all__ = [
    "ModelConfig",
    "OperatorTransformer",
    "ForwardError",
    "EmptySequenceError",
    "fourier_attention",
    "cross_attention",
    "gegelu_ffn",
    "linear",
]


class ForwardError(FloatingPointError):
    """Non-finite activation encountered during a forward pass."""


class EmptySequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 96
    encoder_layers: int = 4
    decoder_depth: int = 3
    ffn_expansion: int = 2
    input_channels: int = 1
    output_channels: int = 1
    query_dim: int = 1
    eps: float = 1e-5
    seed: int = 0
    pre_norm: bool = True

    def __post_init__(self):
        for name in ("embed_dim", "encoder_layers", "decoder_depth", "ffn_expansion",
                     "input_channels", "output_channels", "query_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return affine(x, w, b)


def fourier_attention(q: Tensor, k: Tensor, v: Tensor, eps: float = 1e-5) -> Tensor:
    """(1/n) * LN(q) @ LN(k).T @ v, evaluated as LN(q) @ (LN(k).T @ v) / n.

    The reassociated product costs O(n d^2) instead of O(n^2 d).
    """
    n = q.shape[-2]
    if n == 0:
        raise EmptySequenceError("fourier_attention needs at least one token")
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"incompatible attention shapes {q.shape}, {k.shape}, {v.shape}")
    qh = layer_norm(q, eps=eps)
    kh = layer_norm(k, eps=eps)
    return (qh @ (kh.transpose() @ v)) * (1.0 / n)


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """z[y, s] = sum_i (1/n sum_j k[j, i] v[j, s]) q[y, i]."""
    n = k.shape[-2]
    if n == 0:
        raise EmptySequenceError("cross_attention needs at least one key/value token")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"keys {k.shape} and values {v.shape} disagree on sequence length")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    return q @ (k.transpose() @ v) * (1.0 / n)


def gegelu_ffn(x: Tensor, w: Tensor, b: Tensor, wg: Tensor, bg: Tensor,
               wo: Tensor, bo: Tensor) -> Tensor:
    """Gated-GELU feed-forward: (GELU(xW + b) * (xWg + bg)) Wo + bo."""
    return linear(gelu(linear(x, w, b)) * linear(x, wg, bg), wo, bo)


class OperatorTransformer:
    """Parameter container and forward pass of the operator transformer.

    Inputs are already normalized: ``tokens`` has shape ``(B, n, input_channels)``
    and ``queries`` shape ``(B, m, query_dim)``.  Unbatched 2-d tokens and 1-d
    query lists are accepted and produce an unbatched result.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._rng = np.random.default_rng(config.seed)
        self._build()
        del self._rng

    # -- construction -------------------------------------------------------
    def _dense(self, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        bound = math.sqrt(1.0 / fan_in)
        self._add(f"{name}.w", self._rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        if bias:
            self._add(f"{name}.b", self._rng.uniform(-bound, bound, size=(fan_out,)))

    def _norm(self, name: str, d: int) -> None:
        self._add(f"{name}.gamma", np.ones(d))
        self._add(f"{name}.beta", np.zeros(d))

    def _ffn(self, name: str, d: int, h: int) -> None:
        self._dense(f"{name}.in", d, h)
        self._dense(f"{name}.gate", d, h)
        self._dense(f"{name}.out", h, d)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)

    def _build(self) -> None:
        c = self.config
        d, h = c.embed_dim, c.embed_dim * c.ffn_expansion
        self._dense("embed.0", c.input_channels, d)
        self._dense("embed.1", d, d)
        for i in range(c.encoder_layers):
            p = f"enc.{i}"
            self._norm(f"{p}.norm_attn", d)
            self._dense(f"{p}.wq", d, d, bias=False)
            self._dense(f"{p}.wk", d, d, bias=False)
            self._dense(f"{p}.wv", d, d, bias=False)
            self._norm(f"{p}.norm_ffn", d)
            self._ffn(f"{p}.ffn", d, h)
        self._norm("enc.out_norm", d)
        self._dense("query.0", c.query_dim, d)
        self._dense("query.1", d, d)
        self._dense("query.2", d, d)
        for i in range(c.decoder_depth):
            p = f"dec.{i}"
            self._norm(f"{p}.norm_q", d)
            self._dense(f"{p}.wq", d, d, bias=False)
            self._dense(f"{p}.wk", d, d, bias=False)
            self._dense(f"{p}.wv", d, d, bias=False)
            self._norm(f"{p}.norm_latent", d)
            self._dense(f"{p}.latent", d, d)
            self._norm(f"{p}.norm_ffn", d)
            self._ffn(f"{p}.ffn", d, h)
        self._norm("head.norm", d)
        self._dense("head", d, c.output_channels)

    # -- bookkeeping --------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.grad = None

    # -- forward --------------------------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self._p(f"{name}.gamma"), self._p(f"{name}.beta"), self.config.eps)

    def _lin(self, x: Tensor, name: str) -> Tensor:
        b = self.params.get(f"{name}.b")
        return linear(x, self._p(f"{name}.w"), b)

    def _ffn_apply(self, x: Tensor, name: str) -> Tensor:
        return gegelu_ffn(x, self._p(f"{name}.in.w"), self._p(f"{name}.in.b"),
                          self._p(f"{name}.gate.w"), self._p(f"{name}.gate.b"),
                          self._p(f"{name}.out.w"), self._p(f"{name}.out.b"))

    @staticmethod
    def _check(x: Tensor, where: str) -> Tensor:
        if not np.all(np.isfinite(x.data)):
            raise ForwardError(f"non-finite activation after {where}")
        return x

    def encode(self, tokens: Tensor) -> Tensor:
        c = self.config
        if tokens.shape[-1] != c.input_channels:
            raise ValueError(f"tokens have {tokens.shape[-1]} channels, model expects {c.input_channels}")
        if tokens.shape[-2] == 0:
            raise EmptySequenceError("token sequence is empty")
        h = self._lin(gelu(self._lin(tokens, "embed.0")), "embed.1")
        self._check(h, "embed")
        for i in range(c.encoder_layers):
            p = f"enc.{i}"
            a = self._ln(h, f"{p}.norm_attn") if c.pre_norm else h
            att = fourier_attention(self._lin(a, f"{p}.wq"), self._lin(a, f"{p}.wk"),
                                    self._lin(a, f"{p}.wv"), c.eps)
            h = h + att
            if not c.pre_norm:
                h = self._ln(h, f"{p}.norm_attn")
            a = self._ln(h, f"{p}.norm_ffn") if c.pre_norm else h
            h = h + self._ffn_apply(a, f"{p}.ffn")
            if not c.pre_norm:
                h = self._ln(h, f"{p}.norm_ffn")
            self._check(h, f"encoder layer {i}")
        return self._ln(h, "enc.out_norm")

    def embed_queries(self, queries: Tensor) -> Tensor:
        z = gelu(self._lin(queries, "query.0"))
        z = gelu(self._lin(z, "query.1"))
        return self._check(self._lin(z, "query.2"), "query embedding")

    def decode(self, z: Tensor, enc: Tensor) -> Tensor:
        c = self.config
        for i in range(c.decoder_depth):
            p = f"dec.{i}"
            q = self._lin(self._ln(z, f"{p}.norm_q"), f"{p}.wq")
            k = self._lin(enc, f"{p}.wk")
            v = self._lin(enc, f"{p}.wv")
            z = z + cross_attention(q, k, v)
            z = z + gelu(self._lin(self._ln(z, f"{p}.norm_latent"), f"{p}.latent"))
            z = z + self._ffn_apply(self._ln(z, f"{p}.norm_ffn"), f"{p}.ffn")
            self._check(z, f"decoder block {i}")
        return self._check(self._lin(self._ln(z, "head.norm"), "head"), "output head")

    def forward(self, tokens, queries) -> Tensor:
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        queries = queries if isinstance(queries, Tensor) else Tensor(queries)
        unbatched = tokens.ndim == 2
        if unbatched:
            tokens = tokens.reshape((1,) + tokens.shape)
            if queries.ndim == 1:
                queries = queries.reshape(1, -1, 1)
            else:
                queries = queries.reshape((1,) + queries.shape)
        elif queries.ndim == 2:
            queries = queries.reshape(queries.shape + (1,))
        if queries.shape[-1] != self.config.query_dim:
            raise ValueError(f"queries have width {queries.shape[-1]}, model expects {self.config.query_dim}")
        out = self.decode(self.embed_queries(queries), self.encode(tokens))
        if unbatched:
            out = out.reshape(out.shape[1:])
        return out

    __call__ = forward

    def predict(self, tokens, queries) -> np.ndarray:
        with no_grad():
            return self.forward(tokens, queries).data
