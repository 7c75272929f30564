from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor, parameter

ACTIVATIONS = ("leaky-relu", "linear", "softmax")


class NoNeighborError(ValueError):
    pass


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class DenseLayer:
    W: Tensor  # (out, in)
    b: Tensor  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, activation: str = "linear", name: str = "") -> "DenseLayer":
        W = parameter(fan_in_uniform(rng, (n_out, n_in), n_in), f"{name}.W")
        b = parameter(fan_in_uniform(rng, (n_out,), n_in), f"{name}.b")
        return cls(W, b, activation)

    @property
    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, x) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x) -> Tensor:
    """``activation(W x + b)`` applied along the last axis; leaky slope 0.01."""
    y = ops.linear(x, layer.W, layer.b)
    if layer.activation == "leaky-relu":
        return ops.leaky_relu(y)
    if layer.activation == "softmax":
        return ops.softmax(y)
    return y


@dataclass
class AttentionHeads:
    """Stacked query-key attention heads; head ``l`` uses ``W_q[l]``, ``W_k[l]``, ``V[l]``."""

    W_q: Tensor  # (heads, attn_dim, embed_dim)
    W_k: Tensor  # (heads, attn_dim, embed_dim)
    V: Tensor  # (heads, value_dim, embed_dim)

    @classmethod
    def init(cls, rng, n_heads: int, embed_dim: int, attn_dim: int, value_dim: int, name: str = "") -> "AttentionHeads":
        return cls(
            parameter(fan_in_uniform(rng, (n_heads, attn_dim, embed_dim), embed_dim), f"{name}.W_q"),
            parameter(fan_in_uniform(rng, (n_heads, attn_dim, embed_dim), embed_dim), f"{name}.W_k"),
            parameter(fan_in_uniform(rng, (n_heads, value_dim, embed_dim), embed_dim), f"{name}.V"),
        )

    @property
    def params(self) -> list[Tensor]:
        return [self.W_q, self.W_k, self.V]

    @property
    def n_heads(self) -> int:
        return self.W_q.shape[0]

    @property
    def out_dim(self) -> int:
        return self.V.shape[0] * self.V.shape[1]

    def __call__(self, e_i, e_j, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Aggregate neighbour embeddings.

        ``e_i``: (B, K, E) query embeddings, ``e_j``: (B, J, E) neighbours,
        ``mask``: (B, J).  Returns the concatenated head outputs (B, K, H*Dv)
        and the attention weights (B, K, H, J); fully masked rows give zeros.
        """
        q = ops.einsum("bke,hae->bkha", e_i, self.W_q)
        k = ops.einsum("bje,hae->bjha", e_j, self.W_k)
        v = ops.einsum("bje,hde->bjhd", e_j, self.V)
        logits = ops.einsum("bkha,bjha->bkhj", q, k)
        m = np.asarray(mask, dtype=bool)[:, None, None, :]
        alpha = ops.masked_softmax(logits, m)
        h = ops.einsum("bkhj,bjhd->bkhd", alpha, v)
        B, K = h.shape[0], h.shape[1]
        return ops.reshape(h, (B, K, self.out_dim)), alpha.value


def attention_scores(e_i, neighbors, head: tuple, mask=None) -> np.ndarray:
    """Weights ``softmax_j(e_j^T W_k^T W_q e_i)`` over unmasked neighbours of one agent.

    ``head`` is a ``(W_k, W_q, V)`` triple of 2-D arrays.  Masked slots get
    exactly zero.
    """
    W_k, W_q, _ = (np.asarray(as_tensor(w).value) for w in head)
    e_i = np.asarray(e_i, dtype=float)
    E = np.asarray(neighbors, dtype=float).reshape(len(neighbors), -1)
    m = np.ones(len(E), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise NoNeighborError("all neighbour slots are masked")
    logits = (E @ W_k.T) @ (W_q @ e_i)
    logits = np.where(m, logits, -np.inf)
    z = np.exp(logits - logits[m].max())
    z = np.where(m, z, 0.0)
    return z / z.sum()


def attention_contribution(alpha, neighbors, head: tuple) -> np.ndarray:
    """``sum_j alpha_j V e_j`` for one head."""
    V = np.asarray(as_tensor(head[2]).value)
    E = np.asarray(neighbors, dtype=float).reshape(len(neighbors), -1)
    a = np.asarray(alpha, dtype=float)
    if a.shape != (len(E),):
        raise ValueError("one weight per neighbour expected")
    return (a[:, None] * (E @ V.T)).sum(axis=0)
