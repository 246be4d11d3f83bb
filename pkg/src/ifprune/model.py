"""Decoder-only transformer whose gated FFN channels can be masked per sequence."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    d_ffn: int = 256
    t_ffn: int = 96
    n_heads: int = 4
    vocab: int = 64
    max_seq: int = 256

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.t_ffn > self.d_ffn:
            raise ValueError(f"t_ffn={self.t_ffn} exceeds d_ffn={self.d_ffn}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


def init_params(cfg: ModelConfig, rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    """Scaled-normal weights, unit norm gains. Output projection is tied to the embedding."""
    d, f = cfg.d_model, cfg.d_ffn

    def normal(name, shape, std):
        return name, Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=prefix + name)

    def ones(name, n):
        return name, Tensor(np.ones(n), requires_grad=True, name=prefix + name)

    items = [normal("tok_emb", (cfg.vocab, d), 1.0 / np.sqrt(d)),
             normal("pos_emb", (cfg.max_seq, d), 0.1 / np.sqrt(d))]
    resid_std = 1.0 / np.sqrt(2 * cfg.n_layers)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        items += [
            ones(p + "attn_norm", d),
            normal(p + "wq", (d, d), 1.0 / np.sqrt(d)),
            normal(p + "wk", (d, d), 1.0 / np.sqrt(d)),
            normal(p + "wv", (d, d), 1.0 / np.sqrt(d)),
            normal(p + "wo", (d, d), resid_std / np.sqrt(d)),
            ones(p + "ffn_norm", d),
            normal(p + "w1", (d, f), 1.0 / np.sqrt(d)),
            normal(p + "w3", (d, f), 1.0 / np.sqrt(d)),
            normal(p + "w2", (f, d), resid_std / np.sqrt(f)),
        ]
    items.append(ones("final_norm", d))
    return dict(items)


def ffn_forward_masked(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor, m=None) -> Tensor:
    """((SiLU(x W1) * (x W3)) * m) W2, with m broadcast over positions.

    ``m`` is a (d_ffn,) vector, or (B, 1, d_ffn) for one mask per sequence.
    """
    h = T.silu(x @ w1) * (x @ w3)
    if m is not None:
        m = T.as_tensor(m)
        if m.shape[-1] != h.shape[-1]:
            raise ShapeError(f"ffn mask width {m.shape[-1]} != d_ffn {h.shape[-1]}")
        h = h * m
    return h @ w2


class Transformer:
    """Pre-norm causal transformer with learned positions and tied embeddings."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, prefix: str = "") -> "Transformer":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), prefix))

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ShapeError(f"tokens must be a nonempty (B, n) array, got shape {tokens.shape}")
        if tokens.shape[1] > self.cfg.max_seq:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq {self.cfg.max_seq}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise ValueError(f"token id outside [0, {self.cfg.vocab})")
        return tokens

    def _mask_rows(self, mask, batch: int):
        """Normalize a mask argument to per-layer tensors of shape (B|1, 1, d_ffn)."""
        if mask is None:
            return [None] * self.cfg.n_layers
        if not isinstance(mask, Tensor):
            mask = Tensor(getattr(mask, "m", mask))
        L, f = self.cfg.n_layers, self.cfg.d_ffn
        if mask.ndim == 2:
            mask = mask.reshape(1, L, f) if mask.shape == (L, f) else mask
        if mask.ndim != 3 or mask.shape[1:] != (L, f) or mask.shape[0] not in (1, batch):
            raise ShapeError(f"mask shape {mask.shape} does not fit (B={batch}, L={L}, d_ffn={f})")
        if np.any(mask.data < 0) or np.any(mask.data > 1):
            raise ValueError("mask entries must lie in [0, 1]")
        return [mask[:, i:i + 1, :] for i in range(L)]

    def hidden(self, tokens, mask=None) -> Tensor:
        """Final normalized hidden states, shape (B, n, d)."""
        tokens = self._check_tokens(tokens)
        B, n = tokens.shape
        cfg, P = self.cfg, self.params
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        causal = Tensor(np.triu(np.full((n, n), NEG_INF), k=1))
        scale = 1.0 / np.sqrt(dh)
        masks = self._mask_rows(mask, B)

        x = T.embedding(P["tok_emb"], tokens) + P["pos_emb"][:n]
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h = T.rms_norm(x, P[p + "attn_norm"])
            q = (h @ P[p + "wq"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            k = (h @ P[p + "wk"]).reshape(B, n, H, dh).transpose(0, 2, 3, 1)
            v = (h @ P[p + "wv"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            att = T.softmax((q @ k) * scale + causal)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, cfg.d_model)
            x = x + y @ P[p + "wo"]
            h = T.rms_norm(x, P[p + "ffn_norm"])
            x = x + ffn_forward_masked(h, P[p + "w1"], P[p + "w3"], P[p + "w2"], masks[i])
        return T.rms_norm(x, P["final_norm"])

    def forward(self, tokens, mask=None) -> Tensor:
        """Logits of shape (B, n, vocab). ``mask`` is a Mask, (L, d_ffn) or (B, L, d_ffn)."""
        return self.hidden(tokens, mask) @ self.params["tok_emb"].transpose()

    __call__ = forward


def loss_next_token(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean cross-entropy over positions where ``loss_mask`` is true."""
    return T.cross_entropy(logits, targets, loss_mask)
