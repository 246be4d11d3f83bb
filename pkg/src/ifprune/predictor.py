"""Sparsity predictor: small transformer encoder plus a two-layer MLP head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig, Transformer
from .softtopk import Mask, soft_topk_op
from .tensor import Tensor


@dataclass(frozen=True)
class PredictorConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ffn: int = 128
    head_hidden: int | None = None  # defaults to 4 * d_model

    @property
    def hidden(self) -> int:
        return self.head_hidden or 4 * self.d_model

    def backbone(self, main: ModelConfig) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, d_model=self.d_model, d_ffn=self.d_ffn,
                           t_ffn=self.d_ffn, n_heads=self.n_heads, vocab=main.vocab,
                           max_seq=main.max_seq)


class Predictor:
    """Maps a prompt to mask scores z of shape (L, d_ffn) for the main model."""

    def __init__(self, main_cfg: ModelConfig, cfg: PredictorConfig, params: dict[str, Tensor]):
        self.main_cfg = main_cfg
        self.cfg = cfg
        self.params = params
        backbone = {k[len("backbone."):]: v for k, v in params.items() if k.startswith("backbone.")}
        self.backbone = Transformer(cfg.backbone(main_cfg), backbone)

    @classmethod
    def init(cls, main_cfg: ModelConfig, cfg: PredictorConfig | None = None, seed: int = 1,
             head_std: float = 0.02) -> "Predictor":
        cfg = cfg or PredictorConfig()
        rng = np.random.default_rng(seed)
        back = Transformer.init(cfg.backbone(main_cfg), seed=int(rng.integers(2**31)), prefix="backbone.")
        params = {f"backbone.{k}": v for k, v in back.params.items()}
        h, out = cfg.hidden, main_cfg.n_layers * main_cfg.d_ffn
        params["head.w1"] = Tensor(rng.normal(0, 1 / np.sqrt(cfg.d_model), (cfg.d_model, h)), True, "head.w1")
        params["head.b1"] = Tensor(np.zeros(h), True, "head.b1")
        params["head.w2"] = Tensor(rng.normal(0, head_std, (h, out)), True, "head.w2")
        params["head.b2"] = Tensor(np.zeros(out), True, "head.b2")
        return cls(main_cfg, cfg, params)

    def encode_prompt(self, prompts, lengths=None) -> Tensor:
        """Last-token hidden state of the backbone's final layer, shape (B, d_p).

        ``prompts`` is one id sequence or a right-padded (B, n) batch, with
        ``lengths`` giving each row's true length.
        """
        prompts = np.asarray(prompts, dtype=np.int64)
        if prompts.ndim == 1:
            prompts = prompts[None]
        if prompts.size == 0 or prompts.shape[-1] == 0:
            raise ValueError("prompt must be nonempty")
        B, n = prompts.shape
        lengths = np.full(B, n) if lengths is None else np.asarray(lengths)
        if np.any(lengths < 1) or np.any(lengths > n):
            raise ValueError("prompt lengths must lie in [1, n]")
        h = self.backbone.hidden(prompts)
        return h[np.arange(B), lengths - 1]

    def predict_scores(self, prompts, lengths=None) -> Tensor:
        """Scores z of shape (B, L, d_ffn)."""
        P = self.params
        e = self.encode_prompt(prompts, lengths)
        z = T.silu(e @ P["head.w1"] + P["head.b1"]) @ P["head.w2"] + P["head.b2"]
        return z.reshape(z.shape[0], self.main_cfg.n_layers, self.main_cfg.d_ffn)

    def mask_tensor(self, prompts, lengths=None, t_ffn: int | None = None) -> tuple[Tensor, Mask]:
        """Differentiable (B, L, d_ffn) mask and its batched Mask record."""
        t = self.main_cfg.t_ffn if t_ffn is None else t_ffn
        if t > self.main_cfg.d_ffn:
            raise ValueError(f"t_ffn={t} exceeds d_ffn={self.main_cfg.d_ffn}")
        return soft_topk_op(self.predict_scores(prompts, lengths), t)

    def predict_mask(self, prompt, t_ffn: int | None = None) -> Mask:
        _, mask = self.mask_tensor(np.asarray(prompt)[None], t_ffn=t_ffn)
        return Mask(m=mask.m[0], selected=mask.selected[0], lam=mask.lam[0], tau=mask.tau[0])


class StaticScores:
    """Prompt-independent learnable scores; the static pruning baseline."""

    def __init__(self, main_cfg: ModelConfig, params: dict[str, Tensor]):
        self.main_cfg = main_cfg
        self.params = params

    @classmethod
    def init(cls, main_cfg: ModelConfig, seed: int = 1, std: float = 0.02) -> "StaticScores":
        rng = np.random.default_rng(seed)
        z = rng.normal(0, std, (main_cfg.n_layers, main_cfg.d_ffn))
        return cls(main_cfg, {"scores": Tensor(z, True, "scores")})

    def mask_tensor(self, prompts=None, lengths=None, t_ffn: int | None = None) -> tuple[Tensor, Mask]:
        t = self.main_cfg.t_ffn if t_ffn is None else t_ffn
        m, mask = soft_topk_op(self.params["scores"], t)
        return m.reshape(1, *m.shape), Mask(m=mask.m[None], selected=mask.selected[None],
                                             lam=mask.lam[None], tau=mask.tau[None])

    def predict_mask(self, prompt=None, t_ffn: int | None = None) -> Mask:
        _, mask = self.mask_tensor(t_ffn=t_ffn)
        return Mask(m=mask.m[0], selected=mask.selected[0], lam=mask.lam[0], tau=mask.tau[0])
