"""A main transformer together with whatever chooses its FFN mask."""

from __future__ import annotations

import numpy as np

from .model import ModelConfig, Transformer
from .predictor import Predictor, PredictorConfig, StaticScores
from .softtopk import Mask
from .tensor import Tensor

MODES = ("dynamic", "static", "dense", "pruned")


class ModelBundle:
    """``mode`` is one of:

    dynamic  prompt-conditioned masks from a Predictor
    static   one learned mask shared by every input
    dense    no mask (every FFN channel active)
    pruned   a materialized model; no mask, FFN width is already t_ffn
    """

    def __init__(self, model: Transformer, selector=None, mode: str = "dynamic", meta: dict | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if (selector is None) != (mode in ("dense", "pruned")):
            raise ValueError(f"mode {mode!r} is inconsistent with selector {type(selector).__name__}")
        self.model = model
        self.selector = selector
        self.mode = mode
        self.meta = dict(meta or {})

    @classmethod
    def create(cls, cfg: ModelConfig, mode: str = "dynamic", seed: int = 0,
               predictor_cfg: PredictorConfig | None = None) -> "ModelBundle":
        rng = np.random.default_rng(seed)
        model_seed, sel_seed = (int(s) for s in rng.integers(2**31, size=2))
        model = Transformer.init(cfg, seed=model_seed, prefix="model.")
        if mode == "dynamic":
            selector = Predictor.init(cfg, predictor_cfg, seed=sel_seed)
        elif mode == "static":
            selector = StaticScores.init(cfg, seed=sel_seed)
        else:
            selector = None
        return cls(model, selector, mode, {"seed": seed})

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg

    @property
    def predictor_cfg(self) -> PredictorConfig | None:
        return self.selector.cfg if isinstance(self.selector, Predictor) else None

    def named_params(self) -> dict[str, Tensor]:
        out = {f"model.{k}": v for k, v in self.model.params.items()}
        if self.selector is not None:
            group = "predictor" if self.mode == "dynamic" else "static"
            out.update({f"{group}.{k}": v for k, v in self.selector.params.items()})
        return out

    def mask_tensor(self, prompts, lengths=None) -> Tensor | None:
        """Differentiable mask (B|1, L, d_ffn) for a batch of prompts, or None when unmasked."""
        if self.selector is None:
            return None
        return self.selector.mask_tensor(prompts, lengths)[0]

    def predict_mask(self, prompt) -> Mask | None:
        if self.selector is None:
            return None
        return self.selector.predict_mask(np.asarray(prompt))

    def forward(self, tokens, mask=None):
        return self.model.forward(tokens, mask)
