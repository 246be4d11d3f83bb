"""Joint training of predictor and masked model, evaluation, and baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .bundle import ModelBundle
from .data import EOS, PAD, SEP, TASK_DOMAINS, Document, SftExample, encode_sft, tokenize
from .model import loss_next_token
from .softtopk import Mask
from .tensor import NonFiniteError, Tensor

STAGES = ("cpt", "sft")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good_step: int):
        super().__init__(f"loss became non-finite at step {step}; last good step {last_good_step}")
        self.step = step
        self.last_good_step = last_good_step


@dataclass
class TrainConfig:
    stage: str = "cpt"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int | None = None  # defaults to 5% of steps
    chunks: int = 2
    chunk_size: int = 32
    seed: int = 0
    mode: str = "dynamic"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    clip_norm: float = 1.0
    final_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.mode not in ("dynamic", "static", "dense"):
            raise ValueError(f"mode must be dynamic, static or dense, got {self.mode!r}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.stage == "cpt" and self.chunks < 2:
            raise ValueError("chunks must be at least 2 for cpt")
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")

    @property
    def seq_len(self) -> int:
        return self.chunks * self.chunk_size

    @property
    def warmup_steps(self) -> int:
        return self.warmup if self.warmup is not None else max(1, round(0.05 * self.steps))

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay to final_lr_ratio * lr."""
        w = self.warmup_steps
        if step < w:
            return self.lr * (step + 1) / w
        span = max(1, self.steps - w)
        frac = min(1.0, (step - w) / span)
        floor = self.final_lr_ratio
        return self.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: Mapping[str, Tensor], beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1 - lr * self.wd
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grads(params: Mapping[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------------- losses

@dataclass
class ChunkRecord:
    """Bookkeeping for one chunk mask: which target positions it scored."""
    k: int
    target_positions: np.ndarray
    mask: np.ndarray | None
    logits: Tensor
    loss_mask: np.ndarray


def cpt_loss(bundle: ModelBundle, tokens, chunks: int, force_dense: bool = False,
             records: list | None = None) -> Tensor:
    """Chunked objective: the mask predicted from chunk k scores the tokens of chunk k+1.

    Each of the K-1 terms runs the model over the whole prefix ending at
    chunk k+1; the result is the mean cross-entropy over every counted position.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    B, n = tokens.shape
    if n % chunks:
        raise ValueError(f"sequence length {n} is not divisible by chunk count {chunks}")
    s = n // chunks
    total, count = None, 0
    for k in range(1, chunks):
        prompt = tokens[:, (k - 1) * s:k * s]
        mask = None if force_dense else bundle.mask_tensor(prompt)
        end = (k + 1) * s
        inputs, targets = tokens[:, :end - 1], tokens[:, 1:end]
        pos = np.arange(1, end)
        loss_mask = np.broadcast_to((pos >= k * s) & (pos < end), targets.shape) & (targets != PAD)
        c = int(loss_mask.sum())
        if c == 0:
            continue
        logits = bundle.forward(inputs, mask)
        term = loss_next_token(logits, targets, loss_mask) * float(c)
        total = term if total is None else total + term
        count += c
        if records is not None:
            records.append(ChunkRecord(k, pos[(pos >= k * s) & (pos < end)],
                                       None if mask is None else mask.data, logits, loss_mask))
    if total is None:
        raise ValueError("cpt_loss: no positions to score")
    return total * (1.0 / count)


def _pad(seqs: Sequence[Sequence[int]], value: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    out = np.full((len(seqs), lengths.max()), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def sft_batch(examples: Sequence[SftExample]):
    """(prompt ids, prompt lengths, inputs, targets, loss_mask) for a padded batch."""
    enc = [encode_sft(e) for e in examples]
    for e, (p, full, start) in zip(examples, enc):
        if len(full) - start <= 1:
            raise ValueError(f"empty response for prompt {e.prompt!r}")
    prompts, plen = _pad([p for p, _, _ in enc])
    full, flen = _pad([f for _, f, _ in enc])
    inputs, targets = full[:, :-1], full[:, 1:]
    pos = np.arange(1, full.shape[1])
    starts = np.array([s for _, _, s in enc])
    loss_mask = (pos[None] >= starts[:, None]) & (pos[None] < flen[:, None])
    return prompts, plen, inputs, targets, loss_mask


def sft_loss(bundle: ModelBundle, examples: Sequence[SftExample]) -> Tensor:
    """Mask from the prompt alone; loss on the response span (response + EOS)."""
    prompts, plen, inputs, targets, loss_mask = sft_batch(examples)
    if inputs.shape[1] > bundle.cfg.max_seq:
        raise ValueError(f"example of length {inputs.shape[1] + 1} exceeds max_seq")
    mask = bundle.mask_tensor(prompts, plen)
    return loss_next_token(bundle.forward(inputs, mask), targets, loss_mask)


# ---------------------------------------------------------------- data sampling

class _CptSampler:
    def __init__(self, docs: Sequence[Document], seq_len: int, rng: np.random.Generator):
        self.rng = rng
        self.seq_len = seq_len
        by_domain: dict[str, list] = {}
        for d in docs:
            ids = tokenize(d.text)
            if len(ids) < seq_len:
                ids = ids + [PAD] * (seq_len - len(ids))
            by_domain.setdefault(d.domain, []).append(np.array(ids, dtype=np.int64))
        self.groups = [by_domain[k] for k in sorted(by_domain)]

    def batch(self, size: int) -> np.ndarray:
        out = np.empty((size, self.seq_len), dtype=np.int64)
        for i in range(size):
            group = self.groups[i % len(self.groups)]
            ids = group[self.rng.integers(len(group))]
            off = self.rng.integers(len(ids) - self.seq_len + 1)
            out[i] = ids[off:off + self.seq_len]
        return out


class _SftSampler:
    def __init__(self, examples: Sequence[SftExample], rng: np.random.Generator):
        self.rng = rng
        by_domain: dict[str, list] = {}
        for e in examples:
            by_domain.setdefault(e.domain, []).append(e)
        self.groups = [by_domain[k] for k in sorted(by_domain)]

    def batch(self, size: int) -> list[SftExample]:
        return [self.groups[i % len(self.groups)][self.rng.integers(len(self.groups[i % len(self.groups)]))]
                for i in range(size)]


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[tuple] = field(default_factory=list)  # (step, stage, loss, grad_norm, lr)

    @property
    def losses(self) -> list[float]:
        return [row[2] for row in self.log]

    def log_csv(self) -> str:
        lines = ["step,stage,loss,grad_norm,lr"]
        lines += [f"{s},{st},{l:.6f},{g:.6f},{lr:.6e}" for s, st, l, g, lr in self.log]
        return "\n".join(lines) + "\n"


def train(bundle: ModelBundle, config: TrainConfig, data, force_dense: bool = False) -> TrainResult:
    """Optimize every parameter of ``bundle`` in place for ``config.steps`` steps."""
    if config.mode != bundle.mode:
        raise ValueError(f"config mode {config.mode!r} does not match bundle mode {bundle.mode!r}")
    if config.stage == "cpt" and config.seq_len > bundle.cfg.max_seq:
        raise ValueError(f"chunks * chunk_size = {config.seq_len} exceeds max_seq {bundle.cfg.max_seq}")
    rng = np.random.default_rng([config.seed, 17])
    if config.stage == "cpt":
        sampler = _CptSampler(data, config.seq_len, rng)
    else:
        sampler = _SftSampler(data, rng)
    params = bundle.named_params()
    opt = AdamW(params, config.beta1, config.beta2, weight_decay=config.weight_decay)
    result = TrainResult(bundle)
    last_good = int(bundle.meta.get("step", 0))
    for step in range(config.steps):
        batch = sampler.batch(config.batch_size)
        T.zero_grad(params.values())
        try:
            if config.stage == "cpt":
                loss = cpt_loss(bundle, batch, config.chunks, force_dense=force_dense)
            else:
                loss = sft_loss(bundle, batch)
            T.backward(loss)
        except NonFiniteError:
            raise TrainingDiverged(step, last_good) from None
        gnorm = clip_grads(params, config.clip_norm)
        if not math.isfinite(gnorm):
            raise TrainingDiverged(step, last_good)
        lr = config.lr_at(step)
        opt.step(lr)
        last_good = step
        result.log.append((step, config.stage, loss.item(), gnorm, lr))
    bundle.meta.update(stage=config.stage, step=bundle.meta.get("step", 0) + config.steps, seed=config.seed)
    return result


def train_static_baseline(bundle: ModelBundle, config: TrainConfig, data) -> TrainResult:
    """Same pipeline as ``train`` with one learned, prompt-independent mask."""
    if bundle.mode != "static":
        raise ValueError("static baseline needs a bundle created with mode='static'")
    return train(bundle, config, data)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    loss: float
    domain_loss: dict[str, float]
    exact_match: float | None
    mask_mode: str
    n_examples: int

    def lines(self) -> list[str]:
        out = [f"mask_mode={self.mask_mode}", f"n_examples={self.n_examples}", f"loss={self.loss:.6f}"]
        out += [f"loss.{d}={v:.6f}" for d, v in sorted(self.domain_loss.items())]
        if self.exact_match is not None:
            out.append(f"exact_match={self.exact_match:.6f}")
        return out


MASK_MODES = ("per_input", "per_task", "dense", "static")


def _resolve_masks(bundle: ModelBundle, examples, mode, task_prompt, static_mask) -> list:
    """One mask array (L, d_ffn) or None per example."""
    cfg = bundle.cfg
    if mode == "dense":
        return [None] * len(examples)
    if mode == "static":
        if static_mask is None:
            raise ValueError("static mode needs a mask")
        m = static_mask.m if isinstance(static_mask, Mask) else np.asarray(static_mask)
        if isinstance(static_mask, Mask) and static_mask.t != cfg.t_ffn:
            raise ValueError(f"mask t_ffn={static_mask.t} does not match checkpoint t_ffn={cfg.t_ffn}")
        if m.shape != (cfg.n_layers, cfg.d_ffn):
            raise ValueError(f"mask shape {m.shape} does not match ({cfg.n_layers}, {cfg.d_ffn})")
        return [m] * len(examples)
    if bundle.selector is None:
        raise ValueError(f"{mode} masks need a predictor; bundle mode is {bundle.mode!r}")
    if mode == "per_task":
        if task_prompt is None:
            raise ValueError("per_task mode needs task_prompt")
        prompts = task_prompt if isinstance(task_prompt, Mapping) else None
        cache = {}
        out = []
        for e in examples:
            text = prompts[e.domain] if prompts is not None else task_prompt
            if text not in cache:
                cache[text] = bundle.predict_mask(tokenize(text)).m
            out.append(cache[text])
        return out
    if mode == "per_input":
        out = []
        for i in range(0, len(examples), 64):
            chunk = examples[i:i + 64]
            prompts, plen = _pad([tokenize(e.prompt) for e in chunk])
            m = bundle.selector.mask_tensor(prompts, plen)[1].m
            out.extend(np.broadcast_to(m, (len(chunk),) + m.shape[1:]))
        return out
    raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {mode!r}")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _stack_masks(masks) -> np.ndarray | None:
    return None if masks[0] is None else np.stack(masks)


def greedy_decode(bundle: ModelBundle, examples: Sequence[SftExample], masks, max_new: int = 16) -> list[str]:
    from .data import detokenize
    prompts = [tokenize(e.prompt) + [SEP] for e in examples]
    seqs, lengths = _pad(prompts)
    seqs = np.concatenate([seqs, np.full((len(prompts), max_new), PAD, dtype=np.int64)], axis=1)
    start = lengths.copy()
    done = np.zeros(len(prompts), dtype=bool)
    m = _stack_masks(masks)
    rows = np.arange(len(prompts))
    for _ in range(max_new):
        width = int(lengths.max())
        logits = bundle.forward(seqs[:, :width], m).data
        nxt = logits[rows, lengths - 1].argmax(axis=-1)
        active = ~done
        seqs[rows[active], lengths[active]] = nxt[active]
        lengths[active] += 1
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for i in rows:
        gen = list(seqs[i, start[i]:lengths[i]])
        if EOS in gen:
            gen = gen[:gen.index(EOS)]
        out.append(detokenize(gen))
    return out


def evaluate(bundle: ModelBundle, examples: Sequence[SftExample], mask_mode: str = "per_input",
             task_prompt=None, static_mask=None, exact_match: bool = False,
             batch_size: int = 64) -> EvalReport:
    """Response-token loss under the chosen masking policy.

    per_input  a fresh mask from each example's prompt
    per_task   one mask from ``task_prompt`` (a string, or a domain -> prompt map)
    static     the supplied ``static_mask`` for every example
    dense      no mask
    """
    examples = list(examples)
    if not examples:
        raise ValueError("evaluate: empty example set")
    masks = _resolve_masks(bundle, examples, mask_mode, task_prompt, static_mask)
    nll_sum: dict[str, float] = {}
    tok_count: dict[str, int] = {}
    correct = 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        mchunk = masks[i:i + batch_size]
        _, _, inputs, targets, loss_mask = sft_batch(chunk)
        logp = _log_softmax(bundle.forward(inputs, _stack_masks(mchunk)).data)
        nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        for e, row, lm in zip(chunk, nll, loss_mask):
            nll_sum[e.domain] = nll_sum.get(e.domain, 0.0) + float(row[lm].sum())
            tok_count[e.domain] = tok_count.get(e.domain, 0) + int(lm.sum())
        if exact_match:
            preds = greedy_decode(bundle, chunk, mchunk)
            correct += sum(p == e.response for p, e in zip(preds, chunk))
    total = sum(nll_sum.values()) / sum(tok_count.values())
    per_domain = {d: nll_sum[d] / tok_count[d] for d in nll_sum}
    return EvalReport(total, per_domain, correct / len(examples) if exact_match else None,
                      mask_mode, len(examples))


def domain_task_prompts() -> dict[str, str]:
    from .data import TASK_DESCRIPTIONS
    return {d: TASK_DESCRIPTIONS[d] for d in TASK_DOMAINS}


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
