"""Materialize pruned models from masks and analyze sub-network overlap."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import TASK_DOMAINS, make_sft_example, tokenize
from .model import ModelConfig, Transformer
from .softtopk import Mask
from .tensor import Tensor


@dataclass
class PrunedModel:
    """A dense transformer whose FFN width is t_ffn.

    ``selected[l]`` lists, in ascending order, the original FFN channels kept
    in layer l. W2 rows carry the folded mask values.
    """

    model: Transformer
    selected: np.ndarray

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg

    def forward(self, tokens):
        return self.model.forward(tokens)


def materialize(model: Transformer, mask: Mask) -> PrunedModel:
    cfg = model.cfg
    selected = np.asarray(mask.selected)
    if selected.ndim != 2 or selected.shape[0] != cfg.n_layers:
        raise ValueError(f"mask has {selected.shape[0] if selected.ndim else 0} layers, model has {cfg.n_layers}")
    if selected.shape[1] != cfg.t_ffn:
        raise ValueError(f"mask keeps {selected.shape[1]} channels per layer, t_ffn is {cfg.t_ffn}")
    for layer, s in enumerate(selected):
        if len(np.unique(s)) != cfg.t_ffn:
            raise ValueError(f"layer {layer}: selection does not hold {cfg.t_ffn} distinct channels")
    m = np.asarray(mask.m)
    new_cfg = cfg.replace(d_ffn=cfg.t_ffn)
    params = {}
    for name, p in model.params.items():
        params[name] = Tensor(p.data.copy(), name=p.name)
    for layer in range(cfg.n_layers):
        s = np.sort(selected[layer])
        pre = f"layers.{layer}."
        P = model.params
        params[pre + "w1"] = Tensor(P[pre + "w1"].data[:, s], name=P[pre + "w1"].name)
        params[pre + "w3"] = Tensor(P[pre + "w3"].data[:, s], name=P[pre + "w3"].name)
        params[pre + "w2"] = Tensor(m[layer, s][:, None] * P[pre + "w2"].data[s, :], name=P[pre + "w2"].name)
    return PrunedModel(Transformer(new_cfg, params), np.sort(selected, axis=1))


def check_equivalence(model: Transformer, mask: Mask, inputs: Sequence, pruned: PrunedModel | None = None) -> float:
    """Max |logits(full model under mask) - logits(pruned model)| over ``inputs``."""
    if len(inputs) == 0:
        raise ValueError("need at least one trial input")
    pruned = pruned or materialize(model, mask)
    worst = 0.0
    for tokens in inputs:
        a = model.forward(tokens, mask).data
        b = pruned.forward(tokens).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


# ---------------------------------------------------------------- overlap

def _selected(mask) -> np.ndarray:
    return np.asarray(mask.selected if isinstance(mask, Mask) else mask)


def overlap_rate(mask_a, mask_b) -> np.ndarray:
    """Per-layer |S_a & S_b| / t_ffn."""
    a, b = _selected(mask_a), _selected(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"masks disagree on (layers, t_ffn): {a.shape} vs {b.shape}")
    t = a.shape[-1]
    return np.array([len(np.intersect1d(x, y, assume_unique=True)) / t for x, y in zip(a, b)])


def pairwise_overlaps(selections: Sequence[np.ndarray], n_channels: int) -> np.ndarray:
    """(L, N, N) overlap rates for N selections of shape (L, t)."""
    sel = np.stack([_selected(s) for s in selections])
    N, L, t = sel.shape
    onehot = np.zeros((L, N, n_channels))
    for i in range(N):
        onehot[np.arange(L)[:, None], i, sel[i]] = 1.0
    return onehot @ onehot.transpose(0, 2, 1) / t


@dataclass
class OverlapMatrix:
    domains: list[str]
    matrices: np.ndarray  # (L, D, D); NaN where a domain has a single prompt
    pairwise: np.ndarray  # (L, N, N) prompt-level overlaps
    labels: np.ndarray  # (N,) domain index per prompt

    def layer(self, i: int) -> np.ndarray:
        return self.matrices[i]

    def mean_matrix(self) -> np.ndarray:
        return self.matrices.mean(axis=0)

    def within_cross(self, layer: int) -> tuple[float, float]:
        return _within_cross(self.pairwise[layer], self.labels)

    def export(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, mat in enumerate(self.matrices):
            paths.append(_write_csv(out / f"overlap_layer_{i}.csv", self.domains, mat))
        paths.append(_write_csv(out / "overlap_mean.csv", self.domains, self.mean_matrix()))
        return paths


def _write_csv(path: Path, domains, mat) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", *domains])
        for d, row in zip(domains, mat):
            w.writerow([d, *("" if np.isnan(v) else f"{v:.6f}" for v in row)])
    return path


def read_overlap_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    domains = rows[0][1:]
    mat = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows[1:]])
    return domains, mat


def overlap_from_selections(selections_by_domain: Mapping[str, Sequence], n_channels: int) -> OverlapMatrix:
    domains = list(selections_by_domain)
    if len(domains) < 2:
        raise ValueError("need at least two domains")
    flat, labels = [], []
    for di, d in enumerate(domains):
        flat.extend(selections_by_domain[d])
        labels.extend([di] * len(selections_by_domain[d]))
    labels = np.array(labels)
    pw = pairwise_overlaps(flat, n_channels)
    L, D = pw.shape[0], len(domains)
    mats = np.full((L, D, D), np.nan)
    for a in range(D):
        ia = np.flatnonzero(labels == a)
        for b in range(D):
            ib = np.flatnonzero(labels == b)
            if a == b:
                if len(ia) < 2:
                    continue
                iu = np.triu_indices(len(ia), k=1)
                mats[:, a, a] = pw[:, ia][:, :, ia][:, iu[0], iu[1]].mean(axis=1)
            else:
                mats[:, a, b] = pw[:, ia][:, :, ib].mean(axis=(1, 2))
    return OverlapMatrix(domains, mats, pw, labels)


def overlap_prompts(per_domain: int, seed: int = 0) -> dict[str, list[str]]:
    """``per_domain`` SFT-style prompts per task domain, cycling through the templates."""
    out = {d: [] for d in TASK_DOMAINS}
    i = 0
    while any(len(v) < per_domain for v in out.values()):
        domain = TASK_DOMAINS[i % len(TASK_DOMAINS)]
        ex = make_sft_example(domain, (i // len(TASK_DOMAINS)) % 3, np.random.default_rng([seed, 3, i]))
        out[domain].append(ex.prompt)
        i += 1
    return out


def overlap_matrix(bundle, prompts_by_domain: Mapping[str, Sequence[str]]) -> OverlapMatrix:
    """Predict one mask per prompt and average pairwise overlaps by domain pair."""
    if bundle.selector is None:
        raise ValueError("overlap analysis needs a bundle with a mask selector")
    sels = {d: [bundle.predict_mask(tokenize(p)).selected for p in ps] for d, ps in prompts_by_domain.items()}
    return overlap_from_selections(sels, bundle.cfg.d_ffn)


# ---------------------------------------------------------------- permutation tests

def _within_cross(pw: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    iu = np.triu_indices(len(labels), k=1)
    vals = pw[iu]
    same = labels[iu[0]] == labels[iu[1]]
    return float(vals[same].mean()), float(vals[~same].mean())


def within_vs_cross_test(om: OverlapMatrix, layer: int, n_perm: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Observed (within - cross) mean overlap at ``layer`` and its label-permutation p-value."""
    pw, labels = om.pairwise[layer], om.labels
    w, c = _within_cross(pw, labels)
    observed = w - c
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        pl = rng.permutation(labels)
        pw_, pc_ = _within_cross(pw, pl)
        hits += (pw_ - pc_) >= observed
    return observed, (hits + 1) / (n_perm + 1)


def sign_flip_pvalue(diffs, n_perm: int = 2000, seed: int = 0, two_sided: bool = False) -> float:
    """Paired sign-flip p-value for mean(diffs) > 0 (or != 0 when two_sided)."""
    diffs = np.asarray(diffs, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(n_perm, diffs.size))
    null = (signs * diffs).mean(axis=1)
    obs = diffs.mean()
    if two_sided:
        null, obs = np.abs(null), abs(obs)
    return float((np.sum(null >= obs) + 1) / (n_perm + 1))


def _layer_diffs(om: OverlapMatrix, low: int, high: int) -> np.ndarray:
    iu = np.triu_indices(len(om.labels), k=1)
    return om.pairwise[low][iu] - om.pairwise[high][iu]


def layer_gap_test(om: OverlapMatrix, low: int = 0, high: int = -1, n_perm: int = 2000,
                   seed: int = 0) -> tuple[float, float]:
    """Mean pairwise overlap at ``low`` minus at ``high``, with a paired sign-flip p-value."""
    diff = _layer_diffs(om, low, high)
    return float(diff.mean()), sign_flip_pvalue(diff, n_perm, seed)


def layer_gap_two_sided(om: OverlapMatrix, low: int = 0, high: int = -1, n_perm: int = 2000,
                        seed: int = 0) -> float:
    return sign_flip_pvalue(_layer_diffs(om, low, high), n_perm, seed, two_sided=True)
