"""Character vocabulary and deterministic synthetic corpora.

Three task families (arithmetic chains, string operations, a fixed letter
substitution cipher) plus a mixed family that interleaves them.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
_SPECIALS = "\x00\x02\x03\x1f"
_PUNCT = "+-*=;:,.?!()[]<>/|'\"_#%"
ALPHABET = _SPECIALS + string.ascii_lowercase + string.digits + " " + _PUNCT
assert len(ALPHABET) == 64 == len(set(ALPHABET))
VOCAB_SIZE = len(ALPHABET)
SEP_CHAR = ALPHABET[SEP]

_TO_ID = {c: i for i, c in enumerate(ALPHABET)}

DOMAINS = ("arith", "strops", "cipher", "mixed")
TASK_DOMAINS = ("arith", "strops", "cipher")

# fixed letter bijection, independent of any user seed
CIPHER = dict(zip(string.ascii_lowercase,
                  (string.ascii_lowercase[i] for i in np.random.default_rng(20240601).permutation(26))))

TASK_DESCRIPTIONS = {
    "arith": "compute the arithmetic result",
    "strops": "apply the string operation",
    "cipher": "apply the letter cipher",
}

STR_OPS = {"rev": ("reverse", lambda w: w[::-1]),
           "sort": ("sort", lambda w: "".join(sorted(w))),
           "dbl": ("double", lambda w: "".join(c + c for c in w))}


def tokenize(text: str) -> list[int]:
    ids = []
    for pos, ch in enumerate(text):
        if ch not in _TO_ID:
            raise ValueError(f"character {ch!r} at position {pos} is outside the alphabet")
        ids.append(_TO_ID[ch])
    return ids


def detokenize(ids: Iterable[int]) -> str:
    return "".join(ALPHABET[int(i)] for i in ids)


def encipher(word: str) -> str:
    return "".join(CIPHER[c] for c in word)


@dataclass(frozen=True)
class Document:
    text: str
    domain: str


@dataclass(frozen=True)
class SftExample:
    prompt: str
    response: str
    domain: str

    def __post_init__(self):
        if not self.prompt or not self.response:
            raise ValueError("SftExample needs a nonempty prompt and response")


# ---------------------------------------------------------------- statements

def _word(rng, lo=3, hi=6) -> str:
    return "".join(rng.choice(list(string.ascii_lowercase), size=int(rng.integers(lo, hi + 1))))


def _arith_problem(rng, left=None) -> tuple[str, int]:
    a = int(rng.integers(0, 100)) if left is None else left
    b = int(rng.integers(0, 100))
    if a >= b and (a > 300 or rng.random() < 0.5):
        return f"{a}-{b}", a - b
    return f"{a}+{b}", a + b


def _strop(rng) -> tuple[str, str, str]:
    op = ("rev", "sort", "dbl")[int(rng.integers(3))]
    w = _word(rng, 3, 5 if op == "dbl" else 6)
    return op, w, STR_OPS[op][1](w)


def _statement(domain: str, rng, state: dict) -> str:
    if domain == "arith":
        expr, val = _arith_problem(rng, state.get("carry"))
        state["carry"] = val if rng.random() < 0.7 else None
        return f"{expr}={val}; "
    if domain == "strops":
        op, w, out = _strop(rng)
        return f"{op}({w})={out}; "
    if domain == "cipher":
        w = _word(rng)
        return f"enc[{w}]:{encipher(w)}, "
    raise ValueError(f"unknown domain {domain!r}")


def _document(domain: str, rng, min_chars: int, max_chars: int) -> str:
    text, state = "", {}
    while len(text) < min_chars:
        d = TASK_DOMAINS[int(rng.integers(3))] if domain == "mixed" else domain
        piece = _statement(d, rng, state)
        if len(text) + len(piece) > max_chars:
            break
        text += piece
    return text[:max_chars]


def gen_cpt_corpus(num_docs: int, seed: int, min_chars: int = 96, max_chars: int = 255) -> list[Document]:
    """Round-robin over the four domains; each document is one domain's statement chain."""
    if num_docs <= 0:
        raise ValueError("num_docs must be positive")
    docs = []
    for i in range(num_docs):
        domain = DOMAINS[i % len(DOMAINS)]
        rng = np.random.default_rng([seed, 0, i])
        docs.append(Document(_document(domain, rng, min_chars, max_chars), domain))
    return docs


# ---------------------------------------------------------------- sft examples

def _task_input(domain: str, rng) -> tuple[str, str, str]:
    """(task+input prompt, bare input, response) for one task instance."""
    if domain == "arith":
        expr, val = _arith_problem(rng)
        return f"solve: {expr}", expr, str(val)
    if domain == "strops":
        op, w, out = _strop(rng)
        return f"{STR_OPS[op][0]}: {w}", f"{op} {w}", out
    w = _word(rng)
    return f"encode: {w}", w, encipher(w)


def _shot(domain: str, rng) -> str:
    if domain == "arith":
        expr, val = _arith_problem(rng)
        return f"{expr}={val}"
    if domain == "strops":
        op, w, out = _strop(rng)
        return f"{op}({w})={out}"
    w = _word(rng, 3, 4)
    return f"{w}>{encipher(w)}"


def make_sft_example(domain: str, template: int, rng) -> SftExample:
    task_prompt, bare, response = _task_input(domain, rng)
    if template == 0:
        prompt = task_prompt
    elif template == 1:
        prompt = f"{_shot(domain, rng)}; {_shot(domain, rng)}; {task_prompt}"
    elif template == 2:
        prompt = f"{TASK_DESCRIPTIONS[domain]}|{bare}"
    else:
        raise ValueError(f"unknown template {template}")
    return SftExample(prompt, response, domain)


def gen_sft_examples(num_examples: int, seed: int) -> list[SftExample]:
    """Round-robin over task domains and, within a domain, over the three prompt templates."""
    if num_examples <= 0:
        raise ValueError("num_examples must be positive")
    out = []
    for i in range(num_examples):
        domain = TASK_DOMAINS[i % 3]
        template = (i // 3) % 3
        out.append(make_sft_example(domain, template, np.random.default_rng([seed, 1, i])))
    return out


def solve_reference(example: SftExample) -> str:
    """Recompute a response from its prompt with a rule-based solver."""
    p = example.prompt
    if "|" in p:
        desc, bare = p.split("|", 1)
        domain = next(d for d, s in TASK_DESCRIPTIONS.items() if s == desc)
        if domain == "arith":
            return str(_eval_expr(bare))
        if domain == "strops":
            op, w = bare.split(" ")
            return STR_OPS[op][1](w)
        return encipher(bare)
    task, arg = p.rsplit("; ", 1)[-1].split(": ")
    if task == "solve":
        return str(_eval_expr(arg))
    if task == "encode":
        return encipher(arg)
    for name, fn in STR_OPS.values():
        if name == task:
            return fn(arg)
    raise ValueError(f"unrecognized prompt {p!r}")


def _eval_expr(expr: str) -> int:
    if "+" in expr:
        a, b = expr.split("+")
        return int(a) + int(b)
    a, b = expr.split("-")
    return int(a) - int(b)


# ---------------------------------------------------------------- tokenized views

def encode_sft(example: SftExample) -> tuple[list[int], list[int], int]:
    """(prompt ids, full ids = prompt + SEP + response + EOS, start of response span)."""
    p = tokenize(example.prompt)
    full = p + [SEP] + tokenize(example.response) + [EOS]
    return p, full, len(p) + 1


def unigram(texts: Iterable[str]) -> np.ndarray:
    counts = np.zeros(VOCAB_SIZE)
    for t in texts:
        np.add.at(counts, tokenize(t), 1)
    return counts / counts.sum()


# ---------------------------------------------------------------- line records

def write_records(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")


def read_records(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(SftExample(**row) if "prompt" in row else Document(**row))
    return out
