import itertools
import re
from collections import Counter

import numpy as np
import pytest

from ifprune import data as D


def test_round_trip_example():
    assert D.detokenize(D.tokenize("add 12 34")) == "add 12 34"


def test_empty_text():
    assert D.tokenize("") == []


def test_full_alphabet_round_trip():
    ids = D.tokenize(D.ALPHABET)
    assert ids == list(range(64))
    assert D.detokenize(ids) == D.ALPHABET


def test_out_of_alphabet_reports_position():
    with pytest.raises(ValueError, match="position 3"):
        D.tokenize("abcX")


def test_cpt_corpus_deterministic():
    assert D.gen_cpt_corpus(40, 7) == D.gen_cpt_corpus(40, 7)
    assert D.gen_cpt_corpus(40, 7) != D.gen_cpt_corpus(40, 8)


def test_cpt_domain_histogram():
    counts = Counter(d.domain for d in D.gen_cpt_corpus(4000, 0))
    assert counts == {d: 1000 for d in D.DOMAINS}


def test_cpt_docs_fit_and_tokenize():
    for doc in D.gen_cpt_corpus(200, 1):
        assert len(D.tokenize(doc.text)) <= 255


def test_arithmetic_statements_are_correct():
    pattern = re.compile(r"(\d+)([+-])(\d+)=(\d+);")
    checked = 0
    for doc in D.gen_cpt_corpus(400, 3):
        if doc.domain not in ("arith", "mixed"):
            continue
        for a, op, b, c in pattern.findall(doc.text):
            expected = int(a) + int(b) if op == "+" else int(a) - int(b)
            assert int(c) == expected
            checked += 1
    assert checked > 500


def test_string_and_cipher_statements_are_correct():
    strop = re.compile(r"(rev|sort|dbl)\(([a-z]+)\)=([a-z]+);")
    enc = re.compile(r"enc\[([a-z]+)\]:([a-z]+),")
    n = 0
    for doc in D.gen_cpt_corpus(400, 4):
        for op, w, out in strop.findall(doc.text):
            assert D.STR_OPS[op][1](w) == out
            n += 1
        for w, out in enc.findall(doc.text):
            assert "".join(D.CIPHER[c] for c in w) == out
            n += 1
    assert n > 500


def test_cipher_is_bijection():
    assert sorted(D.CIPHER.values()) == sorted(D.CIPHER)


def test_sft_examples():
    assert D.SftExample("solve: 17+25", "42", "arith").response == D.solve_reference(
        D.SftExample("solve: 17+25", "?", "arith"))
    assert D.solve_reference(D.SftExample("reverse: abc", "?", "strops")) == "cba"
    ex = D.SftExample("encode: hello", "?", "cipher")
    table = dict(D.CIPHER)
    assert D.solve_reference(ex) == "".join(table[c] for c in "hello")


def test_sft_examples_recomputable_and_deterministic():
    exs = D.gen_sft_examples(300, 5)
    assert exs == D.gen_sft_examples(300, 5)
    for e in exs:
        assert D.solve_reference(e) == e.response
    assert Counter(e.domain for e in exs) == {d: 100 for d in D.TASK_DOMAINS}


def test_sft_templates_cover_three_forms():
    exs = D.gen_sft_examples(9, 0)
    arith = [e.prompt for e in exs if e.domain == "arith"]
    assert arith[0].startswith("solve: ")
    assert arith[1].count(";") == 2  # two shots then the task
    assert arith[2].startswith(D.TASK_DESCRIPTIONS["arith"] + "|")


def test_sft_example_requires_text():
    with pytest.raises(ValueError):
        D.SftExample("", "x", "arith")
    with pytest.raises(ValueError):
        D.SftExample("x", "", "arith")


def test_encode_sft_layout():
    p, full, start = D.encode_sft(D.SftExample("rev", "cba", "strops"))
    assert full[len(p)] == D.SEP and full[-1] == D.EOS
    assert D.detokenize(full[start:-1]) == "cba"


def test_domains_are_distributionally_distinct():
    docs = D.gen_cpt_corpus(4000, 0)
    uni = {d: D.unigram([x.text for x in docs if x.domain == d]) for d in D.DOMAINS}
    for a, b in itertools.combinations(D.DOMAINS, 2):
        assert 0.5 * np.abs(uni[a] - uni[b]).sum() > 0.1, (a, b)


def test_record_round_trip(tmp_path):
    docs = D.gen_cpt_corpus(8, 0)
    sft = D.gen_sft_examples(6, 0)
    D.write_records(tmp_path / "cpt.jsonl", docs)
    D.write_records(tmp_path / "sft.jsonl", sft)
    assert D.read_records(tmp_path / "cpt.jsonl") == docs
    assert D.read_records(tmp_path / "sft.jsonl") == sft
    first = (tmp_path / "sft.jsonl").read_text().splitlines()[0]
    assert '"prompt"' in first and '"response"' in first and '"domain"' in first
