"""Command-line entry point: ``ifprune <subcommand> [flags]``.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as D
from .bundle import ModelBundle
from .checkpoint import CheckpointError, _atomic_write, load_checkpoint, save_checkpoint
from .model import ModelConfig
from .predictor import PredictorConfig
from .prune import (check_equivalence, layer_gap_test, materialize, overlap_matrix, overlap_prompts,
                    within_vs_cross_test)
from .softtopk import Mask
from .tensor import NonFiniteError, check_primitives
from .train import TrainConfig, TrainingDiverged, domain_task_prompts, evaluate, train

log = logging.getLogger("ifprune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config files

def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(section: str, dc, raw: dict[str, str]) -> dict:
    kinds = {f.name: f.type for f in fields(dc)}
    out = {}
    for key, value in raw.items():
        if key not in kinds:
            raise ConfigError(f"unknown config field {section}.{key}")
        kind = str(kinds[key])
        try:
            if "int" in kind:
                out[key] = None if value.lower() == "none" else int(value)
            elif "float" in kind:
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError:
            raise ConfigError(f"config field {section}.{key}: cannot parse {value!r}") from None
    return out


def build_configs(cfg_raw: dict[str, str], overrides: dict[str, dict]):
    sections = {"model": {}, "predictor": {}, "train": {}}
    for k, v in cfg_raw.items():
        sec, _, name = k.partition(".")
        if sec not in sections or not name:
            raise ConfigError(f"unknown config field {k}")
        sections[sec][name] = v
    specs = {"model": ModelConfig, "predictor": PredictorConfig, "train": TrainConfig}
    built = {}
    for sec, dc in specs.items():
        values = _coerce(sec, dc, sections[sec])
        values.update({k: v for k, v in overrides.get(sec, {}).items() if v is not None})
        try:
            built[sec] = dc(**values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{sec} config: {exc}") from None
    return built["model"], built["predictor"], built["train"]


# ---------------------------------------------------------------- helpers

def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _records(path, kind):
    rows = D.read_records(path)
    if not rows or not all(isinstance(r, kind) for r in rows):
        raise ConfigError(f"{path}: expected {kind.__name__} records")
    return rows


def _load_cpt(args, seed):
    if args.data:
        return _records(Path(args.data) / "cpt.jsonl", D.Document)
    return D.gen_cpt_corpus(args.num_docs, seed)


def _load_sft(args, seed, name="sft.jsonl", count=None):
    if args.data:
        return _records(Path(args.data) / name, D.SftExample)
    return D.gen_sft_examples(count or args.num_examples, seed)


def _write_lines(path: Path, lines) -> None:
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _prompt_ids(args):
    return D.tokenize(args.prompt)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, model_cfg, pred_cfg, tcfg):
    out = _out(args)
    D.write_records(out / "cpt.jsonl", D.gen_cpt_corpus(args.num_docs, args.seed))
    D.write_records(out / "sft.jsonl", D.gen_sft_examples(args.num_examples, args.seed + 1))
    D.write_records(out / "eval.jsonl", D.gen_sft_examples(args.num_eval, args.seed + 2))
    print(f"wrote {out}/cpt.jsonl {out}/sft.jsonl {out}/eval.jsonl")


def _train_stage(args, model_cfg, pred_cfg, tcfg, stage, mode):
    tcfg = TrainConfig(**{**asdict(tcfg), "stage": stage, "mode": mode})
    if args.init:
        bundle = load_checkpoint(args.init)
        if bundle.mode != mode:
            raise ConfigError(f"--init checkpoint has mode {bundle.mode!r}, expected {mode!r}")
    elif stage == "sft" and not args.from_scratch:
        raise ConfigError("train-sft needs --init <cpt checkpoint> or --from-scratch")
    else:
        bundle = ModelBundle.create(model_cfg, mode, seed=args.seed, predictor_cfg=pred_cfg)
    data = _load_cpt(args, args.seed) if stage == "cpt" else _load_sft(args, args.seed + 1)
    result = train(bundle, tcfg, data)
    out = _out(args)
    save_checkpoint(out / "model.ifpc", bundle)
    _atomic_write(out / f"{stage}_log.csv", result.log_csv().encode("utf-8"))
    last = result.losses[-1] if result.losses else float("nan")
    print(f"checkpoint={out / 'model.ifpc'}")
    print(f"steps={tcfg.steps}")
    print(f"final_loss={last:.6f}")


def cmd_train_cpt(args, *cfgs):
    _train_stage(args, *cfgs, stage="cpt", mode=args.mode)


def cmd_train_sft(args, *cfgs):
    _train_stage(args, *cfgs, stage="sft", mode=args.mode)


def cmd_train_static(args, *cfgs):
    _train_stage(args, *cfgs, stage=args.stage, mode="static")


def _read_mask_file(path, cfg: ModelConfig) -> Mask:
    """Mask text as written by predict-mask: ``layer <i>: <idx> ...`` plus ``values`` rows."""
    sel, vals = {}, {}
    for line in Path(path).read_text().splitlines():
        head, _, rest = line.partition(":")
        parts = head.split()
        if len(parts) == 2 and parts[0] in ("layer", "values"):
            target = sel if parts[0] == "layer" else vals
            target[int(parts[1])] = [float(x) for x in rest.split()]
    m = np.zeros((cfg.n_layers, cfg.d_ffn))
    selected = []
    for i in range(cfg.n_layers):
        if i not in sel:
            raise ConfigError(f"mask file {path} has no row for layer {i}")
        idx = np.array(sel[i], dtype=int)
        m[i, idx] = vals.get(i, [1.0] * len(idx))
        selected.append(idx)
    return Mask(m=m, selected=np.array(selected), lam=m.copy(), tau=np.zeros(cfg.n_layers))


def cmd_eval(args, *cfgs):
    bundle = load_checkpoint(args.checkpoint)
    examples = _load_sft(args, args.seed + 2, name="eval.jsonl", count=args.num_eval)
    task_prompt = args.task_prompt if args.task_prompt else domain_task_prompts()
    static_mask = None
    if args.mask_mode == "static":
        if args.mask_file:
            static_mask = _read_mask_file(args.mask_file, bundle.cfg)
        elif bundle.selector is not None:
            static_mask = bundle.predict_mask(D.tokenize(args.prompt or "x"))
        else:
            raise ConfigError("static mask mode needs --mask-file")
    report = evaluate(bundle, examples, args.mask_mode, task_prompt=task_prompt,
                      static_mask=static_mask, exact_match=args.exact_match)
    lines = report.lines()
    for line in lines:
        print(line)
    _write_lines(_out(args) / "report.txt", lines)


def _mask_lines(mask: Mask) -> list[str]:
    lines = []
    for i, (s, row) in enumerate(zip(mask.selected, mask.m)):
        lines.append(f"layer {i}: " + " ".join(str(int(j)) for j in s))
        lines.append(f"values {i}: " + " ".join(f"{row[j]:.9g}" for j in s))
    return lines


def cmd_predict_mask(args, *cfgs):
    bundle = load_checkpoint(args.checkpoint)
    mask = bundle.predict_mask(_prompt_ids(args))
    if mask is None:
        raise ConfigError(f"checkpoint mode {bundle.mode!r} has no mask predictor")
    lines = _mask_lines(mask)
    _write_lines(_out(args) / "mask.txt", lines)
    for line in lines[::2]:
        print(line)


def cmd_export_pruned(args, *cfgs):
    bundle = load_checkpoint(args.checkpoint)
    mask = bundle.predict_mask(_prompt_ids(args))
    if mask is None:
        raise ConfigError(f"checkpoint mode {bundle.mode!r} has no mask predictor")
    pruned = materialize(bundle.model, mask)
    meta = {**bundle.meta, "selected": pruned.selected}
    out = _out(args) / "pruned.ifpc"
    save_checkpoint(out, ModelBundle(pruned.model, None, "pruned", meta))
    print(f"pruned_checkpoint={out}")
    print(f"d_ffn={pruned.cfg.d_ffn}")


def _trial_inputs(cfg: ModelConfig, prompt_ids, n: int, seed: int):
    rng = np.random.default_rng(seed)
    trials = [np.array(prompt_ids)]
    for _ in range(n - 1):
        length = int(rng.integers(1, min(cfg.max_seq, 64) + 1))
        trials.append(rng.integers(0, cfg.vocab, size=length))
    return trials


def cmd_check_equiv(args, *cfgs):
    bundle = load_checkpoint(args.checkpoint)
    mask = bundle.predict_mask(_prompt_ids(args))
    if mask is None:
        raise ConfigError(f"checkpoint mode {bundle.mode!r} has no mask predictor")
    if args.pruned:
        pb = load_checkpoint(args.pruned)
        if pb.mode != "pruned":
            raise ConfigError(f"{args.pruned} is not a pruned checkpoint")
        from .prune import PrunedModel
        pruned = PrunedModel(pb.model, mask.selected)
    else:
        pruned = materialize(bundle.model, mask)
    diff = check_equivalence(bundle.model, mask, _trial_inputs(bundle.cfg, _prompt_ids(args), args.trials, args.seed),
                             pruned=pruned)
    print(f"max_abs_diff={diff:.3e}")
    _write_lines(_out(args) / "equivalence.txt", [f"max_abs_diff={diff:.17g}"])


def cmd_overlap(args, *cfgs):
    bundle = load_checkpoint(args.checkpoint)
    om = overlap_matrix(bundle, overlap_prompts(args.per_domain, args.seed))
    paths = om.export(_out(args))
    last = bundle.cfg.n_layers - 1
    w, c = om.within_cross(last)
    _, p_dom = within_vs_cross_test(om, last, seed=args.seed)
    gap, p_gap = layer_gap_test(om, 0, last, seed=args.seed)
    print(f"last_layer_within={w:.6f}")
    print(f"last_layer_cross={c:.6f}")
    print(f"last_layer_domain_p={p_dom:.4f}")
    print(f"first_minus_last={gap:.6f}")
    print(f"first_minus_last_p={p_gap:.4f}")
    print("wrote " + " ".join(str(p) for p in paths))


def cmd_grad_check(args, *cfgs):
    from .softtopk import soft_topk, soft_topk_backward
    reports = check_primitives(seed=args.seed)
    ok = True
    for name, rep in reports.items():
        print(f"{name}: max_rel_err={rep.max_error:.3e} {'pass' if rep.passed else 'FAIL'}")
        ok &= rep.passed
    rng = np.random.default_rng(args.seed)
    z, up = rng.normal(size=8), rng.normal(size=8)
    analytic = soft_topk_backward(z, 3, up)
    num = np.zeros(8)
    for j in range(8):
        zp, zm = z.copy(), z.copy()
        zp[j] += 1e-5
        zm[j] -= 1e-5
        num[j] = (up @ soft_topk(zp, 3)[1] - up @ soft_topk(zm, 3)[1]) / 2e-5
    err = float(np.max(np.abs(analytic - num) / np.maximum(np.maximum(abs(analytic), abs(num)), 1e-8)))
    print(f"soft_topk: max_rel_err={err:.3e} {'pass' if err <= 1e-5 else 'FAIL'}")
    ok &= err <= 1e-5
    if not ok:
        raise NonFiniteError("gradient check failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cpt": cmd_train_cpt,
    "train-sft": cmd_train_sft,
    "train-static": cmd_train_static,
    "eval": cmd_eval,
    "predict-mask": cmd_predict_mask,
    "export-pruned": cmd_export_pruned,
    "check-equiv": cmd_check_equiv,
    "overlap": cmd_overlap,
    "grad-check": cmd_grad_check,
}


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ifprune", description="Instruction-conditioned FFN pruning toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--data", help="directory with cpt.jsonl / sft.jsonl / eval.jsonl")
    data.add_argument("--num-docs", type=int, default=4000)
    data.add_argument("--num-examples", type=int, default=3000)
    data.add_argument("--num-eval", type=int, default=300)

    trainp = _Parser(add_help=False)
    trainp.add_argument("--steps", type=int)
    trainp.add_argument("--batch-size", type=int)
    trainp.add_argument("--lr", type=float)
    trainp.add_argument("--chunks", type=int)
    trainp.add_argument("--chunk-size", type=int)
    trainp.add_argument("--init", help="checkpoint to start from")
    trainp.add_argument("--d-ffn", type=int)
    trainp.add_argument("--t-ffn", type=int)

    sub.add_parser("gen-data", parents=[common, data], help="write synthetic corpora")
    for name in ("train-cpt", "train-sft"):
        p = sub.add_parser(name, parents=[common, data, trainp], help=f"{name[6:]} stage")
        p.add_argument("--mode", choices=("dynamic", "static", "dense"), default="dynamic")
        if name == "train-sft":
            p.add_argument("--from-scratch", action="store_true")
    p = sub.add_parser("train-static", parents=[common, data, trainp], help="static-mask baseline")
    p.add_argument("--stage", choices=("cpt", "sft"), default="cpt")
    p.add_argument("--from-scratch", action="store_true")

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask-mode", choices=("per_input", "per_task", "dense", "static"), default="per_input")
    p.add_argument("--task-prompt", help="single task prompt (default: one description per domain)")
    p.add_argument("--mask-file", help="mask text from predict-mask, for --mask-mode static")
    p.add_argument("--prompt", help="prompt whose mask is used for --mask-mode static")
    p.add_argument("--exact-match", action="store_true")

    for name in ("predict-mask", "export-pruned", "check-equiv"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--prompt", required=True)
        if name == "check-equiv":
            p.add_argument("--pruned", help="pruned checkpoint from export-pruned")
            p.add_argument("--trials", type=int, default=10)

    p = sub.add_parser("overlap", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--per-domain", type=int, default=32)

    sub.add_parser("grad-check", parents=[common])
    return parser


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        raw = read_config(args.config) if args.config else {}
        overrides = {"train": {k: getattr(args, k, None) for k in ("steps", "batch_size", "lr", "chunks", "chunk_size")},
                     "model": {"d_ffn": getattr(args, "d_ffn", None), "t_ffn": getattr(args, "t_ffn", None)}}
        overrides["train"]["seed"] = args.seed
        cfgs = build_configs(raw, overrides)
        COMMANDS[args.command](args, *cfgs)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
