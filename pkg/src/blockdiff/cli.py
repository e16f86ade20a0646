"""Command-line surface: training, generation, evaluation, verification.

One binary with subcommands.  Every tunable resolves as: built-in default,
overridden by a ``key=value`` config file (``#`` comments), overridden by
an explicit flag.  Each run writes the merged configuration next to its
outputs as ``run_config.json``, and all outputs are written atomically.
The environment variable ``CTRLDIFF_SEED`` supplies the seed when no
``--seed`` flag or config key does.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import verify as verify_mod
from .checkpoint import save_json_atomic, write_text_atomic
from .classifier import NoisedSequenceClassifier
from .corpus import read_labeled_corpus, split_text8
from .denoiser import MaskedDiffusionLM
from .guidance import GuidanceConfig, make_guide_fn
from .metrics import (
    MetricReport,
    bpc,
    control_accuracy,
    dist_n,
    generative_perplexity,
    perplexity,
    token_entropy,
)
from .policy import BlockLengthPolicy
from .sampling import BlockLayout, SamplerConfig, generate_sequence, sequence_nll_bound
from .validation import default_seed


def _parse_config_file(path: str) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in str(value).replace(",", " ").split())
    return value


def _merge_params(defaults: dict, args: argparse.Namespace) -> dict:
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in _parse_config_file(config_path).items():
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _coerce(value, defaults[key])
    for key in defaults:
        if key in vars(args):
            merged[key] = _coerce(vars(args)[key], defaults[key])
    return merged


def _add_param_flags(parser: argparse.ArgumentParser, defaults: dict):
    parser.add_argument("--config", help="key=value config file")
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            parser.add_argument(flag, default=argparse.SUPPRESS,
                                action="store_true")
        else:
            parser.add_argument(flag, default=argparse.SUPPRESS, type=str)


def _resolve_seed(params: dict) -> int:
    seed = params.get("seed")
    params["seed"] = default_seed(seed if seed is not None else None)
    return params["seed"]


def _read_corpus(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"corpus file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _dump_run_config(outdir: str, command: str, params: dict):
    save_json_atomic(os.path.join(outdir, "run_config.json"),
                     {"command": command, **params})


DENOISER_DEFAULTS = dict(
    layers=4, hidden_dim=128, heads=4, context_length=256, learn_rate=3e-4,
    warmup_steps=2500, batch_size=8, steps=10000, block_sizes=(1, 4, 8, 16),
    weight_decay=0.01, grad_clip=1.0, unknown="error", seed=None,
)

CLASSIFIER_DEFAULTS = dict(
    layers=2, heads=4, hidden_dim=64, context_length=256, n_classes=2,
    learn_rate=3e-4, warmup_steps=250, batch_size=32, steps=2000,
    unknown="error", seed=None,
)

POLICY_DEFAULTS = dict(
    action_lengths=(4, 8, 16), window=4, episodes=500, target_len=64,
    clip_eps=0.2, discount=0.99, gae_lambda=0.95, epochs=4, minibatch_size=64,
    reward_weight=0.5, learn_rate=3e-3, update_every=16, n_prompts=32,
    prompt_len=16, seed=None,
)


def cmd_train_denoiser(args) -> int:
    params = _merge_params(DENOISER_DEFAULTS, args)
    _resolve_seed(params)
    text = _read_corpus(args.corpus)
    est_params = {k: v for k, v in params.items()}
    est_params["seed"] = params["seed"]
    est = MaskedDiffusionLM(**est_params)
    lines = []

    def log_fn(step, loss):
        lines.append(json.dumps({"step": step, "loss": loss}))
        print(f"step {step}: loss {loss:.4f}", flush=True)

    est.fit(text, log_fn=log_fn)
    os.makedirs(args.out, exist_ok=True)
    est.save(os.path.join(args.out, "checkpoint"))
    trace = "\n".join(json.dumps({"step": i, "loss": v})
                      for i, v in enumerate(est.loss_trace_))
    write_text_atomic(os.path.join(args.out, "metrics.jsonl"), trace + "\n")
    _dump_run_config(args.out, "train-denoiser", params)
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint')}")
    return 0


def cmd_train_classifier(args) -> int:
    params = _merge_params(CLASSIFIER_DEFAULTS, args)
    _resolve_seed(params)
    examples = read_labeled_corpus(args.corpus, n_classes=params["n_classes"])
    est = NoisedSequenceClassifier(**params)
    est.fit([e.text for e in examples], [e.label for e in examples],
            log_fn=lambda step, loss: print(f"step {step}: loss {loss:.4f}",
                                            flush=True))
    os.makedirs(args.out, exist_ok=True)
    est.save(os.path.join(args.out, "checkpoint"))
    trace = "\n".join(json.dumps({"step": i, "loss": v})
                      for i, v in enumerate(est.loss_trace_))
    write_text_atomic(os.path.join(args.out, "metrics.jsonl"), trace + "\n")
    _dump_run_config(args.out, "train-classifier", params)
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint')}")
    return 0


def cmd_train_policy(args) -> int:
    params = _merge_params(POLICY_DEFAULTS, args)
    _resolve_seed(params)
    denoiser = MaskedDiffusionLM.load(args.denoiser)
    text = _read_corpus(args.corpus)
    rng = np.random.default_rng(params["seed"])
    n, plen = params.pop("n_prompts"), params.pop("prompt_len")
    prompts = []
    for _ in range(n):
        start = int(rng.integers(0, max(len(text) - plen, 1)))
        prompts.append(text[start:start + plen])
    policy_params = dict(params)
    policy_params["feature_dim"] = denoiser.hidden_dim
    policy = BlockLengthPolicy(**policy_params)
    trace_lines = []

    def trace_fn(entry):
        histogram = {}
        for a in entry["actions"]:
            key = str(policy.action_lengths[a])
            histogram[key] = histogram.get(key, 0) + 1
        line = {"episode": entry["episode"],
                "mean_reward": entry["mean_reward"],
                "lengths": histogram}
        trace_lines.append(json.dumps(line))
        if entry["episode"] % 25 == 0:
            print(f"episode {entry['episode']}: "
                  f"mean reward {entry['mean_reward']:.3f}", flush=True)

    policy.fit(denoiser, prompts, trace_fn=trace_fn)
    os.makedirs(args.out, exist_ok=True)
    policy.save(os.path.join(args.out, "checkpoint"))
    write_text_atomic(os.path.join(args.out, "reward_trace.jsonl"),
                      "\n".join(trace_lines) + "\n")
    _dump_run_config(args.out, "train-policy", {**params, "n_prompts": n,
                                                "prompt_len": plen})
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint')}")
    return 0


GENERATE_DEFAULTS = dict(
    prompt="", length=64, block="fixed:8", guidance="none",
    sampler="first-hitting", steps_per_block=64, nucleus=0.9, seed=None,
)


def cmd_generate(args) -> int:
    params = _merge_params(GENERATE_DEFAULTS, args)
    seed = _resolve_seed(params)
    denoiser = MaskedDiffusionLM.load(args.denoiser)
    cfg = SamplerConfig(mode=params["sampler"].replace("-", "_"),
                        steps_per_block=int(params["steps_per_block"]),
                        nucleus_p=float(params["nucleus"]))

    guide_fn = None
    if params["guidance"] != "none":
        label_s, gamma_s, mode = params["guidance"].split(":")
        gcfg = GuidanceConfig(gamma=float(gamma_s), target_label=int(label_s),
                              approx=mode)
        if not args.classifier:
            raise ValueError("--guidance requires --classifier")
        classifier = NoisedSequenceClassifier.load(args.classifier)
        if classifier.alphabet != denoiser.alphabet:
            raise ValueError(
                "classifier and denoiser checkpoints use different vocabularies")
        guide_fn = make_guide_fn(classifier, gcfg)

    length = int(params["length"])
    block_spec = params["block"]
    if block_spec.startswith("fixed:"):
        layout_source = BlockLayout.fixed(length, int(block_spec.split(":", 1)[1]))
    elif block_spec.startswith("policy:"):
        policy = BlockLengthPolicy.load(block_spec.split(":", 1)[1])
        layout_source = policy.layout_fn(denoiser, seed + 1)
    else:
        raise ValueError(f"--block must be fixed:N or policy:DIR, got {block_spec!r}")

    prompt_ids = (denoiser.tokenizer_.encode(params["prompt"])
                  if params["prompt"] else np.empty(0, dtype=np.int64))
    ids, info = generate_sequence(
        denoiser.x0_fn(), prompt_ids, length, layout_source,
        denoiser.schedule_, cfg, denoiser.vocab_, seed, guide_fn=guide_fn)
    text = denoiser.tokenizer_.decode(ids)
    print(text)
    if args.outdir:
        os.makedirs(args.outdir, exist_ok=True)
        write_text_atomic(os.path.join(args.outdir, "sample.txt"), text + "\n")
        save_json_atomic(os.path.join(args.outdir, "sample.json"), {
            "seed": seed,
            "block_lengths": info["block_lengths"],
            "block_seconds": info["block_seconds"],
            "prompt_chars": int(prompt_ids.shape[0]),
        })
        _dump_run_config(args.outdir, "generate", params)
    return 0


EVAL_DEFAULTS = dict(
    block_size=8, mc_samples=4, eval_chars=8192, target_label=-1,
    timing=False, seed=None,
)


def cmd_eval(args) -> int:
    params = _merge_params(EVAL_DEFAULTS, args)
    seed = _resolve_seed(params)
    denoiser = MaskedDiffusionLM.load(args.denoiser)
    report = MetricReport()

    if args.corpus:
        text = _read_corpus(args.corpus)[: int(params["eval_chars"])]
        ids = denoiser.tokenizer_.encode(text)
        ctx = denoiser.context_length
        rows = ids[: (ids.shape[0] // ctx) * ctx].reshape(-1, ctx)
        layout = BlockLayout.fixed(ctx, int(params["block_size"]))
        x0_fn = denoiser.x0_fn()
        nll = sum(
            sequence_nll_bound(x0_fn, row, layout, denoiser.schedule_,
                               denoiser.vocab_, int(params["mc_samples"]),
                               seed + i)
            for i, row in enumerate(rows)
        )
        chars = rows.size
        report.bpc = bpc(nll, chars)
        report.ppl = perplexity(nll, chars)

    if args.samples:
        with open(args.samples, "r", encoding="utf-8") as fh:
            texts = [line.rstrip("\n") for line in fh if line.strip()]
        sample_ids = [denoiser.tokenizer_.encode(t) for t in texts]
        report.gen_ppl = generative_perplexity(sample_ids, denoiser)
        report.dist1 = dist_n(sample_ids, 1)
        report.dist2 = dist_n(sample_ids, 2)
        report.dist3 = dist_n(sample_ids, 3)
        report.entropy = float(np.mean([token_entropy(s) for s in sample_ids]))
        if args.classifier and int(params["target_label"]) >= 0:
            classifier = NoisedSequenceClassifier.load(args.classifier)
            report.control_accuracy = control_accuracy(
                sample_ids, classifier, int(params["target_label"]))

    if params["timing"]:
        cfg = SamplerConfig(nucleus_p=0.9)
        layout = BlockLayout.fixed(128, int(params["block_size"]))
        t0 = time.perf_counter()
        generate_sequence(denoiser.x0_fn(), np.empty(0, dtype=np.int64), 128,
                          layout, denoiser.schedule_, cfg, denoiser.vocab_, seed)
        report.tokens_per_second = 128 / (time.perf_counter() - t0)

    payload = report.to_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.outdir:
        os.makedirs(args.outdir, exist_ok=True)
        save_json_atomic(os.path.join(args.outdir, "report.json"), payload)
        _dump_run_config(args.outdir, "eval", params)
    return 0


def cmd_verify(args) -> int:
    suites = [args.suite] if args.suite else list(verify_mod.SUITES)
    ok = True
    for name in suites:
        if name not in verify_mod.SUITES:
            raise ValueError(f"unknown suite {name!r}")
        for report in verify_mod.SUITES[name]():
            print(f"== {report.name} ==")
            for line in report.lines:
                print(line)
            ok &= report.ok
    print("verify:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockdiff",
        description="semi-autoregressive masked-diffusion text modeling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-denoiser", help="train the block denoiser")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_param_flags(p, DENOISER_DEFAULTS)
    p.set_defaults(fn=cmd_train_denoiser)

    p = sub.add_parser("train-classifier", help="train the noised classifier")
    p.add_argument("--corpus", required=True, help="label<TAB>text lines")
    p.add_argument("--out", required=True)
    _add_param_flags(p, CLASSIFIER_DEFAULTS)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("train-policy", help="train the block-length policy")
    p.add_argument("--denoiser", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_param_flags(p, POLICY_DEFAULTS)
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("generate", help="sample text")
    p.add_argument("--denoiser", required=True)
    p.add_argument("--classifier")
    p.add_argument("--outdir")
    _add_param_flags(p, GENERATE_DEFAULTS)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="compute metrics")
    p.add_argument("--denoiser", required=True)
    p.add_argument("--corpus")
    p.add_argument("--samples")
    p.add_argument("--classifier")
    p.add_argument("--outdir")
    _add_param_flags(p, EVAL_DEFAULTS)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run brute-force oracle suites")
    p.add_argument("--suite", choices=sorted(verify_mod.SUITES))
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single operator-facing surface
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
