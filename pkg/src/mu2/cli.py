"""Command line entry points.

Exit codes: 0 on success, 1 for invalid inputs or a failed check, 2 for
runtime failures such as missing files or an unreachable chat service.
Subcommands print a single JSON line with their key results so runs are easy
to script against.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import checkpoint, dpo, gradcheck, metrics, prefs, synth, volume
from .chat import HttpChatClient, MockChatClient, ReplayClient
from .config import build_model, load_config
from .volume import FrameStack


def _make_client(cfg, replay_path=None):
    if replay_path is not None:
        return ReplayClient(replay_path)
    c = cfg.client
    if c.kind == "mock":
        return MockChatClient()
    if c.kind == "replay":
        raise ValueError("client.kind is 'replay'; pass --replay with a transcript path")
    if not c.base_url or not c.model:
        raise ValueError("client.kind 'http' requires client.base_url and client.model")
    return HttpChatClient(c.base_url, c.model, temperature=c.temperature,
                          timeout=c.timeout, retries=c.retries,
                          backoff=c.backoff_base, auth_env=c.auth_env)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    vol = volume.read_volume(args.input)
    vol = volume.min_max_normalize(vol)
    stack = volume.resample_and_frame(vol, cfg.volume.frames,
                                      cfg.volume.slices_per_frame,
                                      cfg.volume.height, cfg.volume.width)
    if cfg.volume.noise_sigma > 0:
        stack = volume.add_noise(stack, cfg.volume.noise_sigma, cfg.seed)
    np.save(args.output, stack.data)
    _emit({"output": args.output, "shape": list(stack.data.shape)})
    return 0


def cmd_tokenize(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    if args.params:
        checkpoint.load_model(args.params, model)
    stack = FrameStack(np.load(args.input))
    result = model.tokenize_detailed(stack, args.question)
    np.save(args.output, result.compact.tokens.numpy())
    if args.provenance:
        np.save(args.provenance, result.compact.provenance_weights.numpy())
    if args.save_params:
        checkpoint.save_model(args.save_params, model)
    _emit({"output": args.output,
           "tokens": list(result.compact.tokens.shape),
           "pooled_length": cfg.model.pooled_length})
    return 0


def cmd_grad_check(args) -> int:
    if args.ops == "all":
        ops = gradcheck.registered_ops()
    else:
        ops = [op.strip() for op in args.ops.split(",") if op.strip()]
    reports = [gradcheck.check_op(op, seed=args.seed, tolerance=args.tolerance,
                                  step=args.step) for op in ops]
    for report in reports:
        print(report.summary())
    failed = [r.op for r in reports if not r.passed]
    _emit({"checked": len(reports), "failed": failed})
    return 1 if failed else 0


def cmd_dpo_loss(args) -> int:
    policy = dpo.CharBigramLM(seed=args.policy_seed)
    reference = dpo.CharBigramLM(seed=args.reference_seed)
    pair = dpo.score_pair(policy, reference, args.prompt, args.chosen,
                          args.rejected)
    loss = dpo.dpo_loss(pair, beta=args.beta)
    grad = dpo.dpo_loss_grad(pair, beta=args.beta)
    _emit({"loss": loss,
           "grad_policy_chosen": grad.policy_chosen,
           "grad_policy_rejected": grad.policy_rejected,
           "grad_reference_chosen": grad.reference_chosen,
           "grad_reference_rejected": grad.reference_rejected})
    return 0


def cmd_pref_build(args) -> int:
    cfg = load_config(args.config)
    if cfg.client.kind == "mock" and args.replay is None:
        scorer = prefs.RougeScorer()
    else:
        scorer = prefs.RemoteScorer(_make_client(cfg, args.replay))
    prompts = prefs.load_prompts(args.prompts)
    seed = cfg.seed if args.seed is None else args.seed
    pairs, counts = prefs.build_pairs(prompts, scorer,
                                      n_candidates=cfg.n_candidates,
                                      seed=seed,
                                      max_inflight=cfg.max_inflight)
    prefs.write_pairs(args.output, pairs)
    _emit({"output": args.output, **counts})
    return 0


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def cmd_eval(args) -> int:
    candidates = _read_lines(args.candidates)
    references = _read_lines(args.references)
    if len(candidates) != len(references):
        raise ValueError(f"line counts differ: {len(candidates)} candidates "
                         f"vs {len(references)} references")
    reports = [metrics.score_pair(c, r) for c, r in zip(candidates, references)]
    if args.per_line:
        with open(args.per_line, "w", encoding="utf-8") as fh:
            for report in reports:
                fh.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
    _emit(metrics.corpus_mean(reports))
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    reports = synth.load_reports(args.reports)
    client = _make_client(cfg, args.replay)
    stages = synth.STAGES if args.stage == "all" else (args.stage,)
    summary = synth.run_pipeline(reports, args.out_dir, client, stages=stages,
                                 resume=args.resume,
                                 max_inflight=cfg.max_inflight)
    _emit(summary)
    return 0


def cmd_rewrite(args) -> int:
    cfg = load_config(args.config)
    client = _make_client(cfg, args.replay)
    with open(args.examples, encoding="utf-8") as fh:
        examples = [block for block in fh.read().split("\n\n") if block.strip()]
    reports = synth.load_reports(args.reports)
    with open(args.output, "w", encoding="utf-8") as fh:
        for report in reports:
            rewritten = synth.rewrite_report(report["report"], examples, client)
            fh.write(json.dumps({"report_id": report["report_id"],
                                 "report": rewritten}, ensure_ascii=False) + "\n")
    _emit({"output": args.output, "reports": len(reports)})
    return 0


def cmd_translate(args) -> int:
    cfg = load_config(args.config)
    client = _make_client(cfg, args.replay)
    with open(args.input, encoding="utf-8") as fh:
        text = fh.read()
    translated = synth.translate_text(text, args.source_lang, args.target_lang,
                                      client)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(translated)
    _emit({"output": args.output, "chars": len(translated)})
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mu2",
                                     description="CT volume tokenizer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize and window a raw volume")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("tokenize", help="run a frame stack through the model")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True, help="frame stack .npy from ingest")
    p.add_argument("--question", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--provenance", help="also save provenance weights (.npy)")
    p.add_argument("--params", help="load parameters from this checkpoint")
    p.add_argument("--save-params", help="save parameters to this checkpoint")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("grad-check", help="verify analytic gradients")
    p.add_argument("--ops", default="all", help="comma separated op names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=gradcheck.DEFAULT_TOLERANCE)
    p.add_argument("--step", type=float, default=gradcheck.DEFAULT_STEP)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dpo-loss", help="score one preference pair")
    p.add_argument("--prompt", required=True)
    p.add_argument("--chosen", required=True)
    p.add_argument("--rejected", required=True)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--policy-seed", type=int, default=0)
    p.add_argument("--reference-seed", type=int, default=0)
    p.set_defaults(func=cmd_dpo_loss)

    p = sub.add_parser("pref-build", help="build preference pairs from prompts")
    p.add_argument("--config", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="candidate seed; defaults to the config seed")
    p.add_argument("--replay", help="serve scorer replies from this transcript")
    p.set_defaults(func=cmd_pref_build)

    p = sub.add_parser("eval", help="score candidate reports against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--per-line", help="write per-line scores to this JSONL file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="run the QA synthesis pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage", default="all",
                   choices=("all",) + synth.STAGES)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--replay", help="serve chat replies from this transcript")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rewrite", help="paraphrase reports in a house style")
    p.add_argument("--config", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--examples", required=True,
                   help="text file of style examples separated by blank lines")
    p.add_argument("--output", required=True)
    p.add_argument("--replay", help="serve chat replies from this transcript")
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("translate", help="translate a text file")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--source-lang", required=True)
    p.add_argument("--target-lang", required=True)
    p.add_argument("--replay", help="serve chat replies from this transcript")
    p.set_defaults(func=cmd_translate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - keep the CLI from tracebacking
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
