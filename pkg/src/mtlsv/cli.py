"""Command-line entry point: synth, train, extract, score, eval, gradcheck, info."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import data, pipeline
from . import network as net
from . import trainer
from . import trials as tr
from .config import RunConfig
from .gradcheck import network_grad_check, tiny_config

log = logging.getLogger("mtlsv")

POOLING_CHOICES = {"stats": "stats", "literal": "phone_att_literal", "weighted": "phone_att_weighted"}


class CliError(Exception):
    pass


def _run_config(args, **extra) -> RunConfig:
    overrides = dict(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "preset", None):
        overrides["preset"] = args.preset
    if getattr(args, "pooling", None):
        overrides["pooling_mode"] = POOLING_CHOICES[args.pooling]
    if getattr(args, "backend", None):
        overrides["backend"] = args.backend
    return RunConfig.load(getattr(args, "config", None), **overrides)


def cmd_synth(args) -> int:
    rc = _run_config(args)
    records, manifest = data.synth_corpus(rc.synth())
    paths = data.write_corpus(records, manifest, args.out, with_alignments=not args.no_alignments)
    for subset, path in paths.items():
        print(f"{subset} = {path}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    entries = data.read_manifest(args.manifest)
    has_alignments = any(e.alignment_path != "-" for e in entries)
    probe = rc.network(num_phonemes=rc.synth().num_phonemes, num_speakers=2)
    if probe.use_frame_phonetic and not has_alignments:
        raise CliError("this configuration trains phonetic subnets and needs a manifest with alignments")
    if not probe.use_frame_phonetic and has_alignments:
        raise CliError("single-task configuration rejects phoneme-label inputs; use a manifest without alignments")
    records = data.load_corpus(args.manifest, require_alignments=probe.use_frame_phonetic)
    config = rc.network(
        num_phonemes=rc.synth().num_phonemes,
        num_speakers=len(trainer.speaker_index(records)),
        input_dim=records[0].features.shape[1],
    )
    if probe.use_frame_phonetic:
        top = max(int(r.alignment.max()) for r in records)
        if top >= config.num_phonemes:
            raise CliError(f"alignment label {top} exceeds num_phonemes = {config.num_phonemes}")
    result = trainer.train(records, config, rc.schedule(), args.out, resume=args.resume)
    print(f"checkpoint = {result.checkpoint}")
    return 0


def cmd_extract(args) -> int:
    model, _, _ = net.load_checkpoint(args.model)
    records = data.load_corpus(args.manifest, require_alignments=False)
    ids, matrix = pipeline.extract_all(model, records)
    data.write_embeddings(args.out, ids, matrix)
    print(f"embeddings = {args.out}.feat ({matrix.shape[0]} x {matrix.shape[1]})")
    return 0


def cmd_score(args) -> int:
    rc = _run_config(args)
    bg_entries = {e.utt_id: e for e in data.read_manifest(args.background_manifest)}
    bg_ids, bg_matrix = data.read_embeddings(args.background)
    if rc.plda_classes == "speaker":
        labels = [bg_entries[u].speaker_id for u in bg_ids]
    else:
        labels = [tr.model_name(bg_entries[u].speaker_id, bg_entries[u].phrase_id) for u in bg_ids]
    backend = pipeline.fit_backend(bg_matrix, labels, rc.backend, rc.plda_iterations)
    entries = data.read_manifest(args.manifest)
    trials = tr.generate_trials(entries)
    ids, matrix = data.read_embeddings(args.embeddings)
    scores = pipeline.score_trials(trials, ids, matrix, backend)
    out = Path(args.out)
    tr.write_trials(out.with_suffix(".trials"), trials.trials)
    tr.write_scores(out, scores)
    print(f"scores = {out} ({len(trials)} trials)")
    return 0


def cmd_eval(args) -> int:
    scores = tr.read_scores(args.scores)
    rep = tr.report(scores)
    sys.stdout.write(rep.to_text())
    if args.out:
        Path(args.out).write_text(rep.to_csv(), encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    preset = args.preset or "S6"
    pooling = POOLING_CHOICES[args.pooling] if args.pooling else None
    if args.tiny:
        overrides = {"pooling_mode": pooling} if pooling else {}
        config = tiny_config(preset, **overrides)
    else:
        rc = _run_config(args)
        config = rc.network(num_phonemes=rc.synth().num_phonemes, num_speakers=3)
        config = net.NetworkConfig(**{**config.to_items(), "precision": "float64"})
    seed = args.seed if args.seed is not None else 0
    worst = max(network_grad_check(config, seed=seed + k) for k in range(args.points))
    ok = worst < 1e-4
    print(f"max_relative_error = {worst:.3e}")
    print(f"status = {'pass' if ok else 'fail'}")
    return 0 if ok else 1


def cmd_info(args) -> int:
    items, arrays = net.read_checkpoint(args.model)
    for k, v in items.items():
        print(f"{k} = {v}")
    params = [n for n in arrays if ":" not in n]
    print(f"num_parameter_arrays = {len(params)}")
    print(f"num_parameter_values = {sum(arrays[n].size for n in params)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlsv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=False):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        if preset:
            p.add_argument("--preset", choices=sorted(net.PRESETS))
            p.add_argument("--pooling", choices=sorted(POOLING_CHOICES))

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--no-alignments", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a background manifest")
    common(p, preset=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract embeddings for a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output stem; writes <stem>.feat and <stem>.ids")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("score", help="generate and score trials")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--background", required=True, help="stem of the background embeddings")
    p.add_argument("--background-manifest", required=True)
    p.add_argument("--backend", choices=("cosine", "plda"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="EER report from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    common(p, preset=True)
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--points", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="print checkpoint metadata")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, ArithmeticError, KeyError) as exc:
        print(f"mtlsv {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
