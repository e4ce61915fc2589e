"""``dscodec`` command-line tool: train, encode, decode, eval, compare.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .audio import AudioError, load_wav, save_wav
from .checkpoint import CheckpointError, load_checkpoint
from .codec import CodecMismatch
from .config import ConfigError, RunConfig
from .metrics import evaluate_corpus, register_pesq
from .tokens import TokenFormatError, deserialize_tokens, serialize_tokens
from .trainer import (
    MissingCheckpoint, StageName, TrainingDiverged, codec_from_checkpoint, dual_stage_train,
    mirror_vs_nonmirror_experiment, run_stage,
)

log = logging.getLogger("dscodec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({"seed": 0})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "output_dir", None) is not None:
        cfg.output_dir = str(args.output_dir)
    return cfg


def _progress(every: int):
    def on_step(step: int, record: dict):
        if step % every == 0:
            parts = " ".join(f"{k}={v:.4g}" for k, v in record.items())
            log.info("step %d %s", step, parts)
    return on_step


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dump())
        return EXIT_OK
    out = Path(cfg.output_dir)
    settings = cfg.settings()
    if args.stage is None:
        if args.init_from:
            raise UsageError("--init-from only applies together with --stage")
        data = cfg.dataset()
        res = dual_stage_train(cfg.codec_config(), data, cfg.plan("stage1"), cfg.plan(cfg.second_stage),
                               seed=cfg.seed, settings=settings, out_dir=out)
        log.info("wrote %s and %s", out / "stage1.ckpt", out / f"{res.stage2.stage}.ckpt")
        return EXIT_OK

    name = StageName(args.stage)
    plan = cfg.plan(name)
    if args.steps is not None:
        plan.total_steps = args.steps
    init = None
    if plan.needs_checkpoint:
        if not args.init_from:
            raise UsageError(f"--stage {name.value} needs a stage-1 checkpoint: pass --init-from "
                             f"{out / 'stage1.ckpt'}")
        if not Path(args.init_from).exists():
            raise UsageError(f"stage-1 checkpoint {args.init_from} does not exist")
    if args.init_from:
        init = load_checkpoint(args.init_from)
    data = cfg.dataset()
    res = run_stage(plan, data, config=cfg.codec_config(), init=init, seed=cfg.seed, settings=settings,
                    out_dir=out, on_step=_progress(args.log_every))
    log.info("wrote %s", out / f"{res.checkpoint.stage}.ckpt")
    return EXIT_OK


def cmd_encode(args) -> int:
    codec = codec_from_checkpoint(load_checkpoint(args.checkpoint))
    wav = load_wav(args.wav_in, expected_rate=codec.cfg.sample_rate, resample_to_expected=args.resample)
    tokens = codec.encode(wav)
    Path(args.tokens_out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.tokens_out).write_bytes(serialize_tokens(tokens))
    log.info("%d samples -> %d tokens", len(wav), len(tokens))
    return EXIT_OK


def cmd_decode(args) -> int:
    codec = codec_from_checkpoint(load_checkpoint(args.checkpoint))
    tokens = deserialize_tokens(Path(args.tokens_in).read_bytes())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        wav = codec.decode(tokens, strict=not args.force)
    for w in caught:
        log.warning("%s", w.message)
    Path(args.wav_out).parent.mkdir(parents=True, exist_ok=True)
    save_wav(args.wav_out, wav)
    log.info("%d tokens -> %d samples", len(tokens), len(wav))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.bypass and not args.checkpoint:
        raise UsageError("pass --checkpoint, or --bypass to score the references against themselves")
    codec = None if args.bypass else codec_from_checkpoint(load_checkpoint(args.checkpoint))
    if not args.no_pesq:
        register_pesq()
    metrics = args.metrics.split(",") if args.metrics else None
    try:
        result = evaluate_corpus(codec, args.manifest, metrics=metrics, out_dir=args.out_dir, bypass=args.bypass)
    except ValueError as exc:  # empty manifest
        raise UsageError(str(exc)) from exc
    print(result.table())
    if result.excluded:
        log.warning("%d file(s) excluded, see %s", len(result.excluded), Path(args.out_dir) / "summary.json")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    seeds = args.seeds if args.seeds else cfg.compare.seeds
    steps = args.steps if args.steps is not None else cfg.compare.steps
    out = Path(cfg.output_dir)
    report = mirror_vs_nonmirror_experiment(cfg.codec_config(), cfg.dataset(), seeds, steps=steps,
                                            batch_size=cfg.compare.batch_size, settings=cfg.settings(),
                                            out_dir=out, window=cfg.compare.window)
    for seed, res in report["seeds"].items():
        print(f"seed {seed}: lower io_mse -> {res['lower_io_mse']}, lower vq_loss -> {res['lower_vq_loss']}")
    print(json.dumps({"trend_holds": report["trend_holds"], "report": str(out / "report.json")}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dscodec", description="Dual-stage neural speech codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the dual-stage schedule or a single stage")
    t.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    t.add_argument("--stage", choices=[s.value for s in StageName])
    t.add_argument("--init-from", type=Path, help="stage-1 checkpoint for stage2/stage2t")
    t.add_argument("--output-dir", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total steps of the selected stage")
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="WAV -> token file")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("wav_in", type=Path)
    e.add_argument("tokens_out", type=Path)
    e.add_argument("--resample", action="store_true", help="resample input to the codec rate")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="token file -> WAV")
    d.add_argument("checkpoint", type=Path)
    d.add_argument("tokens_in", type=Path)
    d.add_argument("wav_out", type=Path)
    d.add_argument("--force", action="store_true", help="decode despite a codec_id mismatch")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="score encode/decode round trips over a manifest")
    v.add_argument("--checkpoint", type=Path)
    v.add_argument("--manifest", type=Path, required=True)
    v.add_argument("--out-dir", type=Path, required=True)
    v.add_argument("--bypass", action="store_true", help="identity codec: score references against themselves")
    v.add_argument("--metrics", help="comma-separated subset of pesq,stoi,f1_vuv")
    v.add_argument("--no-pesq", action="store_true", help="do not auto-register the pesq package")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="mirror vs non-mirror training comparison")
    c.add_argument("--config", type=Path)
    c.add_argument("--seeds", type=int, nargs="+")
    c.add_argument("--steps", type=int)
    c.add_argument("--output-dir", type=Path)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, MissingCheckpoint) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (CodecMismatch, TokenFormatError, CheckpointError, AudioError, TrainingDiverged,
            FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
