"""Command-line entry point: segment, synth, train, eval, probe, export.

Configuration precedence is defaults, then the ``--config`` TOML file, then
command-line flags. Every output artifact is written atomically (temp file
plus rename) and gets a ``<path>.meta.json`` sidecar echoing the effective
configuration, so any run can be reproduced from its outputs. Exit codes:
0 success, 1 validation or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import datapipe, evalkit, synthgen, trainer
from .errors import DatkitError, NumericError, ValidationError
from .evalkit import ProbeConfig
from .model import ModelConfig
from .optim import Schedules
from .trainer import TrainConfig

log = logging.getLogger("datkit")

CONFIG_SECTIONS = {
    "": {"seed", "task", "threads"},
    "model": {"input_dim", "encoder_layers", "encoder_hidden", "head_hidden", "seed"},
    "train": {"mode", "epochs", "batch", "lr", "weighted_loss"},
    "schedules": {
        "lambda_start",
        "lambda_end",
        "lambda_ramp_steps",
        "lambda_ramp",
        "ema_coefficient",
    },
    "synth": {"n", "dim", "joint", "label_signal", "gender_signal", "noise_sigma", "split"},
    "probe": {"steps", "lr"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"config file {path}: {exc}") from None
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in CONFIG_SECTIONS:
                raise ValidationError(f"config file {path}: unknown section [{key}]")
            unknown = set(value) - CONFIG_SECTIONS[key]
            if unknown:
                raise ValidationError(f"config file {path}: unknown keys in [{key}]: {sorted(unknown)}")
        elif key not in CONFIG_SECTIONS[""]:
            raise ValidationError(f"config file {path}: unknown top-level key {key!r}")
    return raw


def atomic_write(path, data) -> None:
    """Write bytes or text so the target never holds partial output."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_sidecar(out_path, command: str, effective: dict) -> None:
    sidecar = Path(str(out_path) + ".meta.json")
    atomic_write(sidecar, json.dumps({"command": command, "config": effective}, indent=2, sort_keys=True) + "\n")


class Settings:
    """Defaults merged with the config file and flag overrides."""

    def __init__(self, args):
        self.raw = load_config_file(args.config) if getattr(args, "config", None) else {}
        self.args = args

    def value(self, section: str, key: str, flag: str | None = None, default=None):
        flag_value = getattr(self.args, flag, None) if flag else None
        if flag_value is not None:
            return flag_value
        table = self.raw.get(section, {}) if section else self.raw
        return table.get(key, default)

    def seed(self) -> int:
        return int(self.value("", "seed", flag="seed", default=0))

    def task(self) -> str:
        return self.value("", "task", flag="task", default="depression")

    def threads(self) -> int:
        threads = int(self.value("", "threads", flag="threads", default=1))
        if threads < 1:
            raise ValidationError(f"--threads must be >= 1, got {threads}")
        return threads

    def model_config(self, input_dim: int) -> ModelConfig:
        section = self.raw.get("model", {})
        declared = section.get("input_dim", input_dim)
        if declared != input_dim:
            raise ValidationError(f"model input_dim {declared} does not match manifest dim {input_dim}")
        return ModelConfig(
            input_dim=input_dim,
            encoder_layers=int(section.get("encoder_layers", 2)),
            encoder_hidden=int(section.get("encoder_hidden", 128)),
            head_hidden=int(section.get("head_hidden", 256)),
            seed=int(section.get("seed", self.seed())),
        )

    def schedules(self) -> Schedules:
        section = self.raw.get("schedules", {})
        ramp = self.value("schedules", "lambda_ramp", flag="lambda_ramp", default="linear")
        return Schedules(
            lambda_start=float(section.get("lambda_start", 0.0096)),
            lambda_end=float(section.get("lambda_end", 1.0)),
            lambda_ramp_steps=int(section.get("lambda_ramp_steps", 200)),
            lambda_ramp=ramp,
            ema_coefficient=float(section.get("ema_coefficient", 0.5)),
        )

    def train_config(self, input_dim: int) -> TrainConfig:
        return TrainConfig(
            mode=self.value("train", "mode", flag="mode", default="finetune"),
            epochs=int(self.value("train", "epochs", flag="epochs", default=50)),
            batch_size=int(self.value("train", "batch", flag="batch", default=8)),
            lr=float(self.value("train", "lr", flag="lr", default=5e-5)),
            schedules=self.schedules(),
            model=self.model_config(input_dim),
            weighted_loss=bool(self.value("train", "weighted_loss", flag="weighted_loss", default=True)),
            seed=self.seed(),
            task=self.task(),
        )

    def synth_config(self) -> synthgen.SynthConfig:
        section = self.raw.get("synth", {})
        joint = section.get("joint", list(synthgen.DEFAULT_JOINT))
        return synthgen.SynthConfig(
            n=int(self.value("synth", "n", flag="n", default=0)),
            dim=int(self.value("synth", "dim", flag="dim", default=32)),
            joint=tuple(float(p) for p in joint),
            label_signal=float(section.get("label_signal", 1.0)),
            gender_signal=float(section.get("gender_signal", 1.0)),
            noise_sigma=float(section.get("noise_sigma", 0.5)),
            seed=self.seed(),
            split=self.value("synth", "split", flag="split", default="train"),
            task=self.task(),
        )

    def probe_config(self) -> ProbeConfig:
        section = self.raw.get("probe", {})
        return ProbeConfig(
            steps=int(section.get("steps", 200)),
            lr=float(section.get("lr", 1e-2)),
            seed=self.seed(),
        )


def _effective(obj) -> dict:
    return dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)


def _load_examples(path, split: str):
    manifest = datapipe.read_manifest(path)
    if split != "all":
        manifest.examples = [e for e in manifest.examples if e.split == split]
    return manifest


def _params_from(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    params = ckpt.live if getattr(args, "use_live", False) else ckpt.ema
    return ckpt, params


def cmd_segment(args, settings: Settings) -> int:
    utterances = datapipe.parse_transcript(args.transcript, interview_id=args.id)
    if args.exclude:
        exclusions = datapipe.load_exclusions(args.exclude)
        utterances = datapipe.apply_exclusions(utterances, exclusions.get(args.id, set()))
    utterances = datapipe.drop_tail(utterances, args.drop_tail)
    segments = datapipe.segment(utterances, max_seconds=args.max_seconds, max_members=args.max_members)
    log.info("segment: %d utterances -> %d segments", len(utterances), len(segments))

    slices: list[tuple[Path, bytes]] = []
    if args.wav:
        out_dir = Path(args.wav_out or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        wav_bytes = Path(args.wav).read_bytes()
        for seg in segments:
            slices.append((out_dir / f"{args.id}-{seg.ordinal:04d}.wav", datapipe.slice_wav(wav_bytes, seg)))
    for path, data in slices:
        atomic_write(path, data)

    sink = io.StringIO()
    datapipe.write_cut_list(segments, sink)
    atomic_write(args.out, sink.getvalue())
    write_sidecar(
        args.out,
        "segment",
        {
            "transcript": str(args.transcript),
            "interview_id": args.id,
            "drop_tail": args.drop_tail,
            "max_seconds": args.max_seconds,
            "max_members": args.max_members,
            "wav": str(args.wav) if args.wav else None,
        },
    )
    return 0


def cmd_synth(args, settings: Settings) -> int:
    config = settings.synth_config()
    examples = synthgen.generate(config)
    manifest = datapipe.Manifest(dim=config.dim, task=config.task, examples=examples)

    sink = io.StringIO()
    datapipe.write_manifest(manifest, sink)
    atomic_write(args.out, sink.getvalue())
    write_sidecar(args.out, "synth", _effective(config))
    log.info("synth: wrote %d examples to %s", len(examples), args.out)
    return 0


def cmd_train(args, settings: Settings) -> int:
    manifest = _load_examples(args.manifest, args.split)
    if not manifest.examples:
        raise ValidationError(f"manifest {args.manifest} has no examples for split {args.split!r}")
    config = settings.train_config(manifest.dim)
    if manifest.task != config.task:
        raise ValidationError(f"manifest task {manifest.task!r} does not match configured task {config.task!r}")
    result = trainer.train(config, manifest.examples)
    for i, breakdown in enumerate(result.epoch_losses):
        log.info(
            "epoch %d: l_mental=%.6f l_dis=%.6f lambda=%.4f l_final=%.6f",
            i,
            breakdown.l_mental,
            breakdown.l_dis,
            breakdown.lam,
            breakdown.l_final,
        )

    tmp = str(args.out) + ".tmp"
    try:
        trainer.save_checkpoint(result.checkpoint, tmp)
        os.replace(tmp, args.out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    trace_path = Path(str(args.out) + ".trace.json")
    atomic_write(
        trace_path,
        json.dumps(
            {
                "epoch_losses": [dataclasses.asdict(b) for b in result.epoch_losses],
                "step_lambdas": result.step_lambdas,
            }
        )
        + "\n",
    )
    write_sidecar(args.out, "train", _effective(config))
    return 0


def cmd_eval(args, settings: Settings) -> int:
    ckpt, params = _params_from(args)
    manifest = _load_examples(args.manifest, args.split)
    if not manifest.examples:
        raise ValidationError(f"manifest {args.manifest} has no examples for split {args.split!r}")
    if manifest.task != ckpt.config.task:
        raise ValidationError(f"manifest task {manifest.task!r} does not match checkpoint task {ckpt.config.task!r}")
    report = evalkit.evaluate(params, manifest.examples, by_participant=args.by_participant)
    payload = report.to_json() + "\n"
    if args.out:
        atomic_write(args.out, payload)
        write_sidecar(args.out, "eval", {"checkpoint": str(args.checkpoint), "split": args.split,
                                         "by_participant": args.by_participant,
                                         "weights": "live" if args.use_live else "ema"})
    else:
        sys.stdout.write(payload)
    log.info("eval: f1_avg=%.4f f1_gender_avg=%.4f", report.overall.f1_avg, report.f1_gender_avg)
    return 0


def cmd_probe(args, settings: Settings) -> int:
    ckpt, params = _params_from(args)
    manifest = _load_examples(args.manifest, args.split)
    accuracy = evalkit.gender_probe(params, manifest.examples, settings.probe_config())
    payload = json.dumps({"probe_accuracy": accuracy}) + "\n"
    if args.out:
        atomic_write(args.out, payload)
        write_sidecar(args.out, "probe", {"checkpoint": str(args.checkpoint), "split": args.split,
                                          **_effective(settings.probe_config())})
    else:
        sys.stdout.write(payload)
    log.info("probe: gender accuracy %.4f", accuracy)
    return 0


def cmd_export(args, settings: Settings) -> int:
    ckpt, params = _params_from(args)
    manifest = _load_examples(args.manifest, args.split)

    sink = io.StringIO()
    rows = evalkit.export_embeddings(params, manifest.examples, sink)
    atomic_write(args.out, sink.getvalue())
    write_sidecar(args.out, "export", {"checkpoint": str(args.checkpoint), "split": args.split, "rows": rows})
    log.info("export: wrote %d rows to %s", rows, args.out)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="datkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="seed for all randomness")
        p.add_argument("--task", choices=datapipe.TASKS, help="which label the manifest carries")
        p.add_argument("--threads", type=int, help="worker threads (determinism-first, default 1)")
        if out_required:
            p.add_argument("--out", required=True, help="output artifact path")

    p = sub.add_parser("segment", help="transcript -> cut list (+ optional WAV slices)")
    common(p)
    p.add_argument("--transcript", required=True)
    p.add_argument("--id", required=True, help="interview id recorded in the cut list")
    p.add_argument("--drop-tail", type=int, default=2, dest="drop_tail")
    p.add_argument("--max-seconds", type=float, default=10.0, dest="max_seconds")
    p.add_argument("--max-members", type=int, default=5, dest="max_members")
    p.add_argument("--exclude", help="JSON exclusion list of utterance indices per interview")
    p.add_argument("--wav", help="source WAV to slice")
    p.add_argument("--wav-out", dest="wav_out", help="directory for sliced WAV files")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("synth", help="generate a synthetic biased manifest")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--split", choices=datapipe.SPLITS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="manifest -> checkpoint + loss trace")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-ramp", choices=("linear", "sigmoid"), dest="lambda_ramp")
    p.add_argument("--no-weighted-loss", action="store_false", dest="weighted_loss", default=None)
    p.add_argument("--split", choices=("train", "test", "all"), default="train")
    p.set_defaults(func=cmd_train)

    for name, func, needs_out in (("eval", cmd_eval, False), ("probe", cmd_probe, False), ("export", cmd_export, True)):
        p = sub.add_parser(name, help=f"{name} a checkpoint against a manifest")
        common(p, out_required=needs_out)
        if not needs_out:
            p.add_argument("--out", help="output path (stdout when omitted)")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", choices=("train", "test", "all"), default="all")
        p.add_argument("--use-live", action="store_true", dest="use_live", help="evaluate live weights instead of EMA")
        if name == "eval":
            p.add_argument("--by-participant", action="store_true", dest="by_participant")
        p.set_defaults(func=func)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings(args)
        settings.threads()  # validated even though compute is single-threaded
        return args.func(args, settings)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 2
    except DatkitError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("i/o failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
