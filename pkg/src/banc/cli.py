"""Command-line entry point: ``banc <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bitstream, datasynth, dsp, gradsuite, metrics, train
from .model import ConfigError, ModelConfig, build_model, decode_audio, encode_audio

logger = logging.getLogger("banc")

PROFILES = ("reference", "desk")
CONFIG_KEYS = {"profile", "model", "plan"}


class CliError(RuntimeError):
    pass


@dataclass
class CliConfig:
    """Effective settings: file contents, then flags, then ``--set key=value`` overrides."""

    subcommand: str
    config_path: str | None = None
    profile: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    plan: train.TrainPlan = field(default_factory=train.TrainPlan.desk)
    overrides: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_args(cls, args) -> "CliConfig":
        spec = {}
        if args.config:
            try:
                spec = json.loads(Path(args.config).read_text())
            except json.JSONDecodeError as exc:
                raise CliError(f"{args.config}: not valid JSON ({exc})") from exc
            if not isinstance(spec, dict):
                raise CliError(f"{args.config}: expected a JSON object")
            unknown = set(spec) - CONFIG_KEYS
            if unknown:
                raise CliError(f"{args.config}: unknown keys {sorted(unknown)}; allowed {sorted(CONFIG_KEYS)}")
        profile = args.profile or spec.get("profile", "desk")
        if profile not in PROFILES:
            raise CliError(f"unknown profile {profile!r}; choose from {list(PROFILES)}")
        model = ModelConfig.profile(profile)
        if spec.get("model"):
            model = ModelConfig.from_dict({**model.to_dict(), **spec["model"]})
        plan = train.TrainPlan.reference() if profile == "reference" else train.TrainPlan.desk()
        if spec.get("plan"):
            plan = train.TrainPlan.from_dict({**plan.to_dict(), **spec["plan"]})
        if args.speakers is not None:
            model = model.with_overrides({"speakers": str(args.speakers)})
        if args.seed is not None:
            model = model.with_overrides({"seed": str(args.seed)})
            plan = train.TrainPlan.from_dict({**plan.to_dict(), "seed": args.seed})
        overrides = _parse_pairs(args.set or [])
        model_keys = {f.name for f in fields(ModelConfig)}
        plan_keys = {f.name for f in fields(train.TrainPlan)}
        unknown = set(overrides) - model_keys - plan_keys
        if unknown:
            raise CliError(f"unknown config keys {sorted(unknown)}")
        model = model.with_overrides({k: v for k, v in overrides.items() if k in model_keys})
        plan_over = {k: _json_value(v) for k, v in overrides.items() if k in plan_keys and k not in model_keys}
        plan = train.TrainPlan.from_dict({**plan.to_dict(), **plan_over})
        cfg = cls(args.command, args.config, profile, model.validate(), plan.validate(), overrides)
        return cfg

    @property
    def seed(self) -> int:
        return self.plan.seed

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "config": self.config_path, "profile": self.profile,
                "model": self.model.to_dict(), "plan": self.plan.to_dict(), "overrides": self.overrides}


def _json_value(raw: str):
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        return raw
    return tuple(val) if isinstance(val, list) else val


def _parse_pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"override {item!r} is not key=value")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# model loading
# ---------------------------------------------------------------------------
def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        latest = train.latest_checkpoint(p)
        if latest is None:
            raise CliError(f"{p}: no latest.json manifest")
        return latest[2]
    if not p.exists():
        raise CliError(f"{p}: checkpoint not found")
    return p


def _load_model(cfg: CliConfig, checkpoint: str | None):
    """Model from ``checkpoint`` (its stored config wins) or freshly initialized from the seed."""
    if checkpoint is None:
        logger.warning("no checkpoint given; using untrained weights from seed %d", cfg.model.seed)
        return build_model(cfg.model, np.float32).eval()
    path = _resolve_checkpoint(checkpoint)
    stored = path.parent / "config.json"
    config = ModelConfig.load(stored) if stored.exists() else cfg.model
    model = build_model(config, np.float32)
    train.load_model_weights(model, path)
    logger.info("loaded %s", path)
    return model.eval()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_synth(cfg: CliConfig, args) -> int:
    manifest = datasynth.build_dataset(cfg.profile, args.out, speakers=cfg.model.speakers, seed=cfg.seed,
                                       clean_source=args.clean_source, n_items=args.items)
    counts = ", ".join(f"{k} {v}" for k, v in manifest.counts.items())
    print(f"wrote {len(manifest.items)} items ({counts}) to {args.out}")
    return 0


def _training_items(cfg: CliConfig, args):
    if args.data:
        items = datasynth.load_dataset(args.data, split="train")
        speakers = items[0].speakers
        if speakers != cfg.model.speakers:
            raise CliError(f"{args.data} has {speakers} speakers; pass --speakers {speakers}")
        return items
    return datasynth.make_dataset(cfg.profile, args.items or 20, speakers=cfg.model.speakers, seed=cfg.seed)


def cmd_train(cfg: CliConfig, args) -> int:
    items = _training_items(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cli_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def report(state, r):
        if r.step % max(1, args.log_every) == 0:
            logger.info("stage %d step %d metric %.4f disc %.4f", state.stage, r.step, r.metric_total, r.disc)

    if args.stage in ("1", "both"):
        model = build_model(cfg.model, np.dtype(cfg.plan.dtype))
        st = train.run_stage1(model, items, cfg.plan, out_dir=out, resume=args.resume, callback=report)
        print(f"stage 1: {st.step} steps, final metric {st.history[-1].metric_total:.4f}")
    if args.stage in ("2", "both"):
        model = build_model(cfg.model, np.dtype(cfg.plan.dtype))
        st = train.run_stage2(model, items, cfg.plan, out_dir=out, resume=args.resume, callback=report)
        print(f"stage 2: {st.step} steps, final disc {st.history[-1].disc:.4f}")
    print(f"checkpoint {train.latest_checkpoint(out)[2]}")
    return 0


def cmd_encode(cfg: CliConfig, args) -> int:
    buf = dsp.wav_read(args.input)
    model = _load_model(cfg, args.checkpoint)
    if buf.sample_rate != model.config.sample_rate:
        raise CliError(f"{args.input}: {buf.sample_rate} Hz input, model runs at {model.config.sample_rate} Hz")
    if buf.samples.shape[0] != 2:
        raise CliError(f"{args.input}: binaural input needs 2 channels, got {buf.samples.shape[0]}")
    header, chunks = encode_audio(model, buf.samples)
    bitstream.write_stream(args.out, chunks, header)
    print(f"{args.out}: {header.num_chunks} chunk(s), {bitstream.bandwidth(header):g} bps")
    return 0


def cmd_decode(cfg: CliConfig, args) -> int:
    header, chunks = bitstream.read_stream(args.input)
    model = _load_model(cfg, args.checkpoint)
    dec = decode_audio(model, header, chunks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sr = header.sample_rate
    dsp.wav_write(out / "mix.wav", dsp.AudioBuffer(dec.binaural, sr))
    written = ["mix.wav"]
    for i in range(header.speakers):
        dsp.wav_write(out / f"clean_{i + 1}.wav", dsp.AudioBuffer(dec.cleans[i], sr))
        written.append(f"clean_{i + 1}.wav")
        for c in range(dec.birs.shape[0]):
            name = f"bir_{i + 1}.wav" if c == 0 else f"bir_{i + 1}_chunk{c + 1}.wav"
            dsp.wav_write(out / name, dsp.AudioBuffer(dec.birs[c, i], sr))
            written.append(name)
    print(f"{out}: {' '.join(written)}")
    return 0


def cmd_eval(cfg: CliConfig, args) -> int:
    items = datasynth.load_dataset(args.data, split=args.split)
    model = _load_model(cfg, args.checkpoint)
    sr = model.config.sample_rate
    evals = []
    for it in items:
        header, chunks = encode_audio(model, it.mix.samples)
        header, chunks = bitstream.unpack(bitstream.pack(chunks, header))
        dec = decode_audio(model, header, chunks)
        bir_rec = [dsp.Bir.from_array(dec.birs[0, i], sr) for i in range(header.speakers)]
        evals.append(metrics.EvalItem(it.item_id, it.mix, dsp.AudioBuffer(dec.binaural, sr), it.birs, bir_rec))
    report = metrics.eval_report(evals)
    text = report.to_json() if args.format == "json" else report.to_csv()
    if args.out:
        Path(args.out).write_text(text if text.endswith("\n") else text + "\n")
        print(f"wrote {len(evals)} rows to {args.out}")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


def cmd_info(cfg: CliConfig, args) -> int:
    header = bitstream.StreamHeader.from_bytes(Path(args.input).read_bytes())
    print(bitstream.describe(header))
    rep = bitstream.compression_report(header)
    print(f"comparator     {rep['comparator_bps']:g} bps (savings {100 * rep['savings_vs_comparator']:.1f}%)")
    return 0


def cmd_gradcheck(cfg: CliConfig, args) -> int:
    speakers = (1, 2) if args.both_speakers else (cfg.model.speakers,)
    results = gradsuite.run_suite(seeds=args.seeds, speakers=speakers, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode,
            "eval": cmd_eval, "info": cmd_info, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from clobbering ones given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with optional 'profile', 'model' and 'plan' objects")
    common.add_argument("--seed", type=int, help="seed for models, training and data synthesis")
    common.add_argument("--profile", choices=PROFILES, help="configuration profile (default desk)")
    common.add_argument("--speakers", type=int, choices=(1, 2), help="number of speakers M_S")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a model or plan field")

    parser = argparse.ArgumentParser(prog="banc", description="Binaural neural audio codec toolkit.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("-o", "--out", required=True, help="dataset directory")
    p.add_argument("--items", type=int, help="total item count (default from profile)")
    p.add_argument("--clean-source", help="directory of clean WAV files to use instead of synthetic speech")

    p = sub.add_parser("train", parents=[common], help="run training stages 1 and 2")
    p.add_argument("-o", "--out", required=True, help="checkpoint directory")
    p.add_argument("--data", help="dataset directory written by 'banc synth' (default: in-memory synthetic set)")
    p.add_argument("--items", type=int, help="in-memory item count when --data is absent (default 20)")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--resume", action="store_true", help="continue from the stage's saved checkpoint")
    p.add_argument("--log-every", type=int, default=25)

    p = sub.add_parser("encode", parents=[common], help="encode a binaural WAV to a .banc stream")
    p.add_argument("input", help="two-channel WAV at the model sample rate")
    p.add_argument("-o", "--out", required=True, help="output .banc file")
    p.add_argument("--checkpoint", help="checkpoint file or training directory")

    p = sub.add_parser("decode", parents=[common], help="decode a .banc stream to WAV files")
    p.add_argument("input", help=".banc file")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="checkpoint file or training directory")

    p = sub.add_parser("eval", parents=[common], help="spatial and acoustic error report on a dataset")
    p.add_argument("--data", required=True, help="dataset directory written by 'banc synth'")
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", help="checkpoint file or training directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-o", "--out", help="report file (default stdout)")

    p = sub.add_parser("info", parents=[common], help="print a .banc header and its bandwidth")
    p.add_argument("input", help=".banc file")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=1, help="random draws per op")
    p.add_argument("--both-speakers", action="store_true", help="check the full graph for M_S = 1 and 2")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("BANC_LOG", "INFO").upper()
    value = logging.getLevelName(level) if not level.isdigit() else int(level)
    if not isinstance(value, int):
        raise CliError(f"BANC_LOG={level!r} is not a logging level")
    root = logging.getLogger("banc")
    root.handlers[:] = [logging.StreamHandler(sys.stderr)]
    root.handlers[0].setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.setLevel(value)
    root.propagate = False


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        for key in ("config", "seed", "profile", "speakers", "set"):
            if not hasattr(args, key):
                setattr(args, key, None)
        cfg = CliConfig.from_args(args)
        logger.info("effective config %s", json.dumps(cfg.to_dict(), sort_keys=True))
        return COMMANDS[args.command](cfg, args)
    except (CliError, ConfigError, train.TrainError, bitstream.BitstreamError, ValueError, OSError,
            FloatingPointError) as exc:
        print(f"banc {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
