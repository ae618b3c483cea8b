"""``draec`` command line: simulate | process | evaluate | experiment.

Exit codes: 0 ok, 1 usage error, 2 runtime failure.  Failures print one
line to stderr of the form ``draec: error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import AlgorithmVariant, ConfigError, load_config
from .metrics import append_csv, evaluate, shadow_components
from .pipelines import PipelineOutput, process_signals
from .runner import WORKERS_ENV, ExperimentSpec, load_trace, run_experiment, save_trace, simulate
from .scene import load_scene
from .stft import synthesize
from .wavio import read_wav, write_wav

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _sirs(text: str) -> tuple:
    return tuple(None if v.strip().lower() == "none" else float(v) for v in text.split(","))


def _variants(text: str) -> tuple:
    if text == "all":
        return tuple(str(v) for v in AlgorithmVariant.all())
    return tuple(str(AlgorithmVariant.parse(v.strip())) for v in text.split(","))


def _grid_args(p):
    p.add_argument("--rt60", type=_floats, default=(0.3,), help="comma list of T60s in s (0 = echo path only)")
    p.add_argument("--ser", type=_floats, default=(-10.0,), help="comma list of SERs in dB")
    p.add_argument("--sir", type=_sirs, default=(0.0,), help="comma list of SIRs in dB, 'none' = no interferer")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="draec", description="Joint echo cancellation and dereverberation.")
    p.add_argument("--version", action="version", version=f"draec {__version__}")
    p.add_argument("--config", type=Path, help="flat JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write synthetic scene directories")
    _grid_args(s)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--path-change", action="store_true", help="concatenate two rooms (echo path change)")
    s.add_argument("--echo-only", action="store_true", help="no near-end or interferer")

    pr = sub.add_parser("process", help="run one or more variants on a scene or WAV pair")
    pr.add_argument("--scene", type=Path, help="scene directory")
    pr.add_argument("--mic", type=Path, help="multichannel microphone WAV")
    pr.add_argument("--playback", type=Path, help="mono playback WAV")
    pr.add_argument("--variant", type=_variants, default=None, help="comma list or 'all'")
    pr.add_argument("--trace", choices=("none", "sparse", "full"), default="none",
                    help="save filter weights: every pipeline.trace_stride frames or every frame")
    pr.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("evaluate", help="score processed outputs against scene stems")
    e.add_argument("--scene", type=Path, required=True)
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--processed", type=Path, help="output directory of 'process'")
    g.add_argument("--estimate", type=Path, help="any WAV to score as the enhanced signal")
    g.add_argument("--unprocessed", action="store_true", help="score the mixture itself")
    e.add_argument("--out", type=Path, required=True)

    x = sub.add_parser("experiment", help="grid sweep with aggregated tables")
    _grid_args(x)
    x.add_argument("--variants", type=_variants, default=_variants("all"))
    x.add_argument("--tracking", action="store_true", help="also run the echo path change curve")
    x.add_argument("--workers", type=int, default=None, help=f"process pool size (default ${WORKERS_ENV} or 1)")
    x.add_argument("--out", type=Path, required=True)
    return p


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _spec(args, cfg) -> ExperimentSpec:
    return ExperimentSpec(rt60=args.rt60, ser_db=args.ser, sir_db=args.sir,
                          variants=getattr(args, "variants", ("kalman-joint",)),
                          trials=args.trials, seed=args.seed, base=cfg.scene,
                          tracking=getattr(args, "tracking", False))


def cmd_simulate(args, cfg) -> None:
    manifest = simulate(_spec(args, cfg), cfg, args.out, args.path_change, args.echo_only)
    print(manifest)


def _inputs(args, cfg) -> tuple[np.ndarray, np.ndarray]:
    rate = cfg.stft.sample_rate
    if args.scene is not None:
        if args.mic or args.playback:
            raise UsageError("give either --scene or --mic/--playback")
        scene = load_scene(args.scene)
        return scene.mics, scene.playback[None, :]
    if not (args.mic and args.playback):
        raise UsageError("need --scene or both --mic and --playback")
    mics, _ = read_wav(args.mic, expected_rate=rate)
    playback, spec = read_wav(args.playback, expected_rate=rate)
    if spec.channels != 1:
        raise ValueError(f"playback has {spec.channels} channels, expected 1")
    n = min(mics.shape[1], playback.shape[1])
    return mics[:, :n], playback[:, :n]


def cmd_process(args, cfg) -> None:
    mics, playback = _inputs(args, cfg)
    if mics.shape[0] != cfg.filter.n_mics:
        raise ValueError(f"input has {mics.shape[0]} mics but filter.n_mics is {cfg.filter.n_mics}")
    stride = {"none": 0, "sparse": cfg.pipeline.trace_stride, "full": 1}[args.trace]
    rate = cfg.stft.sample_rate
    for v in args.variant or (str(cfg.pipeline.variant),):
        d = args.out / v
        d.mkdir(parents=True, exist_ok=True)
        enhanced, out = process_signals(mics, playback, cfg, v, stride)
        write_wav(d / "enhanced.wav", enhanced, rate)
        if out.intermediate is not None:
            x = synthesize(out.intermediate)
            full = np.zeros_like(enhanced)
            full[:, :x.shape[1]] = x
            write_wav(d / "intermediate.wav", full, rate)
        if stride:
            save_trace(d / "trace.npz", out)
        (d / "run.json").write_text(json.dumps(
            {"variant": v, "trace_stride": stride, "config": cfg.to_flat()}, indent=2) + "\n")
        print(d)


def _report_name(scene_dir: Path, variant: str) -> str:
    return f"{scene_dir.name}__{variant}"


def cmd_evaluate(args, cfg) -> None:
    scene = load_scene(args.scene)
    args.out.mkdir(parents=True, exist_ok=True)
    rate = cfg.stft.sample_rate
    reports = []
    if args.unprocessed:
        comps = {k: scene.stems[k] for k in ("full_target_image", "echo_image", "interference_image", "noise")}
        reports.append(evaluate(scene, scene.mics, "unprocessed", cfg.stft, cfg.metrics, comps,
                                args.scene.name))
    elif args.estimate is not None:
        est, _ = read_wav(args.estimate, expected_rate=rate)
        reports.append(evaluate(scene, est, args.estimate.stem, cfg.stft, cfg.metrics,
                                scene_name=args.scene.name))
    else:
        dirs = sorted(p for p in args.processed.iterdir() if (p / "enhanced.wav").exists()) \
            if not (args.processed / "enhanced.wav").exists() else [args.processed]
        if not dirs:
            raise FileNotFoundError(f"no enhanced.wav under {args.processed}")
        for d in dirs:
            run = json.loads((d / "run.json").read_text()) if (d / "run.json").exists() else {}
            variant = run.get("variant", d.name)
            enhanced, _ = read_wav(d / "enhanced.wav", expected_rate=rate)
            comps = None
            if (d / "trace.npz").exists():
                stages = load_trace(d / "trace.npz")
                if all(st.trace_stride == 1 for st in stages if len(st.taps)):
                    comps = shadow_components(scene, PipelineOutput(None, None, stages),
                                              cfg.stft, cfg.filter)
            reports.append(evaluate(scene, enhanced, variant, cfg.stft, cfg.metrics, comps,
                                    args.scene.name))
    for r in reports:
        (args.out / f"{_report_name(args.scene, r.variant)}.json").write_text(r.to_json() + "\n")
    append_csv(args.out / "metrics.csv", reports)
    print(args.out / "metrics.csv")


def cmd_experiment(args, cfg) -> None:
    summary = run_experiment(_spec(args, cfg), cfg, args.out, args.workers)
    print(json.dumps(summary))


COMMANDS = {"simulate": cmd_simulate, "process": cmd_process,
            "evaluate": cmd_evaluate, "experiment": cmd_experiment}


def _fail(kind: str, exc) -> None:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"draec: error: {kind}: {msg}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, _overrides(args.set))
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        _fail("config", exc)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001  every runtime failure maps to exit 2
        _fail(type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
