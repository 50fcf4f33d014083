"""``lpanet`` command line: gen, train, eval, ablate, inspect.

Every command resolves a :class:`~lpanet.config.RunConfig` from defaults, an
optional ``--config`` file and per-key flags, then echoes it (``config.txt`` in
the output directory, and standard error). Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import format_config, keys, load_config, parse_value, resolve
from .errors import (ConfigError, FormatError, GenerationError, LPANetError, UsageError,
                     ValidationError)
from .esm import mean_offsets
from .pipeline import (DOWNSAMPLE, NonFiniteLoss, ablate, evaluate, forward, format_summary,
                       init_state, load_checkpoint, save_checkpoint, train_stage)
from .semantics import load_embeddings
from .synth import load_dataset, read_sample, write_dataset
from .tenio import save_tensor
from .tensor import no_grad

log = logging.getLogger("lpanet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value file; flags override it")
    group = parser.add_argument_group("config keys")
    for key in keys():
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        group.add_argument(*flags, dest=f"cfg_{key}", metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lpanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="print metrics of a checkpoint as JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", help="also write the JSON to this file")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="train and evaluate the four variants")
    p.add_argument("--data", required=True,
                   help="dataset; the last `holdout` samples are held out for evaluation")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("inspect", help="dump response maps, offsets and consistency data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="one sample directory")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    return parser


def resolve_args(args: argparse.Namespace):
    file_values = load_config(args.config) if args.config else {}
    overrides = {}
    for key in keys():
        raw = getattr(args, f"cfg_{key}")
        if raw is not None:
            overrides[key] = parse_value(key, raw)
    return resolve(file_values, overrides)


def echo_config(cfg, out_dir=None) -> None:
    text = format_config(cfg)
    sys.stderr.write(text)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(text)


def _embeddings(cfg):
    return load_embeddings(cfg.embeddings) if cfg.embeddings else None


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{what} {path} does not exist")
    return path


# -- commands ----------------------------------------------------------------
def cmd_gen(args, cfg) -> int:
    echo_config(cfg, args.out)
    rows = write_dataset(cfg.scene(), cfg.count, args.out)
    log.info("wrote %d samples to %s", len(rows), args.out)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    if args.stage == 2 and not args.init:
        raise UsageError("train --stage 2 requires --init")
    samples = load_dataset(_require_dir(args.data, "dataset"))
    if args.init:
        state = load_checkpoint(_require_dir(args.init, "checkpoint"))
        state.train = cfg.train()
    else:
        state = init_state(cfg.model(), cfg.train(), _embeddings(cfg))
    echo_config(cfg, args.out)
    out = Path(args.out)
    train_stage(args.stage, samples, state, cfg.epochs, log_path=out / "loss_log.jsonl")
    save_checkpoint(state, out)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    state = load_checkpoint(_require_dir(args.ckpt, "checkpoint"))
    samples = load_dataset(_require_dir(args.data, "dataset"))
    echo_config(cfg)
    text = evaluate(state, samples).to_json()
    print(text)
    if args.json:
        Path(args.json).write_text(text + "\n")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    samples = load_dataset(_require_dir(args.data, "dataset"))
    if not 0 < cfg.holdout < len(samples):
        raise ConfigError(f"holdout {cfg.holdout} must be between 1 and {len(samples) - 1} "
                          f"for a dataset of {len(samples)}")
    train, held = samples[:-cfg.holdout], samples[-cfg.holdout:]
    echo_config(cfg, args.out)
    out = Path(args.out)
    results = ablate(train, held, cfg.train(), cfg.model_kwargs(), _embeddings(cfg), out)
    for name, metrics in results:
        (out / f"metrics_{name.replace('+', 'plus_')}.json").write_text(metrics.to_json() + "\n")
    summary = format_summary(results)
    (out / "summary.tsv").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; ``image`` in [0, 1]."""
    pixels = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def cmd_inspect(args, cfg) -> int:
    state = load_checkpoint(_require_dir(args.ckpt, "checkpoint"))
    sample = read_sample(_require_dir(args.sample, "sample"))
    echo_config(cfg, args.out)
    out = Path(args.out)
    model_cfg = state.model.cfg
    with no_grad():
        _, result = forward(state.model, sample, state.embeddings.matrix, state.stage,
                            state.train, want_offsets=True)
    written = []
    for modality in ("rgb", "ir"):
        maps = result.get(f"maps_{modality}")
        if maps is None:
            continue
        for c in range(model_cfg.n_categories):
            name = f"response_{modality}_{c}.pgm"
            write_pgm(out / name, maps.response.data[c])
            written.append(name)
    if result.get("offsets") is not None:
        mean = mean_offsets(result["offsets"])
        save_tensor(out / "offset_dy.ten", mean[0])
        save_tensor(out / "offset_dx.ten", mean[1])
        written += ["offset_dy.ten", "offset_dx.ten"]
    vectors = result.get("consistency")
    if vectors is not None:
        h, w = (d // DOWNSAMPLE for d in result["logits"].shape[1:])
        save_tensor(out / "best_index.ten", vectors.best_index.reshape(h, w).astype(np.float64))
        save_tensor(out / "v_ir_to_rgb.ten", vectors.v_ir_to_rgb.data.reshape(h, w))
        save_tensor(out / "v_rgb_to_ir.ten", vectors.v_rgb_to_ir.data.reshape(h, w))
        written += ["best_index.ten", "v_ir_to_rgb.ten", "v_rgb_to_ir.ten"]
    for name in written:
        print(out / name)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "inspect": cmd_inspect}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"lpanet: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_args(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, ValidationError, FormatError) as exc:
        sys.stderr.write(f"lpanet: error: {exc}\n")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        sys.stderr.write(f"lpanet: error: no such file: {exc.filename}\n")
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        sys.stderr.write(f"lpanet: {exc}\n")
        return EXIT_RUNTIME
    except (GenerationError, LPANetError, OSError, ArithmeticError) as exc:
        sys.stderr.write(f"lpanet: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
