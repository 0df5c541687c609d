"""Command-line entry point: synthesize, train, eval, embed.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import pickle
import sys
from fractions import Fraction
from pathlib import Path

from . import __version__
from .config import KEYS, RunConfig, describe_keys, train_with_config
from .data import (
    DESK_SIZE,
    IdentityImageRecord,
    load_image,
    make_fixture,
    manifest,
    normalize,
    parse_image_name,
    read_dataset,
    write_dataset,
    write_manifest,
    write_mlr_copy,
)
from .errors import ConfigError, DataError, DomainError, IncompatibleCheckpointError, NumericError
from .model import atomic_write_bytes, embed, load_checkpoint, save_checkpoint
from .resolution import quantize_resolution
from .retrieval import evaluate_mlr, export_embeddings, query_level
from .training import END_TO_END

log = logging.getLogger("crreid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_json(path: Path, data) -> None:
    atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# synthesize


def cmd_synthesize(args) -> int:
    out = Path(args.out)
    if args.fixture:
        records = make_fixture(args.identities, args.images_per_camera, args.cameras, args.size, args.seed)
    else:
        if not args.input:
            raise ConfigError("synthesize needs --fixture or --in DIR")
        records = read_dataset(args.input)
        records = [r for r in records if r.down_rate == 1]
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.rates:
            written = write_mlr_copy(records, out, args.rates)
        else:
            written = write_dataset(records, out)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    info = manifest(written)
    info["source"] = "fixture" if args.fixture else str(args.input)
    info["rates"] = list(args.rates or [])
    info["seed"] = args.seed
    write_manifest(out / "manifest.json", info)
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _collect_overrides(args) -> dict:
    overrides = {}
    for key in KEYS:
        value = getattr(args, key.name, None)
        if value is not None:
            overrides[key.name] = value
    if overrides.get("mode") == "end-to-end":
        overrides["mode"] = END_TO_END
    return overrides


def cmd_train(args) -> int:
    overrides = _collect_overrides(args)
    cfg = RunConfig.from_file(args.config, overrides) if args.config else RunConfig.build(None, overrides)
    records = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w") as log_file:
        result, dataset = train_with_config(cfg, records, log_file=log_file)
    save_checkpoint(out / "checkpoint.pt", result.model, result.metadata)
    _write_json(out / "stages.json", result.stage_log)
    atomic_write_bytes(out / "config.json", cfg.to_json().encode())
    _write_json(
        out / "manifest.json",
        {
            "artifacts": ["checkpoint.pt", "train_log.jsonl", "stages.json", "config.json"],
            "config": dict(cfg),
            "num_identities": dataset.num_classes,
            "num_images": len(dataset),
            "excluded_identities": dataset.excluded,
            "stages": len(result.stage_log),
        },
    )
    last = result.history[-1]
    print(f"trained {len(result.history)} steps in {len(result.stage_log)} stage(s); final total loss {last['total']:.4f}")
    print(f"checkpoint: {out / 'checkpoint.pt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (KeyError, TypeError, ValueError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise IncompatibleCheckpointError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    model, meta = _load(args.checkpoint)
    records = read_dataset(args.data)
    seen = set(model.known_ratios)
    if args.unseen_rate is not None:
        rates = [args.unseen_rate]
    else:
        rates = args.rates
        unseen = [r for r in rates if Fraction(1, r) not in seen]
        if unseen:
            trained = sorted(int(1 / r) for r in seen if r != 1)
            raise IncompatibleCheckpointError(
                f"checkpoint was trained on rates {trained}; rates {unseen} are unseen (use --unseen-rate to route them)"
            )
    report = evaluate_mlr(model, records, rates, trials=args.trials, seed=args.seed, ranks=args.ranks, normalize=args.normalize)
    report.config["checkpoint"] = str(args.checkpoint)
    report.config["model_mode"] = meta.get("mode")
    for r, a in report.assignments.items():
        if Fraction(1, int(r)) not in seen:
            print(f"unseen rate {r} -> trained rate {a['assigned_rate']} (level {a['level']})")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval_report.json")
    atomic_write_bytes(out, report.to_json().encode())
    print(report.summary())
    print(f"report: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# embed


def _read_image_list(path) -> list[tuple[str, int | None]]:
    items = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        items.append((parts[0], int(parts[1]) if len(parts) > 1 else None))
    return items


def cmd_embed(args) -> int:
    model, _ = _load(args.checkpoint)
    try:
        items = _read_image_list(args.images)
    except OSError as exc:
        raise DataError(f"cannot read image list {args.images}: {exc}") from exc
    h, _w = model.config.input_size
    rows, missing = [], []
    for path, rate in items:
        if not Path(path).is_file():
            missing.append(path)
            print(f"missing image: {path}", file=sys.stderr)
            continue
        parsed = parse_image_name(path)
        identity = parsed[0] if parsed else -1
        rec = IdentityImageRecord(max(identity, 0), parsed[1] if parsed else 0, Path(path).stem, path=path)
        native = load_image(rec)
        if rate is None and parsed and parsed[2] > 1:
            rate = parsed[2]
        if rate is not None:
            level = query_level(rate, model.known_ratios)
        else:
            # resolution estimated from the image height
            level = quantize_resolution(Fraction(min(native.shape[0], h), h), model.known_ratios)
        image = load_image(rec, model.config.input_size)
        rows.append((rec.image_id, identity, embed(normalize(image), level, model)))
    if not rows:
        print("no images could be embedded", file=sys.stderr)
        return EXIT_DATA
    export_embeddings(args.out, rows, model.layout)
    print(f"wrote {len(rows)} embeddings to {args.out}" + (f" ({len(missing)} missing)" if missing else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crreid", description="Resolution-adaptive cross-resolution re-identification toolkit.")
    parser.add_argument("--version", action="version", version=f"crreid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize", help="write the synthetic fixture or an MLR copy of a dataset")
    p.add_argument("--fixture", action="store_true", help="generate the procedural fixture")
    p.add_argument("--identities", type=int, default=10, help="fixture identities (default 10)")
    p.add_argument("--images-per-camera", type=int, default=4, help="fixture images per camera (default 4)")
    p.add_argument("--cameras", type=int, default=2, help="fixture cameras (default 2)")
    p.add_argument("--size", type=_int_list, default=list(DESK_SIZE), help="fixture H,W (default 64,32)")
    p.add_argument("--in", dest="input", help="HR dataset directory (<pid>_c<cam>... images)")
    p.add_argument("--rates", type=_int_list, default=None, help="also write down-sampled copies at these rates, e.g. 2,3,4")
    p.add_argument("--seed", type=int, default=0, help="fixture seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser(
        "train",
        help="train a model (progressive or end-to-end)",
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True, help="training images directory")
    p.add_argument("--out", required=True, help="run directory")
    for key in KEYS:
        flag = "--" + key.name.replace("_", "-")
        note = f" [published setup: {key.provenance}]" if key.provenance else ""
        help_text = f"{key.help} (default {json.dumps(key.default)}){note}"
        if key.name == "mode":
            p.add_argument(flag, choices=("progressive", "end-to-end", "end_to_end"), default=None, help=help_text)
        elif key.name == "ablate":
            p.add_argument(flag, action="append", choices=("no-mask", "no-val"), default=None, help=help_text)
        elif key.kind is list:
            p.add_argument(flag, dest=key.name, type=_int_list, default=None, help=help_text)
        else:
            p.add_argument(flag, dest=key.name, type=key.kind, default=None, help=help_text)
    p.add_argument("--lr", dest="base_lr", type=float, default=None, help="alias of --base-lr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MLR evaluation: CMC and mAP over random trials")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test images directory")
    p.add_argument("--trials", type=int, default=10, help="random query/gallery trials (default 10)")
    p.add_argument("--ranks", type=_int_list, default=[1, 5, 10, 20], help="CMC ranks to report (default 1,5,10,20)")
    p.add_argument("--rates", type=_int_list, default=[2, 3, 4], help="query down-sampling rates (default 2,3,4)")
    p.add_argument("--unseen-rate", type=int, default=None, help="query every image at this rate, routed to the nearest trained rate")
    p.add_argument("--seed", type=int, default=0, help="master seed for the trials (default 0)")
    p.add_argument("--normalize", action="store_true", help="L2-normalize embeddings before ranking")
    p.add_argument("--out", help="report path (default: eval_report.json next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export varying-length embeddings for a list of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="text file: one image path per line, optionally followed by the rate the image was down-sampled at")
    p.add_argument("--out", required=True, help="tab-separated export file")
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IncompatibleCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
