"""Command-line entry point.

Exit codes: 0 on success, 2 when inputs or configuration fail validation,
3 when training aborts on a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .data import EmotionTaxonomy, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigurationError, KavanError, NumericAbort
from .heatmap import build_supervision, write_pgm
from .model import KavanParams, ModelConfig

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
PARAMS_FORMAT = 1


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _run_config(args) -> harness.RunConfig:
    cfg = harness.RunConfig.load(args.config) if getattr(args, "config", None) else harness.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "data", None):
        cfg = replace(cfg, data=args.data)
    cfg.check_paths()
    return cfg


def _taxonomy(cfg: harness.RunConfig) -> EmotionTaxonomy:
    return EmotionTaxonomy.load(cfg.taxonomy)


def _dataset(cfg: harness.RunConfig):
    if cfg.data is None:
        raise ConfigurationError("no dataset given (use --data or the 'data' config key)")
    samples = load_dataset(cfg.data)
    if not samples:
        raise ConfigurationError(f"dataset {cfg.data} is empty")
    return samples


def save_params(path, params: KavanParams, cfg: harness.RunConfig) -> None:
    payload = {"format": PARAMS_FORMAT, "config": cfg.to_dict(), "params": params.to_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload))


def load_params(path) -> tuple[KavanParams, harness.RunConfig]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read parameters {path}: {exc}") from None
    if payload.get("format") != PARAMS_FORMAT:
        raise ConfigurationError(f"unsupported parameter file format {payload.get('format')!r}")
    cfg = harness.RunConfig.from_dict(payload["config"])
    params = KavanParams.init(cfg.model, cfg.seed)
    params.load_dict(payload["params"])
    return params, cfg


def _pick_sample(samples, key: str | None):
    if key is None:
        return samples[0]
    for s in samples:
        if s.id == key:
            return s
    if key.isdigit() and int(key) < len(samples):
        return samples[int(key)]
    raise ConfigurationError(f"no sample with id or index {key!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = SyntheticConfig(seed=args.seed or 0)
    samples = generate_synthetic(args.n, cfg)
    out = args.out or "synthetic.jsonl"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    samples = _dataset(cfg)
    taxonomy = _taxonomy(cfg)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if args.splits:
        report = harness.cross_validate(cfg, samples, taxonomy, n_splits=args.splits)
    else:
        params, report = harness.train(cfg, samples, taxonomy)
        save_params(out / "params.json", params, cfg)
    _emit(report, str(out / "report.json"))
    _emit({"runtime_seconds": time.perf_counter() - start, "config": cfg.to_dict()}, str(out / "run.json"))
    print(json.dumps(report["average"], sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = load_params(args.params)
    cfg = replace(cfg, data=args.data or cfg.data)
    cfg.check_paths()
    report = harness.evaluate(params, _dataset(cfg), _taxonomy(cfg), cfg)
    _emit(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model = ModelConfig.from_dict(json.loads(args.model)) if args.model else harness.TINY_MODEL
    report = harness.gradcheck(harness.RunConfig(model=model, seed=args.seed or 0))
    _emit(report.to_dict(), args.out)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_heatmap(args) -> int:
    cfg = _run_config(args)
    sample = _pick_sample(_dataset(cfg), args.sample)
    maps = build_supervision(sample.keypoints, cfg.heatmap)
    payload = {"id": sample.id, "frames": [h.grid.tolist() for h in maps]}
    out = Path(args.out or "heatmaps")
    out.mkdir(parents=True, exist_ok=True)
    _emit(payload, str(out / f"{sample.id}_heatmaps.json"))
    if args.pgm:
        for t, h in enumerate(maps):
            write_pgm(out / f"{sample.id}_t{t:02d}.pgm", h.grid)
    return EXIT_OK


def cmd_dump_masks(args) -> int:
    params, cfg = load_params(args.params)
    cfg = replace(cfg, data=args.data or cfg.data)
    cfg.check_paths()
    sample = _pick_sample(_dataset(cfg), args.sample)
    written = harness.dump_masks(params, cfg, sample, args.out or "masks", _taxonomy(cfg))
    print(f"wrote {len(written)} files to {args.out or 'masks'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kavan", description="Keypoint-attended video emotion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, data=True):
        if config:
            p.add_argument("--config", help="run configuration JSON")
        if data:
            p.add_argument("--data", help="dataset in JSON-lines format")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=200)
    common(p, config=False, data=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and report metrics")
    p.add_argument("--splits", type=int, default=0, help="run k seeded 80/20 splits instead")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    p.add_argument("--params", required=True)
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    p.add_argument("--model", help="model config as inline JSON (defaults to the tiny model)")
    common(p, config=False, data=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="export supervision heatmaps for one sample")
    p.add_argument("--sample", help="sample id or index")
    p.add_argument("--pgm", action="store_true", help="also write PGM images")
    common(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("dump-masks", help="export predicted masks beside heatmaps")
    p.add_argument("--params", required=True)
    p.add_argument("--sample", help="sample id or index")
    common(p, config=False)
    p.set_defaults(func=cmd_dump_masks)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KavanError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
