"""Batch command-line entry points.

Each command prints line-oriented ``key=value`` records on stdout. On
failure it prints a single line ``<category>: <message>`` on stderr and exits
non-zero (2 config, 3 data, 4 training, 1 anything else).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from lsgs import checkpoint
from lsgs.config import RunConfig, dump_config, load_config
from lsgs.datasets import ANOMALY_KINDS, load_dataset, save_dataset, synthesize_dataset, volume_to_slices
from lsgs.errors import ConfigError, DataError, LsgsError, TrainingError
from lsgs.metrics import evaluate
from lsgs.pipeline import aggregate, evaluate_split, fit_prior, fit_vqvae, run_ablation
from lsgs.scoring import load_score_map, save_score_map, score_image

EXIT_CODES = {ConfigError: 2, DataError: 3, TrainingError: 4}

# config fields that define the autoencoder's shape; a checkpoint must agree on them
_ARCH_FIELDS = ("resolution", "channels", "downsample", "hidden_channels", "n_res_blocks", "embed_dim")


def _out(line: str) -> None:
    print(line, flush=True)


def _config(args) -> RunConfig:
    overrides = {} if args.seed is None else {"seed": args.seed}
    return load_config(args.config, profile=args.profile, **overrides)


def _check_arch(config: RunConfig, stored: RunConfig, what: str) -> None:
    for name in _ARCH_FIELDS:
        if getattr(config, name) != getattr(stored, name):
            raise ConfigError(
                f"{what} was trained with {name}={getattr(stored, name)!r}, config has {getattr(config, name)!r}"
            )


def _train(config: RunConfig, data: str):
    return load_dataset(data, "train", config.resolution, config.channels)


def _test(config: RunConfig, data: str):
    return load_dataset(data, "test", config.resolution, config.channels)


def cmd_train_vqvae(args) -> int:
    config = _config(args)
    train = _train(config, args.data)
    model, _ = fit_vqvae(config, train, _out)
    h = checkpoint.save_vqvae(args.out, model, config, stage="train-vqvae")
    _out(f"stage=done checkpoint={args.out} model_hash={h} config_digest={config.digest()}")
    return 0


def cmd_aggregate(args) -> int:
    config = _config(args)
    model, stored, meta = checkpoint.load_vqvae(args.vqvae)
    _check_arch(config, stored, args.vqvae)
    train = _train(config, args.data)
    new, report = aggregate(config, model, train, _out)
    h = checkpoint.save_vqvae(args.out, new, config, stage="aggregate", parent_hash=meta["model_hash"],
                              aggregation=report.__dict__)
    _out(f"stage=done checkpoint={args.out} model_hash={h} k={report.k}")
    return 0


def cmd_train_prior(args) -> int:
    config = _config(args)
    vqvae, stored, meta = checkpoint.load_vqvae(args.vqvae)
    _check_arch(config, stored, args.vqvae)
    train = _train(config, args.data)
    prior, _ = fit_prior(config, vqvae, train, log_fn=_out)
    h = checkpoint.save_prior(args.out, prior, config, vqvae_hash=meta["model_hash"], stage="train-prior")
    _out(f"stage=done checkpoint={args.out} model_hash={h} vqvae_hash={meta['model_hash']}")
    return 0


def cmd_score(args) -> int:
    config = _config(args)
    vqvae, stored, vmeta = checkpoint.load_vqvae(args.vqvae)
    prior, _, pmeta = checkpoint.load_prior(args.prior)
    _check_arch(config, stored, args.vqvae)
    if pmeta["vqvae_hash"] != vmeta["model_hash"] and not args.allow_mismatch:
        raise ConfigError(
            f"prior {args.prior} was trained against vqvae {pmeta['vqvae_hash'][:12]}, "
            f"got {vmeta['model_hash'][:12]} (pass --allow-mismatch to force)"
        )
    test = _test(config, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = {"vqvae_hash": vmeta["model_hash"], "prior_hash": pmeta["model_hash"], "config_digest": config.digest()}
    written = skipped = 0
    for sample in test:
        if (out / f"{sample.id}.npy").exists() and not args.force:
            skipped += 1
            continue
        save_score_map(score_image(vqvae, prior, sample, config, prov), out, sample.id)
        written += 1
    _out(f"stage=score written={written} skipped={skipped} total={len(test)}")
    return 0


def cmd_evaluate(args) -> int:
    config = _config(args)
    test = _test(config, args.data)
    maps = [load_score_map(args.scores, s.id) for s in test]
    report = evaluate(maps, [s.mask_or_zeros() for s in test], ids=[s.id for s in test],
                      kinds=[s.kind for s in test], n_thresholds=config.dice_sweep, label=Path(args.scores).name)
    out = Path(args.out) if args.out else Path(args.scores)
    txt, js = report.write(out)
    _out(f"stage=evaluate ap={report.ap:.6f} auroc={report.auroc:.6f} dice={report.dice:.6f} report={txt}")
    return 0


def cmd_ablate(args) -> int:
    config = _config(args)
    train, test = _train(config, args.data), _test(config, args.data)
    result = run_ablation(config, train, test, log_fn=_out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(result.to_text())
    (out / "ablation.json").write_text(result.to_json())
    _out(f"stage=done table={out / 'ablation.txt'}")
    return 0


def cmd_synthesize(args) -> int:
    seed = 0 if args.seed is None else args.seed
    train, test = synthesize_dataset(seed, args.n_train, args.n_test, args.kinds)
    save_dataset(train, args.out)
    save_dataset(test, args.out)
    _out(f"stage=synthesize root={args.out} train={len(train)} test={len(test)}")
    return 0


def cmd_slice_volume(args) -> int:
    vol = np.load(args.volume)
    seg = np.load(args.segmentation) if args.segmentation else None
    size = tuple(args.size)
    n_train, n_test = volume_to_slices(vol, args.out, args.prefix, seg, size)
    _out(f"stage=slice train={n_train} test={n_test}")
    return 0


def cmd_write_config(args) -> int:
    dump_config(_config(args), args.out)
    _out(f"stage=config path={args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsgs", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="versioned key-value config file")
    common.add_argument("--profile", choices=("desk", "paper"), default=None)
    common.add_argument("--seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vqvae", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("aggregate", parents=[common])
    p.add_argument("--vqvae", required=True, help="input autoencoder checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train-prior", parents=[common])
    p.add_argument("--vqvae", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("score", parents=[common])
    p.add_argument("--vqvae", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="rewrite existing score maps")
    p.add_argument("--allow-mismatch", action="store_true", help="score with a prior trained on another autoencoder")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="report directory (defaults to the score directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synthesize", parents=[common])
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=60)
    p.add_argument("--kinds", nargs="*", default=list(ANOMALY_KINDS), choices=ANOMALY_KINDS)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("slice-volume", parents=[common])
    p.add_argument("--volume", required=True, help=".npy array of shape (H, W, D)")
    p.add_argument("--segmentation", default=None, help=".npy label volume of the same shape")
    p.add_argument("--prefix", required=True)
    p.add_argument("--size", type=int, nargs=2, default=(128, 128))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice_volume)

    p = sub.add_parser("write-config", parents=[common])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_write_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LsgsError as exc:
        print(f"{exc.category}: {exc}".replace("\n", " "), file=sys.stderr)
        return next((code for cls, code in EXIT_CODES.items() if isinstance(exc, cls)), 1)


if __name__ == "__main__":
    sys.exit(main())
