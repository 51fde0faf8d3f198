"""Command-line entry point: ``vaerul <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, harness, synthetic
from .data import DataError, ProcessedDataset, drop_labels, load_subset
from .metrics import CSV_COLUMNS, evaluate
from .ndcore import RngState
from .optim import NonFiniteError, TrainConfig
from .reliability import (Ensemble, VaeEmbedding, ensemble_predict, load_rul, save_rul, self_learning,
                          train_ensemble, train_on_embedding, train_supervised)
from .vae import load_vae, save_vae, train_vae

log = logging.getLogger("vaerul")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fractions(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file; flags override its values")
    common.add_argument("--seed", type=_u64, help="master seed")
    common.add_argument("--data", type=Path, help="directory with the raw text files, or a preprocessed .npz bundle")
    common.add_argument("--subset", help="file suffix of the raw files, e.g. FD001")
    common.add_argument("--out", type=Path, help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="vaerul", description="Semi-supervised RUL estimation with a recurrent VAE.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    sub.add_parser("preprocess", parents=[common], help="parse, normalize and window a subset into an .npz bundle")
    sub.add_parser("train-vae", parents=[common], help="train the VAE on all training windows")

    tr = sub.add_parser("train-rul", parents=[common], help="train a RUL ensemble for one method and label fraction")
    tr.add_argument("--method", choices=harness.METHODS, default="SL")
    tr.add_argument("--fraction", type=float, default=1.0)
    tr.add_argument("--ensemble", type=int)
    tr.add_argument("--vae", type=Path, help="trained VAE checkpoint (VAE-SSL); trained on the fly if omitted")

    ev = sub.add_parser("evaluate", parents=[common], help="score a trained model against the test set")
    ev.add_argument("--model", type=Path, required=True, help="ensemble manifest (.json) or RUL checkpoint")
    ev.add_argument("--predictions", type=Path, help="also write engine_id,true_rul,predicted_rul CSV here")

    ex = sub.add_parser("experiment", parents=[common], help="full label-fraction sweep with reports")
    ex.add_argument("--fractions", type=_fractions)
    ex.add_argument("--reps", type=int)
    ex.add_argument("--ensemble", type=int)
    ex.add_argument("--shared-vae", action="store_true", default=None)

    sy = sub.add_parser("synth", parents=[common], help="write a synthetic fleet in the raw text format")
    sy.add_argument("--train-engines", type=int, default=100)
    sy.add_argument("--test-engines", type=int, default=100)
    sy.add_argument("--modes", type=int, default=1)
    return p


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.data is not None:
        over["data_dir"] = str(args.data)
    if args.subset is not None:
        over["subset"] = args.subset
    for flag, name in (("fractions", "fractions"), ("reps", "repetitions"), ("ensemble", "ensemble_size"),
                       ("shared_vae", "shared_vae")):
        if getattr(args, flag, None) is not None:
            over[name] = getattr(args, flag)
    if args.command == "experiment" and args.out is not None:
        over["out_dir"] = str(args.out)
    return replace(cfg, **over) if over else cfg


def _dataset(cfg: harness.ExperimentConfig) -> ProcessedDataset:
    path = Path(cfg.data_dir)
    if path.is_file():
        return ProcessedDataset.load(path)
    return load_subset(path, cfg.subset, cfg.data)


def _seeded(train: TrainConfig, seed: int) -> TrainConfig:
    return replace(train, seed=seed)


def _out(args, default: str) -> Path:
    return args.out if args.out is not None else Path(default)


def cmd_preprocess(args, cfg) -> int:
    ds = load_subset(cfg.data_dir, cfg.subset, cfg.data)
    out = _out(args, f"{cfg.subset}.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    s = ds.summary
    print(f"wrote {out}")
    print(f"train engines {s['n_train_engines']}, cycles {s['n_train_cycles']}, windows {s['n_train_windows']}")
    print(f"test engines {s['n_test_engines']}, cycles {s['n_test_cycles']}")
    print(f"operating modes {s['n_modes']}")
    print(f"kept sensors ({s['n_kept_sensors']}): {' '.join(s['kept_sensors'])}")
    print(f"content hash {ds.content_hash()}")
    return EXIT_OK


def cmd_train_vae(args, cfg) -> int:
    ds = _dataset(cfg)
    out = _out(args, "vae.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    vcfg = replace(cfg.vae, train=_seeded(cfg.vae.train, cfg.master_seed))
    model, result = train_vae(ds.X, ds.engine, vcfg)
    save_vae(model, out, vcfg, sensor_mask=ds.sensor_mask.tolist(), dataset_hash=ds.content_hash(),
             seed=cfg.master_seed, best_epoch=result.best_epoch, best_val=result.best_val)
    result.write_csv(out.with_suffix(".history.csv"))
    print(f"wrote {out} (best epoch {result.best_epoch}, validation loss {result.best_val:.6g})")
    return EXIT_OK


def cmd_train_rul(args, cfg) -> int:
    ds = _dataset(cfg)
    out = _out(args, "rul")
    out.mkdir(parents=True, exist_ok=True)
    size = args.ensemble or cfg.ensemble_size
    engines = ds.engines
    labeled = engines[drop_labels(engines, args.fraction, RngState(harness.mask_seed(cfg.master_seed, args.fraction, 0)))]
    sel = np.isin(ds.engine, labeled)
    X_l, y_l, e_l = ds.X[sel], ds.y[sel], ds.engine[sel]
    base = harness.member_seed(cfg.master_seed, args.fraction, 0)
    manifest = {"method": args.method, "fraction": args.fraction, "labeled_engines": labeled.tolist(),
                "dataset_hash": ds.content_hash(), "members": [], "vae": None, "embed_layer": None}

    if args.method == "SL":
        one = lambda s: train_supervised(X_l, y_l, e_l, cfg.rul, s)[0]  # noqa: E731
    elif args.method == "Self-SSL":
        unl = (ds.X[~sel], ds.engine[~sel])
        one = lambda s: self_learning((X_l, y_l, e_l), unl, cfg.rul, s)[0]  # noqa: E731
    else:
        if args.vae is not None:
            vae_model, _ = load_vae(args.vae)
            vae_path = args.vae.resolve()
        else:
            vcfg = replace(cfg.vae, train=_seeded(cfg.vae.train, harness.vae_seed(cfg.master_seed, args.fraction, 0)))
            vae_model, _ = train_vae(ds.X, ds.engine, vcfg)
            vae_path = out / "vae.ckpt"
            save_vae(vae_model, vae_path, vcfg, sensor_mask=ds.sensor_mask.tolist(), dataset_hash=ds.content_hash())
        k = cfg.vae.embed_layer
        manifest["vae"] = str(vae_path)
        manifest["embed_layer"] = k
        one = lambda s: train_on_embedding(vae_model, k, X_l, y_l, e_l, cfg.rul, s)[0]  # noqa: E731

    ens = train_ensemble(one, size, base)
    for i, m in enumerate(ens.members):
        name = f"member{i}.ckpt"
        save_rul(m, out / name, seed=base + i)
        manifest["members"].append(name)
    (out / "ensemble.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ens.members)} members and {out / 'ensemble.json'}")
    return EXIT_OK


def load_ensemble(path: Path) -> Ensemble:
    """An ensemble manifest written by train-rul, or a single RUL checkpoint."""
    if path.is_dir():
        path = path / "ensemble.json"
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix != ".json":
        model, _ = load_rul(path)
        return Ensemble([model])
    manifest = json.loads(path.read_text())
    members = [load_rul(path.parent / name)[0] for name in manifest["members"]]
    if manifest.get("vae"):
        vae_model, _ = load_vae(manifest["vae"])
        emb = VaeEmbedding(vae_model, manifest["embed_layer"])
        for m in members:
            m.embedding = emb
    return Ensemble(members)


def cmd_evaluate(args, cfg) -> int:
    ds = _dataset(cfg)
    ens = load_ensemble(args.model)
    pred = ensemble_predict(ens, ds.test_X)
    rep = evaluate(pred, ds.test_y)
    print(",".join(CSV_COLUMNS))
    print(rep.csv_row())
    if args.predictions is not None:
        harness.write_predictions(args.predictions, ds.test_engine, ds.test_y, pred)
    return EXIT_OK


def cmd_experiment(args, cfg) -> int:
    ds = _dataset(cfg)
    report = harness.run_experiment(cfg, ds)
    files = harness.emit_report(report, cfg.out_dir)
    (Path(cfg.out_dir) / "config.ini").write_text(harness.dump_config(cfg))
    failed = sum(r.error is not None for r in report.runs)
    print(f"wrote {len(files)} files to {cfg.out_dir}" + (f"; {failed} cells failed" if failed else ""))
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    out = _out(args, "data/synthetic")
    files = synthetic.write_fleet(out, cfg.subset if args.subset else "SYN001", n_train=args.train_engines,
                                  n_test=args.test_engines, seed=cfg.master_seed, n_modes=args.modes)
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess, "train-vae": cmd_train_vae, "train-rul": cmd_train_rul,
    "evaluate": cmd_evaluate, "experiment": cmd_experiment, "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
