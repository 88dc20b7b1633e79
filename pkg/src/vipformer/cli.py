"""Command-line entry point: ``vipformer <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
format error, 3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import selftest
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, PairedDataset, generate_synthetic
from .errors import ContractError, DataError, FormatError, NumericError, ParameterError, ShapeError
from .evaluate import extract_embeddings, fewshot_runs, write_embeddings
from .model import ViPFormer, calibrate_batchnorm, count_parameters
from .rng import RngStream
from .runconfig import RunConfig, load_config_file, parse_value
from .train import Pretrainer, compare_strategies, dump_json, finetune, format_comparison, model_from_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, data=True, ckpt=False):
    p.add_argument("--config", help="key=value config file or shipped preset name (tableI, tableII)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mode", choices=["imc", "cmc", "both"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--strict-deterministic", action="store_true",
                   help="single-threaded BLAS and tokenization so every logged value is reproducible")
    p.add_argument("--out-dir")
    if data:
        p.add_argument("--data", help="dataset root holding manifest.json")
    if ckpt:
        p.add_argument("--from-checkpoint")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vipformer", description="Shared image/point-cloud Transformer toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    _common(sub.add_parser("gen-data", help="write the procedural paired corpus"), data=False)
    p = _common(sub.add_parser("pretrain", help="contrastive pretraining"), ckpt=True)
    p.add_argument("--resume", action="store_true", help="continue the run stored in --from-checkpoint")
    p = _common(sub.add_parser("finetune", help="supervised classification finetuning"), ckpt=True)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--compare", action="store_true", help="also train from scratch and emit a comparison table")
    _common(sub.add_parser("fewshot", help="N-way K-shot linear probing"), ckpt=True)
    p = _common(sub.add_parser("embed", help="export frozen embeddings as TSV"), ckpt=True)
    p.add_argument("--split")
    p.add_argument("--output")
    _common(sub.add_parser("params", help="print the parameter count of a configuration"), data=False)
    sub.add_parser("selftest", help="run the built-in oracle and gradient checks")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ParameterError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.update({key.strip(): parse_value(key.strip(), value)})
    flags = {"seed": "seed", "epochs": "epochs", "batch_size": "batch_size", "mode": "mode",
             "alpha": "alpha", "tau": "tau", "workers": "workers"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg.update({key: v})
    if getattr(args, "data", None):
        cfg.update({"data_root": args.data})
    if getattr(args, "freeze_encoder", False):
        cfg.update({"freeze_encoder": True})
    if getattr(args, "strict_deterministic", False):
        cfg.update({"workers": 1})
    return cfg.validate()


def _out_dir(args, cfg: RunConfig) -> Path:
    if not args.out_dir:
        raise ParameterError("--out-dir is required for this command")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    return out


def _manifest(cfg: RunConfig):
    if not cfg["data_root"]:
        raise ParameterError("no dataset given (use --data or data_root = ...)")
    return DatasetManifest.load(cfg["data_root"])


def _dataset(cfg, manifest, split, sample_size, images=False):
    return PairedDataset(manifest, split, sample_size, RngStream(cfg["seed"]).substream("data", split),
                         image_size=cfg["image_height"] if images else None, load_images=images)


def cmd_gen_data(args, cfg, out):
    root = _out_dir(args, cfg)
    m = generate_synthetic(root, cfg["class_count"], cfg["per_class"], cfg["n_points"], cfg["image_height"],
                           cfg["views"], rng=cfg["seed"])
    out.write(f"wrote {len(m.entries)} samples in {m.num_classes} classes to {root}\n")


def cmd_params(args, cfg, out):
    out.write(f"{count_parameters(cfg.model())}\n")


def cmd_pretrain(args, cfg, out):
    root = _out_dir(args, cfg)
    m = _manifest(cfg)
    train = _dataset(cfg, m, "train", cfg["sample_size"], images=cfg.contrast().uses_cmc)
    probe = (_dataset(cfg, m, cfg["probe_fit_split"], cfg["sample_size"]),
             _dataset(cfg, m, cfg["probe_eval_split"], cfg["sample_size"]))

    def log(rec):
        out.write("\t".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()) + "\n")
        out.flush()

    if args.resume:
        if not args.from_checkpoint:
            raise ParameterError("--resume needs --from-checkpoint")
        trainer = Pretrainer.resume(load_checkpoint(args.from_checkpoint), train, probe, root,
                                    epochs=cfg["epochs"], max_steps=cfg["max_steps"], workers=cfg["workers"])
    else:
        trainer = Pretrainer(cfg.model(), cfg.contrast(), cfg.train(), train, probe, cfg.augment(), root)
    trainer.run(log)
    out.write(f"best probe accuracy {trainer.best['acc']} at epoch {trainer.best['epoch']}; "
              f"checkpoints in {root}\n")


def cmd_finetune(args, cfg, out):
    root = _out_dir(args, cfg)
    m = _manifest(cfg)
    train = _dataset(cfg, m, "train", cfg["eval_sample_size"])
    val = _dataset(cfg, m, cfg["eval_split"], cfg["eval_sample_size"])
    source = load_checkpoint(args.from_checkpoint) if args.from_checkpoint else None
    model_cfg = cfg.model()
    if args.compare:
        if source is None:
            raise ParameterError("--compare needs --from-checkpoint for the pretrained side")
        rows = compare_strategies(source, train, val, cfg.train(), model_cfg, cfg["freeze_encoder"],
                                  log=lambda name, r: out.write(f"{name}\t{json.dumps(r)}\n"))
        table = format_comparison(rows)
        (root / "comparison.tsv").write_text(table)
        dump_json(root / "comparison.json", rows)
        out.write(table)
        return
    res = finetune(source, train, val, cfg.train(), model_cfg, freeze_encoder=cfg["freeze_encoder"],
                   augment=cfg.augment(), log=lambda r: out.write(json.dumps(r) + "\n"))
    save_checkpoint(res.checkpoint, root / "finetuned.ckpt")
    dump_json(root / "finetune.json", {"best_oa": res.best_oa, "best_epoch": res.best_epoch,
                                       "history": res.history})
    out.write(f"best validation OA {res.best_oa:.4f} at epoch {res.best_epoch}\n")


def _embedding_model(args, cfg, manifest):
    if args.from_checkpoint:
        return model_from_checkpoint(args.from_checkpoint, best=True)
    model = ViPFormer(cfg.model(), cfg["seed"])
    calib = _dataset(cfg, manifest, "train", cfg["eval_sample_size"])
    calibrate_batchnorm(model, [calib.points[:cfg["batch_size"]]])
    return model


def cmd_fewshot(args, cfg, out):
    m = _manifest(cfg)
    ds = _dataset(cfg, m, cfg["eval_split"], cfg["eval_sample_size"])
    model = _embedding_model(args, cfg, m)
    feats, labels = extract_embeddings(model, ds, cfg["embed_feature"], cfg["eval_seed"], workers=cfg["workers"])
    spec = cfg.fewshot()
    accs = fewshot_runs(feats, labels, spec, RngStream(cfg["seed"]).substream("fewshot"),
                        l2=cfg["probe_l2"], loss=cfg["probe_loss"])
    line = (f"{spec.n_way}-way {spec.k_shot}-shot over {spec.runs} runs: "
            f"mean {accs.mean():.4f} std {accs.std():.4f}\n")
    out.write(line)
    if args.out_dir:
        root = _out_dir(args, cfg)
        dump_json(root / "fewshot.json", {"mean": float(accs.mean()), "std": float(accs.std()),
                                          "runs": accs.tolist()})


def cmd_embed(args, cfg, out):
    m = _manifest(cfg)
    split = args.split or cfg["eval_split"]
    ds = _dataset(cfg, m, split, cfg["eval_sample_size"])
    model = _embedding_model(args, cfg, m)
    feats, labels = extract_embeddings(model, ds, cfg["embed_feature"], cfg["eval_seed"], workers=cfg["workers"])
    if args.output:
        target = Path(args.output)
    else:
        target = _out_dir(args, cfg) / f"embeddings_{split}.tsv"
    write_embeddings(target, feats, labels, ds.sample_ids)
    out.write(f"wrote {feats.shape[0]} x {feats.shape[1]} embeddings to {target}\n")


COMMANDS = {"gen-data": cmd_gen_data, "params": cmd_params, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "fewshot": cmd_fewshot, "embed": cmd_embed}


def main(argv=None, out=None, err=None) -> int:
    out = out if out is not None else sys.stdout
    err = err if err is not None else sys.stderr
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        if args.command == "selftest":
            return EXIT_OK if selftest.run(out) else EXIT_NUMERIC
        cfg = resolve_config(args)
        guard = contextlib.nullcontext()
        if args.strict_deterministic:
            guard = threadpool_limits(1)
        with guard:
            COMMANDS[args.command](args, cfg, out)
        return EXIT_OK
    except UsageError as exc:
        err.write(f"{exc}\n\n{parser.format_usage()}")
        return EXIT_USAGE
    except ParameterError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        err.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except (DataError, FormatError, ShapeError, ContractError, FileNotFoundError) as exc:
        err.write(f"data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
