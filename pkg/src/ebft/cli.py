"""Command-line front end: pretrain / prune / finetune / eval / compare / sweep.

Configuration comes from an optional flat key=value file (JSON works too),
overridden by CLI flags; EBFT_SEED in the environment overrides the file
seed (an explicit --seed flag wins over both). All artifacts land under
--out-dir with stable names.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import baselines, pruning
from .checkpoint import load_model, save_checkpoint
from .data import (CalibrationSet, calibration_sweep, read_corpus,
                   sample_calibration, split_eval)
from .errors import ConfigError, DataError, EbftError, NumericError
from .finetune import (FineTuneConfig, block_reconstruction_errors,
                       finetune_model)
from .model import ModelConfig, init_model, perplexity
from .pruning import NM, Channel, Unstructured, prune_model
from .train import PretrainConfig, pretrain


@dataclass
class RunConfig:
    # model
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    mlp_gated: bool = False
    # pretraining
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 3
    pretrain_batch_size: int = 16
    # data
    corpus: str = ""
    eval_fraction: float = 0.1
    calib_samples: int = 64
    calib_seq_len: int = 128
    eval_seq_len: int = 128
    # pruning
    criterion: str = "magnitude"     # magnitude | activation
    pattern: str = "unstructured"    # unstructured | nm | channel
    sparsity: float = 0.5
    nm_n: int = 2
    nm_m: int = 4
    # fine-tuning
    strategy: str = "ebft"           # ebft | lsq | mask
    lr: float = 2e-4
    epochs: int = 10
    batch_size: int = 8
    rel_tol: float = 1e-4
    patience: int = 2
    optimizer: str = "adam"
    teacher_propagation: str = "dense"
    train_norms: bool = False
    # misc
    seed: int = 0
    out_dir: str = "out"

    def validate(self) -> "RunConfig":
        checks = [
            (self.vocab_size >= 1, "vocab_size must be >= 1"),
            (self.d_model >= 1, "d_model must be >= 1"),
            (self.n_layers >= 0, "n_layers must be >= 0"),
            (self.n_heads >= 1 and self.d_model % self.n_heads == 0,
             "n_heads must divide d_model"),
            (self.max_seq_len >= 2, "max_seq_len must be >= 2"),
            (self.pretrain_lr > 0 and self.lr > 0, "learning rates must be positive"),
            (self.pretrain_epochs >= 1 and self.epochs >= 1, "epochs must be >= 1"),
            (self.pretrain_batch_size >= 1 and self.batch_size >= 1,
             "batch sizes must be >= 1"),
            (0 < self.eval_fraction < 1, "eval_fraction must be in (0, 1)"),
            (self.calib_samples >= 1, "calib_samples must be >= 1"),
            (self.calib_seq_len >= 2 and self.eval_seq_len >= 2,
             "sequence lengths must be >= 2"),
            (self.criterion in ("magnitude", "activation"),
             f"unknown criterion {self.criterion!r}"),
            (self.pattern in ("unstructured", "nm", "channel"),
             f"unknown pattern {self.pattern!r}"),
            (0 <= self.sparsity < 1, "sparsity must be in [0, 1)"),
            (0 < self.nm_n < self.nm_m, "need 0 < nm_n < nm_m"),
            (self.strategy in ("ebft", "lsq", "mask"),
             f"unknown strategy {self.strategy!r}"),
            (self.rel_tol >= 0, "rel_tol must be >= 0"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.optimizer in ("adam", "sgd"), f"unknown optimizer {self.optimizer!r}"),
            (self.teacher_propagation in ("dense", "self"),
             "teacher_propagation must be dense or self"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value) -> object:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    ftype = _FIELD_TYPES[key]
    if isinstance(value, str):
        value = value.strip()
        if ftype == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"config key {key!r}: expected a boolean, got {value!r}")
        try:
            if ftype == "int":
                return int(value)
            if ftype == "float":
                return float(value)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {ftype}")
        return value
    if ftype == "bool" and isinstance(value, bool):
        return value
    if ftype == "int" and isinstance(value, int) and not isinstance(value, bool):
        return value
    if ftype == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if ftype == "str" and isinstance(value, str):
        return value
    raise ConfigError(f"config key {key!r}: bad value {value!r}")


def parse_config_file(path: str) -> dict:
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: invalid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path}: JSON must be an object")
        return raw
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config file {path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Precedence: defaults < config file < EBFT_SEED < CLI flags."""
    merged: dict = {}
    if config_path:
        for key, value in parse_config_file(config_path).items():
            merged[key] = _coerce(key, value)
    env_seed = os.environ.get("EBFT_SEED")
    if env_seed is not None:
        merged["seed"] = _coerce("seed", env_seed)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = _coerce(key, value)
    return RunConfig(**merged).validate()


def _pattern(cfg: RunConfig):
    if cfg.pattern == "unstructured":
        return Unstructured(cfg.sparsity)
    if cfg.pattern == "nm":
        return NM(cfg.nm_n, cfg.nm_m)
    return Channel(cfg.sparsity)


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(vocab_size=cfg.vocab_size, d_model=cfg.d_model,
                       n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                       max_seq_len=cfg.max_seq_len, mlp_gated=cfg.mlp_gated)


def _finetune_config(cfg: RunConfig) -> FineTuneConfig:
    return FineTuneConfig(lr=cfg.lr, max_epochs=cfg.epochs,
                          batch_size=cfg.batch_size,
                          convergence_rel_tol=cfg.rel_tol,
                          convergence_patience=cfg.patience,
                          optimizer=cfg.optimizer, seed=cfg.seed,
                          teacher_propagation=cfg.teacher_propagation,
                          train_norms=cfg.train_norms)


def _load_corpus_splits(cfg: RunConfig):
    if not cfg.corpus:
        raise ConfigError("no corpus path configured (set corpus=... or --corpus)")
    corpus = read_corpus(cfg.corpus)
    return split_eval(corpus, cfg.eval_fraction)


def _calibration(cfg: RunConfig, train_corpus) -> CalibrationSet:
    return sample_calibration(train_corpus, cfg.calib_samples,
                              cfg.calib_seq_len, cfg.seed)


def _out(cfg: RunConfig, name: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name

def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _print_table(rows: list[tuple], header: tuple) -> None:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for row in [header, *rows]:
        print("  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)))


def cmd_pretrain(cfg: RunConfig) -> int:
    train_corpus, eval_corpus = _load_corpus_splits(cfg)
    model = init_model(_model_config(cfg), seed=cfg.seed)
    report = pretrain(model, train_corpus,
                      PretrainConfig(lr=cfg.pretrain_lr, epochs=cfg.pretrain_epochs,
                                     batch_size=cfg.pretrain_batch_size,
                                     seq_len=cfg.calib_seq_len, seed=cfg.seed))
    ppl = perplexity(model, eval_corpus.ids, cfg.eval_seq_len)
    save_checkpoint(model, None, _out(cfg, "model.ckpt"))
    _write_json(_out(cfg, "pretrain.json"),
                {"epoch_losses": report.epoch_losses, "eval_perplexity": ppl,
                 "seconds": report.seconds, "seed": cfg.seed})
    print(f"pretrained {cfg.n_layers}-block model: eval perplexity {ppl:.4f} "
          f"-> {_out(cfg, 'model.ckpt')}")
    return 0


def cmd_prune(cfg: RunConfig, checkpoint: str) -> int:
    model, _ = load_model(checkpoint)
    calib = None
    if cfg.criterion == "activation":
        train_corpus, _ = _load_corpus_splits(cfg)
        calib = _calibration(cfg, train_corpus)
    pruned, masks, report = prune_model(model, cfg.criterion, _pattern(cfg), calib)
    save_checkpoint(pruned, masks, _out(cfg, "pruned.ckpt"))
    print(f"pruned with {cfg.criterion} / {_pattern(cfg)}:")
    _print_table([(name, f"{s:.4f}") for name, s in sorted(report.items())],
                 ("layer", "sparsity"))
    return 0


def cmd_finetune(cfg: RunConfig, dense_path: str, pruned_path: str) -> int:
    dense, _ = load_model(dense_path)
    sparse, mask_bits = load_model(pruned_path)
    if dense.cfg != sparse.cfg:
        raise ConfigError(
            f"checkpoint hyperparameters differ: {dense.cfg} vs {sparse.cfg}")
    pattern = _pattern(cfg)
    masks = {name: pruning.SparsityMask(pattern, bits, name)
             for name, bits in mask_bits.items()}
    if not masks:
        raise ConfigError(f"{pruned_path} carries no masks; run prune first")
    train_corpus, eval_corpus = _load_corpus_splits(cfg)
    calib = _calibration(cfg, train_corpus)
    ft_cfg = _finetune_config(cfg)

    if cfg.strategy == "ebft":
        tuned, report = finetune_model(dense, sparse, masks, calib, ft_cfg)
        payload = report.to_json_dict()
    elif cfg.strategy == "lsq":
        tuned, stats = baselines.lsq_finetune_model(dense, sparse, masks, calib,
                                                    batch_size=cfg.batch_size)
        payload = {"strategy": "lsq",
                   "layers": {k: vars(v) for k, v in stats.items()}}
    else:
        tuned, tuned_masks, reports = baselines.mask_tune_model(dense, masks,
                                                                calib, ft_cfg)
        masks = tuned_masks
        payload = {"strategy": "mask",
                   "blocks": [{"loss": r.losses, "epochs": r.epochs_run,
                               "converged": r.converged, "seconds": r.seconds}
                              for r in reports]}
    ppl = perplexity(tuned, eval_corpus.ids, cfg.eval_seq_len)
    payload["eval_perplexity"] = ppl
    save_checkpoint(tuned, masks, _out(cfg, "finetuned.ckpt"))
    _write_json(_out(cfg, "report.json"), payload)
    print(f"{cfg.strategy} fine-tune done: eval perplexity {ppl:.4f} "
          f"-> {_out(cfg, 'finetuned.ckpt')}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, dense_path: str | None) -> int:
    model, _ = load_model(checkpoint)
    dense = load_model(dense_path)[0] if dense_path else model
    train_corpus, eval_corpus = _load_corpus_splits(cfg)
    calib = _calibration(cfg, train_corpus)
    ppl = perplexity(model, eval_corpus.ids, cfg.eval_seq_len)
    errors = block_reconstruction_errors(dense, model, calib,
                                         batch_size=cfg.batch_size)
    payload = {"perplexity": ppl, "block_errors": errors,
               "checkpoint": checkpoint, "seed": cfg.seed}
    print(json.dumps(payload, indent=2, sort_keys=True))
    _print_table([(i, f"{e:.6g}") for i, e in enumerate(errors)],
                 ("block", "reconstruction_error"))
    return 0


def cmd_compare(cfg: RunConfig, dense_path: str, pruned_path: str) -> int:
    dense, _ = load_model(dense_path)
    sparse, mask_bits = load_model(pruned_path)
    pattern = _pattern(cfg)
    masks = {name: pruning.SparsityMask(pattern, bits, name)
             for name, bits in mask_bits.items()}
    if not masks:
        raise ConfigError(f"{pruned_path} carries no masks; run prune first")
    train_corpus, eval_corpus = _load_corpus_splits(cfg)
    calib = _calibration(cfg, train_corpus)
    report = baselines.compare_strategies(dense, sparse, masks, calib,
                                          eval_corpus.ids, _finetune_config(cfg),
                                          eval_seq_len=cfg.eval_seq_len)
    _write_json(_out(cfg, "compare.json"), report.to_json_dict())
    _print_table([(r.name, f"{r.perplexity:.4f}",
                   " ".join(f"{e:.3g}" for e in r.per_block_loss))
                  for r in report.rows],
                 ("strategy", "perplexity", "per_block_loss"))
    return 0


def cmd_sweep(cfg: RunConfig, dense_path: str, sizes: list[int]) -> int:
    dense, _ = load_model(dense_path)
    train_corpus, eval_corpus = _load_corpus_splits(cfg)
    pattern = _pattern(cfg)
    ft_cfg = _finetune_config(cfg)

    def run(calib: CalibrationSet) -> float:
        pruned, masks, _ = prune_model(dense, cfg.criterion, pattern,
                                       calib if cfg.criterion == "activation" else None)
        tuned, _ = finetune_model(dense, pruned, masks, calib, ft_cfg)
        return perplexity(tuned, eval_corpus.ids, cfg.eval_seq_len)

    rows = calibration_sweep(train_corpus, sizes, run, cfg.calib_seq_len, cfg.seed)
    path = _out(cfg, "sweep.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["size", "perplexity", "seed"])
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps({"sweep": rows}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebft",
                                     description="prune and fine-tune toy transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value or JSON config file")
        p.add_argument("--corpus", help="path to a byte/UTF-8 text corpus")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", help="train the dense toy teacher")
    common(p)
    p.add_argument("--epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--lr", dest="pretrain_lr", type=float)

    p = sub.add_parser("prune", help="build masks and zero pruned weights")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--criterion", choices=["magnitude", "activation"])
    p.add_argument("--pattern", choices=["unstructured", "nm", "channel"])
    p.add_argument("--sparsity", type=float)
    p.add_argument("--nm", help="N:M pattern, e.g. 2:4")

    p = sub.add_parser("finetune", help="recover a pruned checkpoint")
    common(p)
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--strategy", choices=["ebft", "lsq", "mask"])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pattern", choices=["unstructured", "nm", "channel"])
    p.add_argument("--sparsity", type=float)
    p.add_argument("--nm", help="N:M pattern, e.g. 2:4")

    p = sub.add_parser("eval", help="perplexity and per-block errors")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dense", help="dense reference for block errors")

    p = sub.add_parser("compare", help="run all four strategies")
    common(p)
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--pattern", choices=["unstructured", "nm", "channel"])
    p.add_argument("--sparsity", type=float)
    p.add_argument("--nm", help="N:M pattern, e.g. 2:4")

    p = sub.add_parser("sweep", help="calibration-size sweep")
    common(p)
    p.add_argument("--dense", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated, ascending")
    p.add_argument("--criterion", choices=["magnitude", "activation"])
    p.add_argument("--sparsity", type=float)
    return parser


_OVERRIDE_KEYS = ("corpus", "out_dir", "seed", "criterion", "pattern",
                  "sparsity", "strategy", "lr", "epochs",
                  "pretrain_epochs", "pretrain_lr")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    out = {}
    for key in _OVERRIDE_KEYS:
        if hasattr(args, key) and getattr(args, key) is not None:
            out[key] = getattr(args, key)
    nm = getattr(args, "nm", None)
    if nm is not None:
        try:
            n, m = (int(v) for v in nm.split(":"))
        except ValueError:
            raise ConfigError(f"--nm expects N:M, got {nm!r}")
        out.update(nm_n=n, nm_m=m, pattern="nm")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, _overrides_from_args(args))
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "prune":
            return cmd_prune(cfg, args.checkpoint)
        if args.command == "finetune":
            return cmd_finetune(cfg, args.dense, args.pruned)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.dense)
        if args.command == "compare":
            return cmd_compare(cfg, args.dense, args.pruned)
        if args.command == "sweep":
            sizes = [int(s) for s in args.sizes.split(",") if s]
            return cmd_sweep(cfg, args.dense, sizes)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4
    except EbftError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
