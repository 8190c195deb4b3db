"""Command-line entry point: ``saco <subcommand>``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from . import __version__
from .core import EOS_ID, DatasetItem, Vocabulary
from .data import SyntheticSpec, dataset_items, generate_synthetic, load_dataset, load_manifest
from .metrics import score_all
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .report import read_report, render_figures, write_report, write_retrieval_table
from .retrieval import SamplerConfig, build_cache, rank_candidates
from .training import TrainConfig, evaluate, finetune, fit, generate_captions, item_id

log = logging.getLogger("saco")

MODEL_KEYS = ("d", "d_h", "enc_layers", "enc_heads", "dec_layers", "dec_heads", "decoder_uses_style_token",
              "dropout")
PATH_KEYS = ("data", "eval_data")


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    model = asdict(ModelConfig(vocab_size=5, n_styles=1))
    return {
        **asdict(TrainConfig()),
        **asdict(SamplerConfig()),
        **{k: model[k] for k in MODEL_KEYS},
        "data": None,
        "eval_data": None,
        "out": "runs/default",
        "min_freq": 1,
    }


def resolve_config(path: str | None, overrides: dict) -> dict:
    """Defaults < config file < command-line flags; unknown keys and missing paths are rejected."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys in {p}: {', '.join(unknown)}")
        base = p.parent
        for key in PATH_KEYS + ("out",):
            if loaded.get(key) is not None and not Path(loaded[key]).is_absolute():
                loaded[key] = str(base / loaded[key])
        cfg.update(loaded)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    for key in PATH_KEYS:
        if cfg[key] is not None and not Path(cfg[key]).exists():
            raise ConfigError(f"{key} path does not exist: {cfg[key]}")
    return cfg


def split_config(cfg: dict):
    try:
        train = TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})
        sampler = SamplerConfig(**{f.name: cfg[f.name] for f in fields(SamplerConfig)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return train, sampler, {k: cfg[k] for k in MODEL_KEYS}


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for key, value in default_config().items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            group.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = type(value) if value is not None else str
            group.add_argument(flag, dest=key, type=kind, default=None)


def _overrides(args: argparse.Namespace) -> dict:
    keys = default_config()
    return {k: getattr(args, k) for k in keys if hasattr(args, k)}


def _setup_run(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    torch.manual_seed(cfg["seed"])
    torch.use_deterministic_algorithms(True)
    return out


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _ckpt_meta(vocab: Vocabulary, styles, cfg: dict) -> dict:
    return {"vocab": vocab.id_to_token, "styles": list(styles), "seed": cfg["seed"]}


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    return model, Vocabulary(meta["vocab"]), meta


def cmd_synth_data(args) -> int:
    spec = SyntheticSpec(n_items=args.n, n_styles=args.styles, m=args.m, d_raw=args.d_raw,
                         vocab_size=args.vocab_size, seed=args.seed, noise=args.noise)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.items)} items to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    if cfg["data"] is None:
        raise ConfigError("no training data: set 'data' in the config or pass --data")
    train_cfg, sampler, dims = split_config(cfg)
    out = _setup_run(cfg)
    manifest, vocab, items = load_dataset(cfg["data"], min_freq=cfg["min_freq"])
    eval_items = None
    if cfg["eval_data"]:
        eval_items = dataset_items(load_manifest(cfg["eval_data"]), vocab)
    first = manifest.items[0]
    model = build_model(ModelConfig(vocab_size=len(vocab), n_styles=len(manifest.styles), n_regions=first.m,
                                    d_raw=first.d_raw, seed=cfg["seed"], **dims))
    rows = fit(model, items, vocab, train_cfg, sampler, len(manifest.styles), eval_items, dump_dir=out)
    ckpt = out / "checkpoint.safetensors"
    save_checkpoint(model, ckpt, _ckpt_meta(vocab, manifest.styles, cfg))
    write_report(rows, out)
    render_figures(rows, out)
    print(json.dumps({"checkpoint": str(ckpt), "sha256": sha256(ckpt), "final": rows[-1]}, default=str))
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    if cfg["data"] is None:
        raise ConfigError("no training data: set 'data' in the config or pass --data")
    train_cfg, sampler, _ = split_config(cfg)
    model, vocab, meta = _load_ckpt(args.init)
    out = _setup_run(cfg)
    manifest, _, items = load_dataset(cfg["data"], vocab=vocab)
    eval_items = dataset_items(load_manifest(cfg["eval_data"]), vocab) if cfg["eval_data"] else None
    rows = finetune(model, items, vocab, train_cfg, sampler, len(manifest.styles), eval_items, dump_dir=out)
    ckpt = out / "finetuned.safetensors"
    save_checkpoint(model, ckpt, {k: v for k, v in meta.items() if k != "model"})
    write_report(rows, out, stem="finetune_report")
    render_figures(rows, out)
    print(json.dumps({"checkpoint": str(ckpt), "sha256": sha256(ckpt), "final": rows[-1]}, default=str))
    return 0


def cmd_eval(args) -> int:
    model, vocab, _ = _load_ckpt(args.ckpt)
    if not Path(args.data).is_file():
        raise ConfigError(f"manifest not found: {args.data}")
    items = dataset_items(load_manifest(args.data), vocab)
    metrics, captions = evaluate(model, items, vocab, args.beam)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "captions.json").write_text(json.dumps(captions, indent=1, sort_keys=True) + "\n")
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    model, vocab, meta = _load_ckpt(args.ckpt)
    manifest = load_manifest(args.data)
    try:
        entry = manifest.item(args.image_id)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    style = int(args.style) if str(args.style).isdigit() else meta["styles"].index(args.style)
    if not 0 <= style < len(meta["styles"]):
        raise ConfigError(f"style {args.style} out of range")
    item = DatasetItem(entry.image_id, manifest.features(entry), entry.objects, style, [EOS_ID])
    caption = generate_captions(model, [item], vocab, args.beam)[item.key]
    print(caption)
    return 0


def cmd_score(args) -> int:
    for p in (args.candidates, args.references):
        if not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")
    cands = json.loads(Path(args.candidates).read_text())
    refs = json.loads(Path(args.references).read_text())
    try:
        metrics = score_all(cands, refs)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_retrieve_debug(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    _, sampler, _ = split_config(cfg)
    model, vocab, meta = _load_ckpt(args.ckpt)
    data = args.data or cfg["data"]
    if data is None or not Path(data).is_file():
        raise ConfigError(f"manifest not found: {data}")
    manifest, _, items = load_dataset(data, vocab=vocab)
    anchors = [it for it in items if it.image_id == args.anchor
               and (args.anchor_style is None or it.style_id == args.anchor_style)]
    if not anchors:
        raise ConfigError(f"no item with image id {args.anchor!r}")
    cache = build_cache(model, items, len(manifest.styles))
    ranked = rank_candidates(anchors[0], items, cache, sampler, args.epoch)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            write_retrieval_table(ranked, fh)
    else:
        write_retrieval_table(ranked, sys.stdout)
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    rows = []
    for stem in ("report", "finetune_report"):
        if (run / f"{stem}.jsonl").is_file():
            rows.extend(read_report(run / f"{stem}.jsonl"))
    if not rows:
        raise ConfigError(f"no report files under {run}")
    for path in render_figures(rows, run):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saco", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic style-conditioned dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--styles", type=int, default=3)
    p.add_argument("--m", type=int, default=9)
    p.add_argument("--d-raw", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="joint-loss training stage")
    p.add_argument("--config")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="self-critical CIDEr fine-tuning stage")
    p.add_argument("--config")
    p.add_argument("--init", required=True, help="checkpoint from the training stage")
    _add_overrides(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="beam-search captions and score them")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="caption one image in one style")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--style", required=True, help="style index or name")
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="BLEU/ROUGE-L/CIDEr-D for a caption file")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("retrieve-debug", help="dump the ranked retrieval table for one anchor")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--anchor", required=True, help="anchor image id")
    p.add_argument("--anchor-style", type=int)
    p.add_argument("--csv", help="write the table here instead of stdout")
    _add_overrides(p)
    p.set_defaults(func=cmd_retrieve_debug)

    p = sub.add_parser("report", help="re-render figures from a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
