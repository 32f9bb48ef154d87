"""Command-line entry point: ``pivotmt <command> [flags]``.

Typical pipeline::

    pivotmt gen-data
    pivotmt pretrain
    pivotmt pretrain-captioner
    pivotmt train --emit-plots
    pivotmt evaluate
    pivotmt translate --src en --no-images < sentences.txt

All paths default to locations under the data root, which is
``$PIVOTMT_DATA_DIR`` or ``./pivotmt_data``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import checkpoint as ckpt_io
from . import experiments
from .config import TrainConfig
from .data import io as data_io
from .data.splits import STANDARD_OVERLAPS, corpus_image_ids, make_splits
from .data.vocab import Vocabulary
from .data.world import generate_world
from .errors import AccessViolation, ConfigError
from .captioning import greedy_caption
from .metrics import SelectionRecord, round_trip_score, save_json, select_best
from .model import PivotModel
from .objectives import ABLATIONS, AblationFlags
from .train import (Trainer, build_model, evaluate_bleu, prepare_finetune, pretrain_captioners, pretrain_mass,
                    retrieval_eval, workspace_from_dir)
from .transformer import TransformerConfig

log = logging.getLogger("pivotmt")

COMMANDS = ("gen-data", "pretrain", "pretrain-captioner", "train", "translate", "caption", "evaluate",
            "select-model", "ablate")


def data_root(args) -> Path:
    return Path(args.data_dir or os.environ.get("PIVOTMT_DATA_DIR") or "pivotmt_data")


def load_config(args) -> TrainConfig:
    """``--config``, else the data root's config.json (written by gen-data), else defaults."""
    saved = data_root(args) / "config.json"
    if args.config:
        cfg = TrainConfig.load(args.config)
    elif args.command != "gen-data" and saved.exists():
        cfg = TrainConfig.load(saved)
    else:
        cfg = TrainConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.mode is not None:
        updates["mode"] = args.mode
    if args.overlap is not None:
        r = float(args.overlap)
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {r}")
        if r not in STANDARD_OVERLAPS:
            warnings.warn(f"overlap r={r} is outside the standard grid {STANDARD_OVERLAPS}; using it as a generic ratio")
        updates["overlap"] = r
        if r > 0 and updates.get("mode", cfg.mode) == "unsupervised":
            updates["mode"] = "real-pivot"
    if getattr(args, "ablation", None):
        updates["ablation"] = args.ablation
    for item in args.set or []:
        key, _, raw = item.partition("=")
        try:
            updates[key] = json.loads(raw)
        except json.JSONDecodeError:
            updates[key] = raw
    return cfg.override(**updates) if updates else cfg


# -- checkpoint helpers ------------------------------------------------------

def save_stage(path: Path, model: PivotModel, cfg: TrainConfig, vocabs: dict, extra: dict | None = None) -> None:
    extra = dict(extra or {}, vocabs={l: v.to_dict() for l, v in vocabs.items()}, feature_dim=model.feature_dim,
                 captioner_max_len={l: c.max_len for l, c in model.captioners.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.capture(model, None, cfg.to_dict(), extra=extra).save(path)


def model_from_checkpoint(path) -> tuple:
    """Rebuild (model, config, vocabs, checkpoint) from any stage checkpoint."""
    ck = ckpt_io.Checkpoint.load(path)
    cfg = TrainConfig.from_dict(ck.config)
    vocabs = {l: Vocabulary.from_dict(d) for l, d in ck.extra["vocabs"].items()}
    mcfg = TransformerConfig(**{**cfg.model.to_dict(), "vocab_sizes": {l: len(v) for l, v in vocabs.items()}})
    feature_dim = int(ck.extra.get("feature_dim", cfg.world.feature_dim))
    model = PivotModel(mcfg, tuple(vocabs), mcfg.vocab_sizes, feature_dim, seed=cfg.seed)
    ckpt_io.apply(ck, model)
    for l, n in ck.extra.get("captioner_max_len", {}).items():
        model.captioners[l].max_len = n
    return model, cfg, vocabs, ck


def _workspace(root: Path, cfg: TrainConfig, vocabs: dict | None = None):
    ws = workspace_from_dir(root, cfg)
    if vocabs is not None and any(ws.vocabs[l].itos != vocabs[l].itos for l in ws.languages):
        raise ConfigError("checkpoint vocabularies do not match the data directory")
    return ws


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    corpus = generate_world(cfg.world, cfg.world_sizes)
    manifest = make_splits(corpus_image_ids(corpus), corpus.languages, cfg.mode, cfg.overlap, cfg.low_resource, cfg.seed)
    data_io.write_corpus(corpus, root, manifest)
    cfg.save(root / "config.json")
    print(f"wrote {len(corpus.entries)} images to {root} (mode={cfg.mode}, overlap={cfg.overlap})")
    return 0


def cmd_pretrain(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    ws = _workspace(root, cfg)
    model = build_model(cfg, ws)
    losses = pretrain_mass(model, ws, cfg, args.epochs)
    out = Path(args.output) if args.output else root / "runs" / "pretrain.ckpt"
    save_stage(out, model, cfg, ws.vocabs, {"mass_loss": losses})
    if args.emit_plots:
        from .plots import pretrain_curve
        pretrain_curve({"MASS": losses}, out.with_suffix(".svg"), "span-masked pre-training")
    print(f"MASS loss {losses[0]:.3f} -> {losses[-1]:.3f}" if losses else "no MASS epochs run")
    print(f"saved {out}")
    return 0


def cmd_pretrain_captioner(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    init = Path(args.init) if args.init else root / "runs" / "pretrain.ckpt"
    if init.exists():
        model, _, vocabs, _ = model_from_checkpoint(init)
        ws = _workspace(root, cfg, vocabs)
    else:
        log.warning("no MASS checkpoint at %s; captioners start from scratch", init)
        ws = _workspace(root, cfg)
        model = build_model(cfg, ws)
    losses = pretrain_captioners(model, ws, cfg, args.epochs)
    prepare_finetune(model)
    out = Path(args.output) if args.output else root / "runs" / "base.ckpt"
    save_stage(out, model, cfg, ws.vocabs, {"caption_loss": losses})
    if args.emit_plots:
        from .plots import pretrain_curve
        pretrain_curve({"captioning": losses}, out.with_suffix(".svg"), "captioner pre-training")
    print(f"caption loss {losses[0]:.3f} -> {losses[-1]:.3f}" if losses else "no caption epochs run")
    print(f"saved {out}")
    return 0


def cmd_train(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    run_dir = Path(args.output) if args.output else root / "runs" / cfg.flags.label().replace("+", "_")
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, saved_cfg, vocabs, ck = model_from_checkpoint(args.resume)
        cfg = saved_cfg
    else:
        init = Path(args.init) if args.init else root / "runs" / "base.ckpt"
        if not init.exists():
            print(f"error: no pre-trained checkpoint at {init}; run pretrain and pretrain-captioner first",
                  file=sys.stderr)
            return 2
        model, base_cfg, vocabs, _ = model_from_checkpoint(init)
        cfg = cfg.override(model=base_cfg.model.to_dict())
        ck = None
    ws = _workspace(root, cfg, vocabs)
    model.freeze_captioners()
    trainer = Trainer(model, ws, cfg, log_path=run_dir / "train_log.csv", dump_dir=run_dir)
    if ck is not None:
        trainer.restore(ck)
    cfg.save(run_dir / "config.json")
    history = trainer.fit(args.epochs, ckpt_dir=run_dir / "checkpoints")
    best = select_best(trainer.records)
    save_json(run_dir / "history.json", history["epochs"])
    save_json(run_dir / "selection.json", {"records": [r.to_dict() for r in trainer.records], "chosen": best.to_dict()})
    if args.emit_plots:
        from .plots import training_curves
        training_curves(history, run_dir / "curves.svg", cfg.flags.label())
    print(f"selected {best.checkpoint} (round-trip score {best.score:.2f}); run directory {run_dir}")
    return 0


def _read_lines(path) -> list:
    text = sys.stdin.read() if path in (None, "-") else Path(path).read_text(encoding="utf-8")
    return [line.split() for line in text.splitlines()]


def cmd_translate(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    model, mcfg, vocabs, _ = model_from_checkpoint(args.checkpoint or _default_model(root))
    src = args.src or model.languages[0]
    tgt = model.other(src)
    sents = _read_lines(args.input)
    imgs = None
    if not args.no_images:
        if not args.image_ids:
            print("error: translating with images needs --image-ids (or pass --no-images)", file=sys.stderr)
            return 2
        ids = Path(args.image_ids).read_text(encoding="utf-8").split()
        if len(ids) != len(sents):
            print(f"error: {len(sents)} sentences but {len(ids)} image ids", file=sys.stderr)
            return 2
        images = data_io.load_images(root, model.feature_dim)
        imgs = [images[i] for i in ids]
    # --no-images decodes against the null object with the trained lambda_v
    out, _ = model.translate([vocabs[src].encode(s) for s in sents], src, imgs, mcfg.lambda_v)
    for h in out:
        print(" ".join(vocabs[tgt].decode(h)))
    return 0


def cmd_caption(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    model, _, vocabs, _ = model_from_checkpoint(args.checkpoint or root / "runs" / "base.ckpt")
    images = data_io.load_images(root, model.feature_dim)
    ids = Path(args.image_ids).read_text(encoding="utf-8").split() if args.image_ids else sorted(images)[:args.limit]
    langs = [args.lang] if args.lang else list(model.languages)
    caps = {l: greedy_caption(model.captioners[l], model.caption_visual, [images[i] for i in ids])[0] for l in langs}
    for k, i in enumerate(ids):
        print("\t".join([i] + [" ".join(vocabs[l].decode(caps[l][k])) for l in langs]))
    return 0


def _default_model(root: Path) -> Path:
    sel = sorted(root.glob("runs/*/selection.json"))
    if not sel:
        raise FileNotFoundError(f"no trained run under {root / 'runs'}; pass --checkpoint")
    rec = json.loads(sel[-1].read_text())["chosen"]
    return sel[-1].parent / "checkpoints" / f"{rec['checkpoint']}.ckpt"


def cmd_evaluate(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    path = Path(args.checkpoint) if args.checkpoint else _default_model(root)
    model, mcfg, vocabs, _ = model_from_checkpoint(path)
    ws = _workspace(root, mcfg, vocabs)
    flags = mcfg.flags
    lam = mcfg.lambda_v if flags.images else 0.0
    report = {"checkpoint": str(path), "config": flags.label(),
              "bleu": evaluate_bleu(model, ws, flags.images and not args.no_images, lam),
              "bleu_text_only": evaluate_bleu(model, ws, False, lam)}
    if flags.images:
        report["retrieval"] = retrieval_eval(model, ws)
    out = Path(args.output) if args.output else path.with_suffix(".eval.json")
    save_json(out, report)
    for k in ("bleu", "bleu_text_only"):
        print(k, " ".join(f"{d}={v:.2f}" for d, v in report[k].items()))
    return 0


def _score_checkpoint(job) -> dict:
    path, root, with_images = job
    model, cfg, vocabs, _ = model_from_checkpoint(path)
    ws = _workspace(Path(root), cfg, vocabs)
    flags = cfg.flags
    lam = cfg.lambda_v if flags.images and with_images else 0.0
    imgs = {l: ws.image_list(ws.valid[l].image_ids) for l in ws.languages} if flags.images and with_images else None
    return round_trip_score(model, {l: ws.valid[l].sentences for l in ws.languages}, imgs, lam,
                            Path(path).stem).to_dict()


def cmd_select_model(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    run_dir = Path(args.run_dir) if args.run_dir else sorted(root.glob("runs/*/checkpoints"))[-1].parent
    paths = sorted((run_dir / "checkpoints").glob("*.ckpt"))
    if not paths:
        print(f"error: no checkpoints in {run_dir / 'checkpoints'}", file=sys.stderr)
        return 2
    jobs = [(str(p), str(root), not args.no_images) for p in paths]
    workers = min(args.workers or os.cpu_count() or 1, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_score_checkpoint, jobs))
    else:
        records = [_score_checkpoint(j) for j in jobs]
    recs = [SelectionRecord(r["checkpoint"], r["round_trip_x"], r["round_trip_y"]) for r in records]
    best = select_best(recs)
    save_json(run_dir / "selection.json", {"records": records, "chosen": best.to_dict()})
    for r in recs:
        print(f"{r.checkpoint}\t{r.round_trip_x:.2f}\t{r.round_trip_y:.2f}\t{r.score:.2f}")
    print(f"selected {best.checkpoint}")
    return 0


def cmd_ablate(args, cfg: TrainConfig) -> int:
    root = data_root(args)
    configs = args.configs or list(ABLATIONS)
    for name in configs:
        AblationFlags.parse(name)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    groups = experiments.ablation_groups(cfg, configs, seeds) if cfg.mode != "supervised" else \
        experiments.supervised_groups(cfg, seeds, configs)
    if cfg.overlap > 0:
        groups = experiments.overlap_groups(cfg, [cfg.overlap], seeds, configs)
    results = experiments.run_groups(groups, args.workers)
    report = experiments.summarize(results, cfg.world.languages)
    out = Path(args.output) if args.output else root / "runs" / "ablation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_json(out, {"report": report, "runs": results})
    print(report["table"])
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "pretrain-captioner": cmd_pretrain_captioner,
            "train": cmd_train, "translate": cmd_translate, "caption": cmd_caption, "evaluate": cmd_evaluate,
            "select-model": cmd_select_model, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--data-dir", help="data root (default: $PIVOTMT_DATA_DIR or ./pivotmt_data)")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=("unsupervised", "supervised"))
    common.add_argument("--overlap", type=float, help="fraction of shared training images (real pivoting)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override (JSON value)")
    common.add_argument("--emit-plots", action="store_true", help="write SVG loss/BLEU curves")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pivotmt", description="Multimodal unsupervised MT on a synthetic world.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus and split manifest")
    for name in ("pretrain", "pretrain-captioner"):
        sp = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} stage")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--output")
        if name == "pretrain-captioner":
            sp.add_argument("--init", help="MASS checkpoint to start from")

    sp = sub.add_parser("train", parents=[common], help="fine-tune with the selected objectives")
    sp.add_argument("--ablation", help='objective set, e.g. "T+V+VSE" or "Full"')
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--init", help="pre-trained checkpoint")
    sp.add_argument("--resume", help="resume from a training checkpoint")
    sp.add_argument("--output", help="run directory")

    sp = sub.add_parser("translate", parents=[common], help="translate sentences from a file or stdin")
    sp.add_argument("--checkpoint")
    sp.add_argument("--src", help="source language")
    sp.add_argument("--input", help="tokenized sentences, one per line (default stdin)")
    sp.add_argument("--image-ids", help="file with one image id per input sentence")
    sp.add_argument("--no-images", action="store_true", help="text-only input (null visual object)")

    sp = sub.add_parser("caption", parents=[common], help="caption images with the frozen captioners")
    sp.add_argument("--checkpoint")
    sp.add_argument("--lang")
    sp.add_argument("--image-ids")
    sp.add_argument("--limit", type=int, default=10)

    sp = sub.add_parser("evaluate", parents=[common], help="test BLEU and retrieval of a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--no-images", action="store_true")
    sp.add_argument("--output")

    sp = sub.add_parser("select-model", parents=[common], help="score every checkpoint by round-trip BLEU")
    sp.add_argument("--run-dir")
    sp.add_argument("--no-images", action="store_true", help="score round trips without images")
    sp.add_argument("--workers", type=int)

    sp = sub.add_parser("ablate", parents=[common], help="train and compare objective sets")
    sp.add_argument("configs", nargs="*", help="objective sets (default: every standard row)")
    sp.add_argument("--ablation", help=argparse.SUPPRESS)
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--output")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    if args.command == "ablate" and args.ablation:
        args.configs = [args.ablation, *args.configs]
        args.ablation = None
    try:
        cfg = load_config(args)
        return HANDLERS[args.command](args, cfg)
    except (ConfigError, AccessViolation, FileNotFoundError, ckpt_io.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
