"""End-to-end toy studies: objective ablations, image overlap, supervised mode.

A *group* shares one data workspace and one pre-training (MASS plus
captioners) and then fine-tunes several configurations from that shared
starting point.  Groups are independent and can run in separate processes.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .metrics import ablation_report, select_best
from .objectives import AblationFlags
from .train import (Trainer, build_model, checkpoint_test_scores, evaluate_bleu, prepare_finetune,
                    pretrain_captioners, pretrain_mass, retrieval_eval, workspace_from_world)

log = logging.getLogger(__name__)


@dataclass
class Group:
    """Configurations fine-tuned from one shared pre-training."""

    config: dict
    configs: tuple
    tag: str = ""
    score_checkpoints: bool = False


def pretrain_base(cfg: TrainConfig, ws, captioners: bool = True) -> dict:
    model = build_model(cfg, ws)
    mass = pretrain_mass(model, ws, cfg)
    cap = pretrain_captioners(model, ws, cfg) if captioners else []
    prepare_finetune(model)
    return {"state": model.state_dict(), "max_len": {l: c.max_len for l, c in model.captioners.items()},
            "mass_loss": mass, "caption_loss": cap}


def finetune_from(cfg: TrainConfig, ws, base: dict, name: str, score_checkpoints: bool = False,
                  log_path=None, ckpt_dir=None) -> dict:
    """Fine-tune configuration ``name`` from a pre-trained base and evaluate it."""
    t0 = time.time()
    run_cfg = cfg.override(ablation=name)
    flags = AblationFlags.parse(name)
    model = build_model(run_cfg, ws)
    model.load_state_dict(base["state"])
    model.freeze_captioners()
    for l, n in base["max_len"].items():
        model.captioners[l].max_len = n
    trainer = Trainer(model, ws, run_cfg, flags, log_path=log_path)
    history = trainer.fit(keep_states=score_checkpoints, ckpt_dir=ckpt_dir)
    lam = run_cfg.lambda_v if flags.images else 0.0
    result = {
        "config": name, "seed": run_cfg.seed, "mode": run_cfg.mode, "overlap": run_cfg.overlap,
        "bleu": evaluate_bleu(model, ws, flags.images, lam),
        "bleu_text_only": evaluate_bleu(model, ws, False, lam),
        "selection": [e["selection"] for e in history["epochs"]],
        "losses": [e["losses"] for e in history["epochs"]],
    }
    if flags.images:
        result["retrieval"] = retrieval_eval(model, ws)
    if score_checkpoints:
        tests = checkpoint_test_scores(model, ws, history["states"], flags.images, lam)
        chosen = trainer.records.index(select_best(trainer.records))
        result["checkpoints"] = {"test_bleu": tests, "chosen": chosen, "chosen_test": tests[chosen],
                                 "best_test": max(tests)}
    result["seconds"] = time.time() - t0
    return result


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # optional; BLAS threads only matter on multi-core hosts
        return None
    return threadpool_limits(1)


def run_group(group: Group) -> list:
    limiter = _limit_threads()
    checking = ad.set_check_finite(False)
    try:
        return _run_group(group)
    finally:
        ad.set_check_finite(checking)
        if limiter is not None:
            limiter.restore_original_limits()


def _run_group(group: Group) -> list:
    cfg = TrainConfig.from_dict(group.config)
    t0 = time.time()
    ws = workspace_from_world(cfg)
    needs_captions = any(AblationFlags.parse(n).cbt or AblationFlags.parse(n).cpt for n in group.configs)
    base = pretrain_base(cfg, ws, captioners=needs_captions and cfg.mode != "supervised")
    log.info("group %s pre-trained in %.0fs", group.tag, time.time() - t0)
    out = []
    for name in group.configs:
        res = finetune_from(cfg, ws, base, name, group.score_checkpoints)
        res["tag"] = group.tag
        res["pretrain_seconds"] = time.time() - t0
        out.append(res)
    return out


def run_groups(groups: list, workers: int | None = None) -> list:
    """Run groups, in parallel processes when more than one worker is available."""
    workers = workers or min(len(groups), os.cpu_count() or 1)
    if workers <= 1:
        return [r for g in groups for r in run_group(g)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [r for rs in pool.map(run_group, groups) for r in rs]


def ablation_groups(cfg: TrainConfig, configs, seeds, score_checkpoints: bool = False) -> list:
    return [Group(cfg.override(seed=s, mode="unsupervised", overlap=0.0).to_dict(), tuple(configs),
                  f"ablation/seed{s}", score_checkpoints) for s in seeds]


def overlap_groups(cfg: TrainConfig, ratios, seeds, configs=("Full",)) -> list:
    groups = []
    for r in ratios:
        mode = "unsupervised" if r == 0 else "real-pivot"
        for s in seeds:
            groups.append(Group(cfg.override(seed=s, mode=mode, overlap=float(r)).to_dict(), tuple(configs),
                                f"overlap{r}/seed{s}"))
    return groups


def supervised_groups(cfg: TrainConfig, seeds, configs=("T+V",)) -> list:
    return [Group(cfg.override(seed=s, mode="supervised", overlap=0.0).to_dict(), tuple(configs),
                  f"supervised/seed{s}") for s in seeds]


def summarize(results: list, languages: tuple) -> dict:
    """Ablation-style table keyed by ``tag-prefix:config``."""
    table: dict = {}
    for r in results:
        key = f"{r['tag'].split('/')[0]}:{r['config']}"
        seed_row = dict(r["bleu"])
        for k, v in r["bleu_text_only"].items():
            seed_row[f"{k} text-only"] = v
        table.setdefault(key, {"seeds": []})["seeds"].append(seed_row)
    return ablation_report(table, languages)


def mean_bleu(results: list, tag_prefix: str, config: str, text_only: bool = False) -> float:
    key = "bleu_text_only" if text_only else "bleu"
    vals = [r[key]["mean"] for r in results if r["tag"].startswith(tag_prefix) and r["config"] == config]
    if not vals:
        raise KeyError(f"no results for {tag_prefix}:{config}")
    return float(np.mean(vals))
