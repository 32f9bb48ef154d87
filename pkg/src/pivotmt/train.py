"""Data workspace, pre-training, fine-tuning loop and evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .captioning import CaptionCache, caption_loss
from .config import TrainConfig
from .data import io as data_io
from .data.splits import SplitManifest, corpus_image_ids, make_splits
from .data.vocab import Vocabulary, build_vocab
from .data.world import generate_world
from .errors import NonFiniteLoss
from .metrics import SelectionRecord, corpus_bleu, retrieval_recall, round_trip_score
from .model import PivotModel
from .objectives import AblationFlags, Batch, mass_pretrain_loss, supervised_mt_loss, total_loss
from .optim import Adam
from .transformer import TransformerConfig
from .vse import pairwise_similarity

log = logging.getLogger(__name__)


# -- data -------------------------------------------------------------------

@dataclass
class Workspace:
    """Everything a run may read: vocabularies, images, and manifest-filtered text.

    ``train``/``valid`` hold token ids per language.  Test text is only
    reachable through :meth:`test_pairs`, which goes through the manifest's
    access audit.
    """

    languages: tuple
    manifest: SplitManifest
    vocabs: dict
    images: dict
    train: dict
    valid: dict
    _tables: dict = field(repr=False, default_factory=dict)

    @classmethod
    def build(cls, tables: dict, images: dict, manifest: SplitManifest, cfg: TrainConfig) -> "Workspace":
        """``tables[split][lang]`` maps image id -> tokens."""
        langs = manifest.languages
        train_ids = {l: manifest.access("train", l, "train") for l in langs}
        valid_ids = {l: manifest.access("valid", l, "train") for l in langs}
        vocabs = {}
        for l in langs:
            own = [tables["train"][l][i] for i in train_ids[l]] + [tables["valid"][l][i] for i in valid_ids[l]]
            vocabs[l] = build_vocab(own, cfg.vocab_mode, cfg.bpe_merges, lang=l)
        enc = lambda l, split, ids: data_io.MonolingualSet(l, ids, [vocabs[l].encode(tables[split][l][i]) for i in ids])
        return cls(langs, manifest, vocabs, images,
                   {l: enc(l, "train", train_ids[l]) for l in langs},
                   {l: enc(l, "valid", valid_ids[l]) for l in langs},
                   {"test": tables.get("test", {})})

    def test_pairs(self, src: str, phase: str = "eval"):
        """(image ids, source token ids, reference words) of the test split."""
        ids = self.manifest.access("test", None, phase)
        tgt = [l for l in self.languages if l != src][0]
        table = self._tables["test"]
        return ids, [self.vocabs[src].encode(table[src][i]) for i in ids], [table[tgt][i] for i in ids]

    def image_list(self, ids) -> list:
        return [self.images[i] for i in ids]


def workspace_from_world(cfg: TrainConfig, corpus=None, manifest: SplitManifest | None = None) -> Workspace:
    corpus = corpus or generate_world(cfg.world, cfg.world_sizes)
    manifest = manifest or make_splits(corpus_image_ids(corpus), corpus.languages, cfg.mode, cfg.overlap,
                                       cfg.low_resource, cfg.seed)
    tables = {s: {l: {e.image_id: e.sentences[l] for e in corpus.split(s)} for l in corpus.languages}
              for s in ("train", "valid", "test")}
    return Workspace.build(tables, corpus.images, manifest, cfg)


def workspace_from_dir(root, cfg: TrainConfig, manifest: SplitManifest | None = None) -> Workspace:
    root = Path(root)
    manifest = manifest or SplitManifest.load(root / "manifest.json")
    tables = {s: {l: data_io.read_text(root, s, l) for l in manifest.languages} for s in ("train", "valid", "test")}
    return Workspace.build(tables, data_io.load_images(root), manifest, cfg)


def build_model(cfg: TrainConfig, ws: Workspace, dtype=np.float64) -> PivotModel:
    feature_dim = next(iter(ws.images.values())).features.shape[1]
    mcfg = TransformerConfig(**{**cfg.model.to_dict(), "vocab_sizes": {l: len(v) for l, v in ws.vocabs.items()}})
    return PivotModel(mcfg, ws.languages, mcfg.vocab_sizes, feature_dim, seed=cfg.seed, dtype=dtype)


def token_batches(lengths, order, budget: int, min_size: int = 2):
    """Split ``order`` into consecutive runs whose total length (+EOS) fits ``budget``."""
    out, cur, used = [], [], 0
    for i in order:
        n = lengths[i] + 1
        if cur and used + n > budget and len(cur) >= min_size:
            out.append(cur)
            cur, used = [], 0
        cur.append(int(i))
        used += n
    if cur:
        if len(cur) < min_size and out:
            out[-1].extend(cur)
        else:
            out.append(cur)
    return out


# -- pre-training -----------------------------------------------------------

def _check_finite(loss, what: str, dump: dict | None = None, dump_dir=None):
    if not np.isfinite(loss.data).all():
        if dump_dir is not None and dump is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(dump_dir) / "nonfinite_batch.json", "w") as fh:
                json.dump(dump, fh, default=str)
        raise NonFiniteLoss(f"non-finite {what} loss; offending batch dumped" if dump_dir else f"non-finite {what} loss")


def pretrain_mass(model: PivotModel, ws: Workspace, cfg: TrainConfig, epochs: int | None = None) -> list:
    """Span-masked reconstruction on each language's own sentences (text only)."""
    epochs = cfg.mass_epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 11])
    params = [p for m in (*model.encoders.values(), *model.decoders.values()) for p in m.parameters()]
    params = list({id(p): p for p in params}.values())
    opt = Adam(params, copy.copy(cfg.pretrain_optimizer), clip_norm=cfg.clip_norm)
    x, y = ws.languages
    history = []
    model.train()
    for ep in range(epochs):
        n = min(len(ws.train[x]), len(ws.train[y]))
        ox, oy = rng.permutation(len(ws.train[x]))[:n], rng.permutation(len(ws.train[y]))[:n]
        lengths = [len(s) for s in ws.train[x].sentences]
        tot, steps = 0.0, 0
        for chunk in token_batches(lengths, range(n), cfg.batch_tokens // 2):
            bx = [ws.train[x].sentences[ox[i]] for i in chunk]
            by = [ws.train[y].sentences[oy[i]] for i in chunk]
            opt.zero_grad()
            loss = mass_pretrain_loss(model, bx, x, rng, cfg.mass_fraction) + mass_pretrain_loss(model, by, y, rng, cfg.mass_fraction)
            _check_finite(loss, "MASS")
            ad.backward(loss)
            opt.step()
            tot += float(loss.data)
            steps += 1
        history.append(tot / max(steps, 1))
        log.info("mass epoch %d loss %.3f", ep, history[-1])
    return history


def pretrain_captioners(model: PivotModel, ws: Workspace, cfg: TrainConfig, epochs: int | None = None) -> list:
    """Each captioner learns from its own language's (image, sentence) pool."""
    epochs = cfg.caption_epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 13])
    opt = Adam(model.captioner_parameters(), copy.copy(cfg.pretrain_optimizer), clip_norm=cfg.clip_norm)
    history = []
    model.train()
    for ep in range(epochs):
        tot, steps = 0.0, 0
        for l in ws.languages:
            data = ws.train[l]
            order = rng.permutation(len(data))
            for chunk in token_batches([len(s) for s in data.sentences], order, cfg.batch_tokens // 2):
                opt.zero_grad()
                loss = caption_loss(model.captioners[l], model.caption_visual,
                                    ws.image_list([data.image_ids[i] for i in chunk]),
                                    [data.sentences[i] for i in chunk])
                _check_finite(loss, "caption")
                ad.backward(loss)
                opt.step()
                tot += float(loss.data)
                steps += 1
        history.append(tot / max(steps, 1))
        log.info("caption epoch %d loss %.3f", ep, history[-1])
    for l in ws.languages:
        model.captioners[l].set_max_len_from(ws.train[l].sentences)
    return history


def prepare_finetune(model: PivotModel) -> None:
    """Freeze the captioning pathway and seed the shared visual encoder from it."""
    model.init_visual_from_captioner()
    model.freeze_captioners()


# -- fine-tuning ------------------------------------------------------------

LOG_FIELDS = ["step", "epoch", "L_MBT", "L_VSE", "L_CBT", "L_CPT", "w_CPT", "L_MT", "lr"]


class Trainer:
    """Fine-tuning loop over language-balanced mini-batches.

    One epoch is one pass over the smaller language's training pool.  The
    loop state (epoch, position in the shuffled order, RNG streams, Adam
    moments) is checkpointable, so an interrupted run resumes exactly.
    """

    def __init__(self, model: PivotModel, ws: Workspace, cfg: TrainConfig, flags: AblationFlags | None = None,
                 log_path=None, dump_dir=None):
        self.model = model
        self.ws = ws
        self.cfg = cfg
        self.flags = flags or cfg.flags
        self.rng = np.random.default_rng([cfg.seed, 17])
        params = [p for p in model.translator_parameters() if p.requires_grad]
        self.opt = Adam(params, copy.copy(cfg.optimizer), clip_norm=cfg.clip_norm)
        self.captions = CaptionCache(model.captioners, model.caption_visual, ws.languages)
        self.epoch = 0
        self.step = 0
        self.cursor = 0
        self.orders: dict | None = None
        self.log_path = Path(log_path) if log_path else None
        self.dump_dir = dump_dir
        self.records: list = []
        if self.log_path and not self.log_path.exists():
            with open(self.log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    @property
    def supervised(self) -> bool:
        return self.cfg.mode == "supervised"

    def _new_orders(self) -> dict:
        return {l: self.rng.permutation(len(self.ws.train[l])) for l in self.ws.languages}

    def _epoch_chunks(self):
        x = self.ws.languages[0]
        n = min(len(self.ws.train[l]) for l in self.ws.languages)
        lengths = [len(self.ws.train[x].sentences[i]) for i in self.orders[x][:n]]
        return token_batches(lengths, range(n), self.cfg.batch_tokens // 2)

    def _batch(self, chunk) -> Batch:
        x, y = self.ws.languages
        tx, ty = self.ws.train[x], self.ws.train[y]
        ix = [int(self.orders[x][i]) for i in chunk]
        iy = [int(self.orders[y][i]) for i in chunk]
        if self.supervised:
            pos = {img: j for j, img in enumerate(ty.image_ids)}
            iy = [pos[tx.image_ids[i]] for i in ix]
        return Batch([tx.sentences[i] for i in ix], self.ws.image_list([tx.image_ids[i] for i in ix]),
                     [ty.sentences[i] for i in iy], self.ws.image_list([ty.image_ids[i] for i in iy]))

    def train_step(self, batch: Batch) -> dict:
        self.model.train()
        self.opt.zero_grad()
        if self.supervised:
            lam = self.cfg.lambda_v if self.flags.images else 0.0
            loss = supervised_mt_loss(self.model, batch.xs, batch.ys, batch.zx, lam, "supervised", self.flags.images)
            logs = {"mt": float(loss.data), "total": float(loss.data)}
        else:
            loss, logs = total_loss(self.model, batch, self.cfg.weights, self.epoch, self.flags,
                                    self.cfg.cpt_schedule, self.captions.get, self.cfg.lambda_v, self.cfg.margin,
                                    self.cfg.image_dropout, self.rng)
        _check_finite(loss, "training", {"xs": batch.xs, "ys": batch.ys, "zx": [z.image_id for z in batch.zx],
                                          "zy": [z.image_id for z in batch.zy], "step": self.step}, self.dump_dir)
        ad.backward(loss)
        lr = self.opt.step()
        self.step += 1
        logs["lr"] = lr
        self._write_log(logs)
        return logs

    def _write_log(self, logs: dict) -> None:
        if not self.log_path:
            return
        row = [self.step, self.epoch] + [
            f"{logs[k]:.6f}" if k in logs else "" for k in ("mbt", "vse", "cbt", "cpt", "w_cpt", "mt", "lr")]
        with open(self.log_path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)

    def run_epoch(self, max_steps: int | None = None) -> dict:
        """Train until the end of the current epoch (or ``max_steps`` more steps)."""
        if self.orders is None:
            self.orders = self._new_orders()
        chunks = self._epoch_chunks()
        sums: dict = {}
        done = 0
        while self.cursor < len(chunks):
            if max_steps is not None and done >= max_steps:
                return sums
            logs = self.train_step(self._batch(chunks[self.cursor]))
            self.cursor += 1
            done += 1
            for k, v in logs.items():
                sums[k] = sums.get(k, 0.0) + v
        self.epoch += 1
        self.cursor = 0
        self.orders = None
        return {k: v / max(done, 1) for k, v in sums.items()}

    def select_record(self, name: str) -> SelectionRecord:
        ws = self.ws
        lam = self.cfg.lambda_v if self.flags.images else 0.0
        imgs = None
        if self.flags.images and self.cfg.select_with_images:
            imgs = {l: ws.image_list(ws.valid[l].image_ids) for l in ws.languages}
        elif self.flags.images:
            lam = 0.0
        return round_trip_score(self.model, {l: ws.valid[l].sentences for l in ws.languages}, imgs, lam, name)

    def fit(self, epochs: int | None = None, ckpt_dir=None, keep_states: bool = False, on_epoch=None) -> dict:
        """Run epochs, scoring round-trip BLEU after each; returns the history."""
        epochs = self.cfg.epochs if epochs is None else epochs
        history = {"epochs": [], "states": []}
        while self.epoch < epochs:
            ep = self.epoch
            losses = self.run_epoch()
            rec = self.select_record(f"epoch{ep:03d}")
            self.records.append(rec)
            entry = {"epoch": ep, "losses": losses, "selection": rec.to_dict()}
            history["epochs"].append(entry)
            if keep_states:
                history["states"].append(self.model.state_dict())
            if ckpt_dir is not None:
                Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                self.checkpoint().save(Path(ckpt_dir) / f"epoch{ep:03d}.ckpt")
            if on_epoch is not None:
                on_epoch(self, entry)
            log.info("epoch %d %s rt=%.2f", ep, {k: round(v, 3) for k, v in losses.items()}, rec.score)
        return history

    # -- persistence --
    def rngs(self) -> dict:
        return {"trainer": self.rng, "model": self.model._rng}

    def checkpoint(self) -> ckpt_io.Checkpoint:
        extra = {"cursor": self.cursor, "flags": self.flags.label(),
                 "orders": {l: [int(v) for v in o] for l, o in self.orders.items()} if self.orders is not None else None,
                 "captioner_max_len": {l: c.max_len for l, c in self.model.captioners.items()},
                 "vocabs": {l: v.to_dict() for l, v in self.ws.vocabs.items()}}
        return ckpt_io.capture(self.model, self.opt, self.cfg.to_dict(), self.epoch, self.step, self.rngs(), extra)

    def restore(self, ck: ckpt_io.Checkpoint) -> None:
        ckpt_io.apply(ck, self.model, self.opt, self.rngs())
        self.epoch, self.step = ck.epoch, ck.step
        self.cursor = int(ck.extra.get("cursor", 0))
        orders = ck.extra.get("orders")
        self.orders = {l: np.asarray(o) for l, o in orders.items()} if orders else None
        for l, n in ck.extra.get("captioner_max_len", {}).items():
            self.model.captioners[l].max_len = int(n)


# -- evaluation -------------------------------------------------------------

def evaluate_bleu(model: PivotModel, ws: Workspace, use_images: bool = True, lambda_v: float = 1.0,
                  batch_size: int = 100) -> dict:
    """Test BLEU for both directions against the held-out references."""
    out = {}
    for src in ws.languages:
        tgt = model.other(src)
        ids, srcs, refs = ws.test_pairs(src, "eval")
        hyps = []
        for s in range(0, len(ids), batch_size):
            imgs = ws.image_list(ids[s:s + batch_size]) if use_images else None
            dec, _ = model.translate(srcs[s:s + batch_size], src, imgs, lambda_v)
            hyps += [ws.vocabs[tgt].decode(h) for h in dec]
        out[f"{src}->{tgt}"] = corpus_bleu(hyps, refs).bleu
    out["mean"] = float(np.mean([out[f"{s}->{model.other(s)}"] for s in ws.languages]))
    return out


def retrieval_eval(model: PivotModel, ws: Workspace, ks=(1, 5, 10)) -> dict:
    """Validation image/sentence recall per language, with the 1/N chance level."""
    from .objectives import encode_source

    out = {}
    model.eval()
    with ad.no_grad():
        for l in ws.languages:
            data = ws.valid[l]
            sim = pairwise_similarity(encode_source(model, data.sentences, l),
                                      model.visual(ws.image_list(data.image_ids))).data
            rec = retrieval_recall(sim, ks)
            rec["chance@1"] = 1.0 / len(data)
            out[l] = rec
    model.train()
    return out


def checkpoint_test_scores(model: PivotModel, ws: Workspace, states: list, use_images: bool, lambda_v: float) -> list:
    """Test BLEU of each stored epoch state (restores the final state afterwards)."""
    final = model.state_dict()
    scores = []
    try:
        for st in states:
            model.load_state_dict(st)
            scores.append(evaluate_bleu(model, ws, use_images, lambda_v)["mean"])
    finally:
        model.load_state_dict(final)
    return scores
