import pytest

from pivotmt import experiments as E
from pivotmt.config import TrainConfig
from pivotmt.transformer import TransformerConfig


def fake(tag, config, mean, text_only):
    return {"tag": tag, "config": config, "bleu": {"en->fr": mean, "fr->en": mean, "mean": mean},
            "bleu_text_only": {"en->fr": text_only, "fr->en": text_only, "mean": text_only}}


class TestGroups:
    def test_ablation_groups_are_strict(self):
        groups = E.ablation_groups(TrainConfig(), ["T", "Full"], [0, 1])
        assert [g.tag for g in groups] == ["ablation/seed0", "ablation/seed1"]
        for g, s in zip(groups, (0, 1)):
            cfg = TrainConfig.from_dict(g.config)
            assert (cfg.seed, cfg.mode, cfg.overlap) == (s, "unsupervised", 0.0)
            assert g.configs == ("T", "Full")

    def test_overlap_groups_switch_mode(self):
        modes = {g.tag: TrainConfig.from_dict(g.config).mode for g in E.overlap_groups(TrainConfig(), [0.0, 0.5], [3])}
        assert modes == {"overlap0.0/seed3": "unsupervised", "overlap0.5/seed3": "real-pivot"}

    def test_supervised_groups(self):
        (g,) = E.supervised_groups(TrainConfig(), [2])
        assert TrainConfig.from_dict(g.config).mode == "supervised" and g.configs == ("T+V",)


class TestSummaries:
    def test_mean_bleu_and_summary(self):
        res = [fake("ablation/seed0", "T", 10.0, 10.0), fake("ablation/seed1", "T", 20.0, 20.0),
               fake("ablation/seed0", "Full", 30.0, 28.0)]
        assert E.mean_bleu(res, "ablation", "T") == 15.0
        assert E.mean_bleu(res, "ablation", "Full", text_only=True) == 28.0
        with pytest.raises(KeyError):
            E.mean_bleu(res, "overlap", "T")
        rows = {r["config"]: r for r in E.summarize(res, ("en", "fr"))["rows"]}
        assert rows["ablation:Full"]["delta"] == -2.0


def test_tiny_group_runs_end_to_end():
    cfg = TrainConfig(model=TransformerConfig(layers=1, heads=2, model_dim=8, ffn_dim=16, dropout=0.0),
                      world_sizes={"train": 40, "valid": 24, "test": 10}, epochs=2, mass_epochs=1,
                      caption_epochs=1, batch_tokens=64)
    (group,) = E.ablation_groups(cfg, ["T", "T+V+CPT"], [0], score_checkpoints=True)
    out = E.run_group(group)
    assert [r["config"] for r in out] == ["T", "T+V+CPT"]
    assert "retrieval" not in out[0] and "retrieval" in out[1]
    for r in out:
        ck = r["checkpoints"]
        assert len(ck["test_bleu"]) == 2 and ck["best_test"] >= ck["chosen_test"]
        assert len(r["selection"]) == 2
