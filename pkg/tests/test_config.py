import pytest

from pivotmt.config import TrainConfig
from pivotmt.errors import ConfigError
from pivotmt.optim import WarmupSchedule
from pivotmt.transformer import TransformerConfig


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 18
        assert cfg.lambda_v == 1.0 and cfg.margin == 0.1
        assert cfg.mode == "unsupervised" and cfg.overlap == 0.0
        assert (cfg.cpt_schedule.start, cfg.cpt_schedule.end, cfg.cpt_schedule.end_epoch) == (1.0, 0.1, 10)

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(seed=3, ablation="T+V", model=TransformerConfig(layers=2, heads=2, model_dim=16, ffn_dim=32),
                          optimizer=WarmupSchedule(1e-6, 1e-3, 7))
        cfg.save(tmp_path / "c.json")
        back = TrainConfig.load(tmp_path / "c.json")
        assert back == cfg
        assert isinstance(back.model, TransformerConfig) and isinstance(back.world.colors, tuple)

    def test_dotted_override(self):
        cfg = TrainConfig().override(**{"model.model_dim": 16, "epochs": 2, "optimizer.lr_max": 0.01})
        assert (cfg.model.model_dim, cfg.epochs, cfg.optimizer.lr_max) == (16, 2, 0.01)
        assert TrainConfig().model.model_dim == 32

    @pytest.mark.parametrize("key", ["nope", "model.nope", "epochs.x"])
    def test_unknown_override(self, key):
        with pytest.raises(ConfigError):
            TrainConfig().override(**{key: 1})

    def test_unknown_json_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lr": 1.0})

    @pytest.mark.parametrize("kw", [dict(mode="semi"), dict(overlap=0.5), dict(lambda_v=-1.0),
                                    dict(image_dropout=1.0), dict(margin=0.0), dict(batch_tokens=0),
                                    dict(ablation="T+Q")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_real_pivot_accepts_overlap(self):
        assert TrainConfig(mode="real-pivot", overlap=0.5).overlap == 0.5

    def test_flags(self):
        f = TrainConfig(ablation="T+V").flags
        assert f.images and not (f.vse or f.cbt or f.cpt)
        assert TrainConfig(ablation="T").flags.images is False
