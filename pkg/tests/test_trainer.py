import numpy as np
import pandas as pd
import pytest

from cada.errors import ConfigError, RestoreError, TrainingError
from cada.losses import LossSwitches, StepLosses
from cada.model import build_model
from cada.trainer import LOG_COLUMNS, TrainConfig, Trainer


def tiny_train_config(**overrides):
    switches = overrides.pop("switches", LossSwitches(group_size=4, group_stride=4))
    values = dict(epochs=1, batch_size=4, max_len=16, switches=switches)
    values.update(overrides)
    return TrainConfig(**values)


def make_trainer(corpus, tiny_config, run_dir, config=None, config_hash="h", seed=0):
    model = build_model(tiny_config, seed=seed)
    return Trainer(
        model,
        corpus.split("train"),
        corpus.vocab,
        corpus.lexicon,
        config or tiny_train_config(),
        run_dir,
        config_hash=config_hash,
        config_dict={"seed": seed},
    )


def test_batch_size_must_allow_negatives():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=1.5)


def test_short_run_writes_log_and_checkpoint(corpus, tiny_config, tmp_path):
    trainer = make_trainer(corpus, tiny_config, tmp_path)
    assert trainer.total_steps == 4
    result = trainer.run(stop_step=3)
    assert result.steps == 3
    assert list(result.log.columns) == LOG_COLUMNS
    assert result.log["step"].tolist() == [1, 2, 3]
    lam = trainer.config.switches.lam
    expected = lam * result.log["ndf"] + result.log["atp"] + result.log["ara"]
    assert np.allclose(result.log["total"], expected, rtol=1e-6)
    assert result.final_checkpoint == tmp_path / "checkpoints" / "final.ckpt"
    assert result.final_checkpoint.exists()
    assert len(result.analysis["loss_log"]) == 3
    assert result.analysis["sharing_audit"][3]["passed"]


def test_resume_matches_uninterrupted_run(corpus, tiny_config, tmp_path):
    straight = make_trainer(corpus, tiny_config, tmp_path / "straight")
    straight.run()

    first = make_trainer(corpus, tiny_config, tmp_path / "split")
    first.run(stop_step=2)
    second = make_trainer(corpus, tiny_config, tmp_path / "split")
    second.resume(first.checkpoint_dir / "final.ckpt")
    assert second.step == 2
    second.run()

    assert (tmp_path / "straight" / "training_log.csv").read_bytes() == (
        tmp_path / "split" / "training_log.csv"
    ).read_bytes()
    for (path, a), (_, b) in zip(straight.model.named_parameters(), second.model.named_parameters()):
        assert np.array_equal(a.data, b.data), path


def test_resume_rejects_other_config(corpus, tiny_config, tmp_path):
    trainer = make_trainer(corpus, tiny_config, tmp_path)
    trainer.run(stop_step=1)
    other = make_trainer(corpus, tiny_config, tmp_path / "other", config_hash="different")
    with pytest.raises(RestoreError):
        other.resume(trainer.checkpoint_dir / "final.ckpt")


def test_lambda_zero_drops_ndf(corpus, tiny_config, tmp_path):
    config = tiny_train_config(switches=LossSwitches(lam=0.0, group_size=4, group_stride=4))
    log = make_trainer(corpus, tiny_config, tmp_path, config).run(stop_step=2).log
    assert np.allclose(log["total"], log["atp"] + log["ara"], rtol=1e-6)
    assert (log["ndf"] > 0).all()


def test_disabled_terms_log_zero(corpus, tiny_config, tmp_path):
    config = tiny_train_config(switches=LossSwitches(use_atp=False, use_ara=False, group_size=4, group_stride=4))
    trainer = make_trainer(corpus, tiny_config, tmp_path, config)
    log = trainer.run(stop_step=2).log
    assert (log["atp"] == 0).all() and (log["ara"] == 0).all()
    assert trainer.model.decoder_calls == 0


def test_non_finite_loss_dumps_batch(corpus, tiny_config, tmp_path, monkeypatch):
    def broken(model, batch, switches):
        nan = float("nan")
        return StepLosses(None, dict(ndf=nan, atp=0.0, ara=0.0, total=nan), None, None, True)

    monkeypatch.setattr("cada.trainer.cada_step_losses", broken)
    trainer = make_trainer(corpus, tiny_config, tmp_path)
    with pytest.raises(TrainingError, match="step 1"):
        trainer.run()
    dump = np.load(tmp_path / "bad_batch.npz")
    assert dump["images"].shape == (4, 32, 32, 3)
    assert np.isnan(dump["losses"][-1])


def test_checkpoint_cadence(corpus, tiny_config, tmp_path):
    trainer = make_trainer(corpus, tiny_config, tmp_path, tiny_train_config(checkpoint_every=2))
    result = trainer.run()
    names = sorted(p.name for p in trainer.checkpoint_dir.iterdir())
    assert names == ["final.ckpt", "step_000002.ckpt", "step_000004.ckpt"]
    assert sorted(result.analysis["sharing_audit"]) == [2, 4]


def test_gradient_accumulation_counts_micro_batches(corpus, tiny_config, tmp_path):
    trainer = make_trainer(corpus, tiny_config, tmp_path, tiny_train_config(accum_steps=2))
    assert trainer.total_steps == 2
    result = trainer.run()
    assert result.log["step"].tolist() == [1, 2]


@pytest.mark.slow
def test_loss_goes_down(corpus, tiny_config, tmp_path):
    config = tiny_train_config(epochs=10, lr=1e-3, augment=False)
    log = make_trainer(corpus, tiny_config, tmp_path, config).run().log
    assert isinstance(log, pd.DataFrame)
    assert log["total"].tail(8).mean() < log["total"].head(4).mean()
