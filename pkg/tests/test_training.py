import json

import pytest
import torch

from phed.data import SyntheticSpec, generate_synthetic_corpus
from phed.model import ModelConfig, PhedModel, make_batch, parameter_checksums
from phed.numerics import RngState
from phed.training import (
    TrainConfig,
    Trainer,
    TrainingError,
    freeze_stages,
    train_all,
    trainable_parameters,
)
from phed.losses import AnnealSchedule, stage_loss

from conftest import tiny_model


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SyntheticSpec(n_pairs=120, seed=9))


def quick_config(**kw):
    base = dict(epochs_per_stage=1, base_epochs=1, batch_size=8, save_every=5, learning_rate=3e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs_per_stage=0)


def test_freeze_then_step(corpus):
    vocab = corpus.vocabulary()
    model = tiny_model(len(vocab))
    freeze_stages(model, 1)
    params = trainable_parameters(model, 2)
    assert params and all(model.stage_tag(n) == 2 for n, _ in params)
    opt = torch.optim.Adam([p for _, p in params], lr=1e-2)
    before = parameter_checksums(model)
    snap = {n: p.detach().clone() for n, p in params}
    batch = make_batch(corpus.train[:4], vocab)
    total, _ = stage_loss(model.forward_train(batch, 2, RngState(0)), model, AnnealSchedule(1), 1)
    total.backward()
    opt.step()
    after = parameter_checksums(model)
    assert before[0] == after[0] and before[1] == after[1] and before[3] == after[3]
    assert any(not torch.equal(snap[n], p) for n, p in params)
    frozen_ids = {id(p) for n, p in model.named_parameters() if model.stage_tag(n) != 2}
    assert not any(id(p) in frozen_ids for p in opt.state)
    assert all(p.grad is None for n, p in model.named_parameters() if model.stage_tag(n) < 2)


def test_full_run_freezing_lambda_and_depth(tmp_path, corpus):
    vocab = corpus.vocabulary()
    model = tiny_model(len(vocab))
    trainer = Trainer(model, corpus, vocab, quick_config(), tmp_path)
    reports = trainer.train_all()
    assert [r.stage for r in reports] == [0, 1, 2, 3]
    for r in reports[2:]:
        assert r.frozen_unchanged(r.stage - 1)
        assert r.checksums_pre[r.stage] != r.checksums_post[r.stage]
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    spe = trainer.steps_per_epoch
    for phase in (1, 2, 3):
        lam = [r["lam"] for r in rows if r["phase"] == phase]
        assert lam[0] == 0.0 and all(a <= b for a, b in zip(lam, lam[1:]))
        assert all(l == 1.0 for l in lam[spe:])
        assert all(r["L_KL"] >= 0 and r["L_KL_c"] >= 0 for r in rows if r["phase"] == phase)
        assert all(r["L_zc_fid"] == 0.0 for r in rows if r["phase"] == 1)
    assert len(model.base_decoder) + sum(len(s.decoder) for s in model.stages) == model.config.decoder_depth(3)
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()
    assert (tmp_path / "checkpoints" / "phase2_epoch0.ckpt").exists()


def test_single_aspect_is_plain_cvae(tmp_path, corpus):
    from phed.data import CorpusSplit, DialoguePair

    strip = lambda ps: [DialoguePair(p.message, p.response, p.attributes[:1]) for p in ps]
    k1 = CorpusSplit(strip(corpus.train), strip(corpus.validation), strip(corpus.test))
    vocab = corpus.vocabulary()
    model = PhedModel(ModelConfig(vocab_size=len(vocab), labels_per_aspect=[3], hidden=16, d_z=4), RngState(0))
    reports = train_all(model, k1, quick_config(), vocab, tmp_path)
    assert [r.stage for r in reports] == [0, 1]


def test_missing_aspect_labels(corpus):
    from phed.data import CorpusSplit, DialoguePair

    strip = lambda ps: [DialoguePair(p.message, p.response, p.attributes[:1]) for p in ps]
    k1 = CorpusSplit(strip(corpus.train), [], [])
    vocab = corpus.vocabulary()
    trainer = Trainer(tiny_model(len(vocab)), k1, vocab, quick_config())
    with pytest.raises(TrainingError, match="aspect 2"):
        trainer.train_stage(2)


def test_smoothed_loss_decreases(corpus):
    vocab = corpus.vocabulary()
    trainer = Trainer(tiny_model(len(vocab)), corpus, vocab, quick_config(epochs_per_stage=4))
    trainer.train_stage(0)
    trainer.train_stage(1)
    totals = [r["total"] for r in trainer.history if r["phase"] == 1]
    w = 10
    assert sum(totals[-w:]) / w < sum(totals[:w]) / w


def test_resume_mid_phase_is_bit_exact(tmp_path, corpus):
    vocab = corpus.vocabulary()
    full_dir, part_dir = tmp_path / "full", tmp_path / "part"
    Trainer(tiny_model(len(vocab)), corpus, vocab, quick_config(epochs_per_stage=2), full_dir).train_all()

    # an interrupted run: phases 0 and 1, then phase 2 stopped after its first epoch
    cfg = quick_config(epochs_per_stage=2)
    t = Trainer(tiny_model(len(vocab)), corpus, vocab, cfg, part_dir)
    t.train_stage(0)
    t.train_stage(1)
    object.__setattr__(cfg, "epochs_per_stage", 1)
    t.train_stage(2)
    mid = part_dir / "checkpoints" / "phase2_epoch0.ckpt"
    # the step-level rolling checkpoint inside epoch 0 of phase 2
    object.__setattr__(cfg, "epochs_per_stage", 2)
    resumed = Trainer(tiny_model(len(vocab), seed=99), corpus, vocab, cfg, part_dir)
    resumed.train_all(resume_path=mid)

    a = (full_dir / "metrics.jsonl").read_text()
    b = (part_dir / "metrics.jsonl").read_text()
    assert a == b
    fa = (full_dir / "checkpoints" / "final.ckpt").read_bytes()
    fb = (part_dir / "checkpoints" / "final.ckpt").read_bytes()
    assert fa == fb


def test_resume_from_rolling_step_checkpoint(tmp_path, corpus):
    import shutil

    vocab = corpus.vocabulary()
    cfg = quick_config(epochs_per_stage=1, save_every=4)
    full = Trainer(tiny_model(len(vocab)), corpus, vocab, cfg, tmp_path / "full")
    kept = tmp_path / "step8.ckpt"
    real_save = full._save

    def save(name, optimizer, counters):
        path = real_save(name, optimizer, counters)
        if name == "latest.ckpt" and counters["phase"] == 1 and counters["phase_step"] == 8:
            shutil.copy(path, kept)
        return path

    full._save = save
    full.train_all()
    assert kept.exists()

    part_dir = tmp_path / "part"
    (part_dir / "checkpoints").mkdir(parents=True)
    log = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    (part_dir / "metrics.jsonl").write_text("".join(l + "\n" for l in log[:40]))
    Trainer(tiny_model(len(vocab), seed=5), corpus, vocab, cfg, part_dir).train_all(resume_path=kept)
    assert (part_dir / "metrics.jsonl").read_text() == (tmp_path / "full" / "metrics.jsonl").read_text()
    assert (part_dir / "checkpoints" / "final.ckpt").read_bytes() == (tmp_path / "full" / "checkpoints" / "final.ckpt").read_bytes()
