"""Progressive multi-phase training.

Phase 0 (optional) warms up the base encoder/decoder on reconstruction alone.
Phase ``i`` then trains stage ``i`` with every earlier stage frozen: frozen
parameters get ``requires_grad = False`` and are left out of the optimizer.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from . import checkpoint as ckpt
from .data import CorpusSplit, DialoguePair, Vocabulary
from .losses import AnnealSchedule, LossBreakdown, LossFlags, reconstruction_loss, stage_loss
from .model import PhedModel, make_batch, parameter_checksums
from .numerics import RngState

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs_per_stage: int = 4
    base_epochs: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    warmup_steps: int = 0
    drop_cls: bool = False
    drop_zdissim: bool = False
    drop_zc_losses: bool = False
    clip_norm: float = 1.0
    pretrain_base: bool = True
    select_by: str = "loss"
    save_every: int = 500

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.select_by not in ("loss", "bleu"):
            raise ValueError("select_by must be 'loss' or 'bleu'")

    @property
    def flags(self) -> LossFlags:
        return LossFlags(self.drop_cls, self.drop_zdissim, self.drop_zc_losses)


@dataclass
class PhaseReport:
    stage: int
    epoch_means: list[dict] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0
    checksums_pre: dict = field(default_factory=dict)
    checksums_post: dict = field(default_factory=dict)
    clamp_hits: int = 0

    def frozen_unchanged(self, upto: int) -> bool:
        return all(self.checksums_pre[j] == self.checksums_post[j] for j in self.checksums_pre if j <= upto)


def freeze_stages(model: PhedModel, upto: int) -> None:
    """Freeze stage 0 (base) through stage ``upto``; unfreeze the rest."""
    for name, p in model.named_parameters():
        p.requires_grad_(model.stage_tag(name) > upto)
    for stage in model.stages:
        stage.frozen = stage.index <= upto


def trainable_parameters(model: PhedModel, stage: int) -> list[tuple[str, torch.nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad and model.stage_tag(n) <= stage]


def _step_rng(seed: int, phase: int, step: int) -> RngState:
    return RngState((seed * 7_919 + phase * 1_000_003 + step * 104_729 + 17) % 2**64)


def _epoch_order(seed: int, phase: int, epoch: int, n: int) -> list[int]:
    return RngState((seed * 31 + phase * 65_537 + epoch * 257 + 3) % 2**64).permutation(n)


def base_loss(model: PhedModel, batch, rng: RngState):
    lp = model.forward_base(batch, rng)
    lm = reconstruction_loss(lp, batch.y_out, batch.out_mask)
    v = float(lm.detach())
    return lm, LossBreakdown(0.0, 0.0, v, 0.0, 0.0, 0.0, 0.0, 0.0, v)


@torch.no_grad()
def validation_loss(model: PhedModel, pairs: Sequence[DialoguePair], vocab: Vocabulary, stage: int, seed: int, batch_size=64) -> float:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        for start in range(0, len(pairs), batch_size):
            batch = make_batch(pairs[start : start + batch_size], vocab)
            rng = _step_rng(seed, 10_000 + stage, start)
            lp = model.forward_base(batch, rng) if stage == 0 else model.forward_train(batch, stage, rng).log_probs
            n = int(batch.out_mask.sum())
            total += float(reconstruction_loss(lp, batch.y_out, batch.out_mask)) * n
            count += n
    finally:
        model.train(was_training)
    return total / max(count, 1)


class Trainer:
    """Runs phases over a corpus, writing logs and checkpoints under ``run_dir``."""

    def __init__(
        self,
        model: PhedModel,
        corpus: CorpusSplit,
        vocab: Vocabulary,
        config: TrainConfig,
        run_dir: str | Path | None = None,
        extra_meta: dict | None = None,
    ):
        self.model = model
        self.corpus = corpus
        self.vocab = vocab
        self.config = config
        self.extra_meta = extra_meta or {}
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.log_path = self.run_dir / "metrics.jsonl" if self.run_dir else None
        self.history: list[dict] = []

    # -- bookkeeping ----------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.corpus.train) / self.config.batch_size)

    @property
    def warmup_steps(self) -> int:
        return self.config.warmup_steps or self.steps_per_epoch

    def _log(self, record: dict) -> None:
        self.history.append(record)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def _truncate_log(self, phase: int, step: int) -> None:
        keep = []
        if self.log_path and self.log_path.exists():
            for line in self.log_path.read_text().splitlines():
                rec = json.loads(line)
                if (rec["phase"], rec["step"]) < (phase, step):
                    keep.append(line)
            self.log_path.write_text("".join(l + "\n" for l in keep))
        self.history = [json.loads(l) for l in keep]

    def _save(self, name: str, optimizer, counters: dict) -> Path | None:
        if not self.run_dir:
            return None
        path = self.run_dir / "checkpoints" / name
        ckpt.save_checkpoint(
            path,
            self.model,
            self.vocab,
            self.config.seed,
            counters=counters,
            optimizer=optimizer,
            extra={"train_config": asdict(self.config), **self.extra_meta},
        )
        return path

    # -- phases ---------------------------------------------------------------

    def _optimizer(self, params):
        c = self.config
        return torch.optim.Adam([p for _, p in params], lr=c.learning_rate, betas=(c.beta1, c.beta2), eps=c.eps)

    def train_stage(self, stage: int, resume: dict | None = None) -> PhaseReport:
        """Train phase ``stage`` (0 = base warm-up). ``resume`` is a loaded checkpoint's
        ``(meta, tensors)`` pair positioned inside this phase."""
        model, c = self.model, self.config
        if stage > model.num_stages:
            raise TrainingError(f"no stage {stage} in a {model.num_stages}-stage model")
        if stage >= 1 and self.corpus.num_aspects < stage:
            raise TrainingError(f"corpus has no labels for aspect {stage}")
        # the base joins phase 1 only when it was not warmed up on its own
        upto = -1 if stage == 0 or (stage == 1 and not c.pretrain_base) else stage - 1
        freeze_stages(model, upto)
        for name, p in model.named_parameters():
            if model.stage_tag(name) > stage:
                p.requires_grad_(False)
        params = trainable_parameters(model, stage)
        optimizer = self._optimizer(params)
        schedule = AnnealSchedule(self.warmup_steps)
        epochs = c.base_epochs if stage == 0 else c.epochs_per_stage
        train = self.corpus.train
        spe = self.steps_per_epoch

        report = PhaseReport(stage)
        report.checksums_pre = parameter_checksums(model)
        phase_step, start_epoch, start_batch = 0, 0, 0
        best_val, best_epoch = math.inf, -1
        epoch_sums: list[dict] = []
        if resume is not None:
            meta, tensors = resume
            cnt = meta["counters"]
            ckpt.load_model_state(model, tensors)
            ckpt.load_optimizer_state(model, optimizer, tensors, meta["optimizer_steps"])
            phase_step, start_epoch, start_batch = cnt["phase_step"], cnt["epoch"], cnt["batch"]
            best_val, best_epoch = cnt["best_val"], cnt["best_epoch"]
            report.val_losses = list(cnt.get("val_losses", []))
            report.checksums_pre = cnt.get("checksums_pre", report.checksums_pre)
            epoch_sums = cnt.get("epoch_sums", [])
            report.checksums_pre = {int(k): v for k, v in report.checksums_pre.items()}
            self._truncate_log(stage, phase_step)
        t0 = time.perf_counter()
        model.train()
        for latent_net in model.modules():
            if hasattr(latent_net, "clamp_hits"):
                latent_net.clamp_hits = 0

        def counters(epoch, batch_idx):
            return {
                "phase": stage,
                "phase_step": phase_step,
                "epoch": epoch,
                "batch": batch_idx,
                "best_val": best_val,
                "best_epoch": best_epoch,
                "val_losses": report.val_losses,
                "checksums_pre": report.checksums_pre,
                "epoch_sums": epoch_sums,
            }

        for epoch in range(start_epoch, epochs):
            order = _epoch_order(c.seed, stage, epoch, len(train))
            if len(epoch_sums) <= epoch:
                epoch_sums.append({"n": 0})
            sums = epoch_sums[epoch]
            for b in range(start_batch if epoch == start_epoch else 0, spe):
                idx = order[b * c.batch_size : (b + 1) * c.batch_size]
                batch = make_batch([train[k] for k in idx], self.vocab)
                rng = _step_rng(c.seed, stage, phase_step)
                if stage == 0:
                    total, parts = base_loss(model, batch, rng)
                else:
                    record = model.forward_train(batch, stage, rng)
                    total, parts = stage_loss(record, model, schedule, phase_step, c.flags)
                if not math.isfinite(parts.total):
                    raise TrainingError(f"non-finite loss at phase {stage} step {phase_step}: {parts.as_dict()}")
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                if c.clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_([p for _, p in params], c.clip_norm)
                optimizer.step()
                rec = {"phase": stage, "stage": stage, "step": phase_step, "epoch": epoch, **parts.as_dict()}
                self._log(rec)
                for k, v in parts.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                sums["n"] += 1
                phase_step += 1
                if c.save_every and phase_step % c.save_every == 0:
                    self._save("latest.ckpt", optimizer, counters(epoch, b + 1))
            val = validation_loss(model, self.corpus.validation, self.vocab, stage, c.seed) if self.corpus.validation else float(
                sums.get("L_M", 0.0) / max(sums["n"], 1)
            )
            if c.select_by == "bleu" and stage >= 1 and self.corpus.validation:
                from .evaluation import validation_bleu

                val = -validation_bleu(model, self.corpus.validation, self.vocab, stage)
            report.val_losses.append(val)
            if val < best_val:
                best_val, best_epoch = val, epoch
                self._save(f"phase{stage}_best.ckpt", None, counters(epoch + 1, 0))
            self._save(f"phase{stage}_epoch{epoch}.ckpt", optimizer, counters(epoch + 1, 0))
            self._save("latest.ckpt", optimizer, counters(epoch + 1, 0))
            log.info("phase %d epoch %d: val %.4f", stage, epoch, val)

        if self.run_dir and best_epoch != epochs - 1 and best_epoch >= 0:
            _, tensors = ckpt.read_archive(self.run_dir / "checkpoints" / f"phase{stage}_best.ckpt")
            ckpt.load_model_state(model, tensors)
        report.best_epoch = best_epoch
        report.epoch_means = [{k: v / s["n"] for k, v in s.items() if k != "n"} for s in epoch_sums if s["n"]]
        report.wall_time = time.perf_counter() - t0
        report.checksums_post = parameter_checksums(model)
        report.clamp_hits = sum(m.clamp_hits for m in model.modules() if hasattr(m, "clamp_hits"))
        if report.clamp_hits:
            log.warning("phase %d: logvar clamp activated %d times", stage, report.clamp_hits)
        self._save(f"phase{stage}_final.ckpt", None, {**counters(epochs, 0), "phase_done": True})
        self._save("latest.ckpt", None, {**counters(epochs, 0), "phase_done": True})
        return report

    def train_all(self, stages: Sequence[int] | None = None, resume_path: str | Path | None = None) -> list[PhaseReport]:
        phases = list(stages) if stages is not None else list(range(1, self.model.num_stages + 1))
        if stages is None and self.config.pretrain_base:
            phases = [0] + phases
        resume = None
        if resume_path is not None:
            meta, tensors = ckpt.read_archive(resume_path)
            cnt = meta["counters"]
            done = cnt["phase"] if cnt.get("phase_done") else cnt["phase"] - 1
            ckpt.load_model_state(self.model, tensors)
            phases = [p for p in phases if p > done]
            if not cnt.get("phase_done"):
                resume = (meta, tensors)
            self._truncate_log(done + 1 if cnt.get("phase_done") else cnt["phase"], 0 if cnt.get("phase_done") else cnt["phase_step"])
        reports = []
        for p in phases:
            reports.append(self.train_stage(p, resume if resume and resume[0]["counters"]["phase"] == p else None))
            resume = None
        freeze_stages(self.model, self.model.num_stages)
        if self.run_dir:
            self._save("final.ckpt", None, {"phase": phases[-1] if phases else -1, "phase_done": True})
        return reports


def train_stage(model, corpus, stage, config, vocab=None, run_dir=None) -> PhaseReport:
    return Trainer(model, corpus, vocab or corpus.vocabulary(), config, run_dir).train_stage(stage)


def train_all(model, corpus, config, vocab=None, run_dir=None) -> list[PhaseReport]:
    return Trainer(model, corpus, vocab or corpus.vocabulary(), config, run_dir).train_all()
