"""Deterministic training loop with JSON-lines metrics and resumable checkpoints.

Every batch is a pure function of ``(seed, step)``: scene ``i`` of step
``t`` is rendered and augmented from seeds derived from ``(seed, t, i)``.
A resumed run therefore sees exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from golo import config as config_io
from golo.checkpoint import decode_text, encode_text, load_checkpoint, save_checkpoint
from golo.config import Config
from golo.data import augment, collate, generate_scene, scene_seed
from golo.errors import EvaluationError, GenerationError, TrainingAborted
from golo.losses import total_loss
from golo.model import GOLO
from golo.optim import AdamState, adamw_step, clip_grad_norm, lr_at
from golo.tensor import Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "total", "l_cls", "l_l1", "l_giou", "l_aux_bbox", "l_aux_cls", "lr")
CHECKPOINT_NAME = "checkpoint.golo"
LOG_NAME = "metrics.jsonl"
GENERATION_ATTEMPTS = 5


def training_scene(cfg: Config, step: int, index: int):
    for attempt in range(GENERATION_ATTEMPTS):
        try:
            scene = generate_scene(scene_seed(cfg.seed, step, index, attempt), cfg.data)
            break
        except GenerationError:
            continue
    else:
        raise GenerationError(f"no placeable scene for step {step} item {index} (seed {cfg.seed})")
    return augment(scene, scene_seed(cfg.seed, step, index, 1_000_003), cfg.data)


def training_batch(cfg: Config, step: int):
    return collate([training_scene(cfg, step, i) for i in range(cfg.schedule.batch_size)])


@dataclass
class TrainResult:
    steps: int
    log_path: Path
    checkpoint_path: Path
    last: dict


class Trainer:
    def __init__(self, cfg: Config):
        self.cfg = cfg.validate()
        self.model = GOLO(cfg.model, seed=cfg.seed)
        self.state = AdamState()
        self.step = 0

    # checkpoint entries -------------------------------------------------
    def entries(self) -> dict:
        out = {f"param/{n}": p.data for n, p in self.model.named_parameters()}
        for n, _ in self.model.named_parameters():
            if n in self.state.m:
                out[f"adam_m/{n}"] = self.state.m[n]
                out[f"adam_v/{n}"] = self.state.v[n]
        out["meta/step"] = np.array([self.step], dtype=np.float32)
        out["meta/adam_step"] = np.array([self.state.step], dtype=np.float32)
        # the output path says where a run lives, not what it computes
        snapshot = dataclasses.replace(self.cfg, out_dir="")
        out["meta/config"] = encode_text(snapshot.dumps())
        return out

    def restore(self, entries: dict) -> None:
        for n, p in self.model.named_parameters():
            key = f"param/{n}"
            if key not in entries or entries[key].shape != p.data.shape:
                raise EvaluationError(f"checkpoint does not match model at {n}")
            p.data[...] = entries[key]
            if f"adam_m/{n}" in entries:
                self.state.m[n] = entries[f"adam_m/{n}"].astype(p.data.dtype)
                self.state.v[n] = entries[f"adam_v/{n}"].astype(p.data.dtype)
        self.step = int(entries["meta/step"][0])
        self.state.step = int(entries["meta/adam_step"][0])

    # one optimisation step ----------------------------------------------
    def train_step(self) -> dict:
        cfg = self.cfg
        images, targets = training_batch(cfg, self.step)
        self.model.zero_grad()
        det = self.model(Tensor(images))
        losses = total_loss(det.global_out, det.local_out, targets, cfg.loss)
        values = losses.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingAborted(f"non-finite loss at step {self.step + 1}: {values}")
        losses.total.backward()
        named = list(self.model.named_parameters())
        grads = {n: p.grad for n, p in named}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingAborted(f"non-finite gradient at step {self.step + 1}")
        clip_grad_norm(grads, cfg.optim.clip_norm)
        lr = lr_at(self.step, cfg.optim.lr, cfg.schedule.total_steps, (cfg.schedule.drop1, cfg.schedule.drop2))
        o = cfg.optim
        adamw_step({n: p.data for n, p in named}, grads, self.state, lr, o.weight_decay, o.beta1, o.beta2, o.eps)
        self.step += 1
        record = {"step": self.step}
        record.update({k: values[k] for k in LOG_FIELDS[1:-1]})
        record["lr"] = lr
        return record


def load_trainer(path) -> Trainer:
    entries = load_checkpoint(path)
    cfg = config_io.loads(decode_text(entries["meta/config"]))
    trainer = Trainer(cfg)
    trainer.restore(entries)
    return trainer


def load_model(path) -> tuple[GOLO, Config]:
    trainer = load_trainer(path)
    return trainer.model, trainer.cfg


def train(cfg: Config, out_dir=None, resume: Optional[str] = None, max_steps: Optional[int] = None,
          progress_every: int = 0) -> TrainResult:
    """Run (or continue) training up to ``total_steps`` or ``max_steps`` optimisation steps.

    On a non-finite loss or gradient the run stops with ``TrainingAborted``
    and the last periodic checkpoint is left untouched.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path, ckpt_path = out / LOG_NAME, out / CHECKPOINT_NAME
    if resume:
        trainer = load_trainer(resume)
        trainer.cfg.out_dir = cfg.out_dir
        _truncate_log(log_path, trainer.step)
    else:
        trainer = Trainer(cfg)
        log_path.write_text("", encoding="utf-8")
    cfg = trainer.cfg
    stop = cfg.schedule.total_steps if max_steps is None else min(cfg.schedule.total_steps, max_steps)
    record = {}
    with open(log_path, "a", encoding="utf-8") as fh:
        while trainer.step < stop:
            record = trainer.train_step()
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            if progress_every and trainer.step % progress_every == 0:
                log.info("step %d total %.4f", trainer.step, record["total"])
            if trainer.step % cfg.schedule.checkpoint_every == 0 or trainer.step == stop:
                save_checkpoint(ckpt_path, trainer.entries())
    return TrainResult(trainer.step, log_path, ckpt_path, record)


def _truncate_log(path: Path, step: int) -> None:
    """Keep only log lines up to ``step`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip() and json.loads(line)["step"] <= step:
            keep.append(line + "\n")
    path.write_text("".join(keep), encoding="utf-8")


def read_log(path) -> list:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def moving_average(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
