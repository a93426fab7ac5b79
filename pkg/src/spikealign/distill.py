"""Pre-training by embedding distillation.

The student's image and text embeddings are pulled towards precomputed
teacher embeddings with the summed cosine distance; image and text loops
run one after the other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .encoders import DualEncoder, apply_template
from .errors import ContractError, DataError, DimensionError, DomainError
from .io import TeacherStore
from .optim import make_optimizer
from .tensor import Tensor, _record, backward


def cosine_align_loss(student: Tensor, teacher, ids: Sequence[str] | None = None) -> Tensor:
    """Sum over items of ``1 - cos(student_i, teacher_i)``.

    Accumulated in float64.  The teacher is a constant; only the student
    receives gradient.
    """
    s = student.data.astype(np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise DimensionError(f"cosine_align_loss: student {s.shape} vs teacher {t.shape}")
    s2, t2 = s.reshape(-1, s.shape[-1]), t.reshape(-1, t.shape[-1])
    ss = np.sum(s2 * s2, axis=1)
    tt = np.sum(t2 * t2, axis=1)
    for side, norms in (("student", ss), ("teacher", tt)):
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            item = ids[zero[0]] if ids is not None else int(zero[0])
            raise DomainError(f"cosine_align_loss: zero-norm {side} vector for item {item!r}")
    dot = np.sum(s2 * t2, axis=1)
    denom = np.sqrt(ss * tt)
    cos = dot / denom
    loss = np.asarray(np.sum(1.0 - cos), dtype=student.dtype)
    shape = student.shape

    def grad(g):
        d = -(t2 / denom[:, None] - (cos / ss)[:, None] * s2)
        return ((float(g) * d).reshape(shape).astype(student.dtype),)

    return _record("cosine_align_loss", loss, (student,), grad)


def lr_at(epoch: int, lr0: float = 5e-3, lr_final: float = 5e-4, decay_epochs: int = 50) -> float:
    """Cosine decay from ``lr0`` to ``lr_final`` over ``decay_epochs``, then constant.

    Written as a convex combination so both endpoints are exact.
    """
    if epoch < 0:
        raise ContractError(f"lr_at: epoch must be >= 0, got {epoch}")
    if epoch > decay_epochs:
        return lr_final
    c = (1.0 + math.cos(math.pi * epoch / decay_epochs)) / 2.0
    return c * lr0 + (1.0 - c) * lr_final


@dataclass
class PretrainCfg:
    epochs_img: int = 200
    batch_img: int = 196
    epochs_txt: int = 100
    batch_txt: int = 256
    lr0: float = 5e-3
    lr_final: float = 5e-4
    decay_epochs: int = 50
    text_lr: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs_img", "batch_img", "epochs_txt", "batch_txt", "decay_epochs"):
            if getattr(self, name) < 0 or (name.startswith("batch") and getattr(self, name) == 0):
                raise ContractError(f"pretrain {name} must be positive")
        if min(self.lr0, self.lr_final, self.text_lr) < 0:
            raise ContractError("learning rates must be >= 0")

    @classmethod
    def from_config(cls, cfg: Config) -> "PretrainCfg":
        return cls(cfg["pretrain.epochs_img"], cfg["pretrain.batch_img"], cfg["pretrain.epochs_txt"],
                   cfg["pretrain.batch_txt"], cfg["pretrain.lr0"], cfg["pretrain.lr_final"],
                   cfg["pretrain.decay_epochs"], cfg["pretrain.text_lr"], cfg["seed"])

    def image_lr(self, epoch: int) -> float:
        return lr_at(epoch, self.lr0, self.lr_final, self.decay_epochs)


def build_prompts(labels: Sequence[str], templates: Sequence[str]) -> list[str]:
    """Every template applied to every label, label-major."""
    return [apply_template(t, label) for label in labels for t in templates]


def epoch_order(n: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def _teacher_matrix(store: TeacherStore, ids: Sequence[str], kind: str, dim: int) -> np.ndarray:
    if store.kind != kind:
        raise DataError(f"teacher store holds {store.kind}, expected {kind}")
    if store.dim != dim:
        raise DataError(f"teacher dim {store.dim} != model output dim {dim}")
    missing = [i for i in ids if i not in store]
    if missing:
        raise DataError(f"missing {kind} teacher record for id {missing[0]!r}")
    return store.matrix(list(ids))


def _run_loop(encode: Callable, inputs, teacher: np.ndarray, ids: list[str], params: dict,
              cfg: Config, epochs: int, batch: int, lr_fn: Callable, split: int, seed: int,
              log: Callable | None) -> list[dict]:
    opt = make_optimizer(cfg, params)
    history = []
    n = len(ids)
    for epoch in range(epochs):
        order = epoch_order(n, seed, epoch, split)
        lr = lr_fn(epoch)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            loss = cosine_align_loss(encode(inputs, idx), teacher[idx], [ids[i] for i in idx])
            backward(loss)
            opt.step(lr)
            total += float(loss.data)
        rec = {"epoch": epoch, "split": "image" if split == 0 else "text", "loss": total, "lr": lr}
        history.append(rec)
        if log is not None:
            log(rec)
    return history


def pretrain(model: DualEncoder, images: Sequence[tuple[str, np.ndarray]], prompts: Sequence[str],
             image_teacher: TeacherStore | None, text_teacher: TeacherStore | None, cfg: Config,
             log: Callable[[dict], None] | None = None) -> list[dict]:
    """Distil image then text embeddings; returns the per-epoch loss log.

    ``images`` are ``(id, raw [H, W, C] pixels)``; prompt strings double as
    text teacher ids.  Only model parameters are written.
    """
    pcfg = PretrainCfg.from_config(cfg)
    out_dim = model.image_cfg.out_dim
    history: list[dict] = []
    if images and pcfg.epochs_img:
        ids = [i for i, _ in images]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate image ids in pre-training set")
        teacher = _teacher_matrix(image_teacher, ids, "image_embedding", out_dim)
        pixels = model.prepare_images([img for _, img in images])
        history += _run_loop(lambda x, idx: model.encode_images(x[idx], normalized=True), pixels,
                             teacher, ids, model.image_params(), cfg, pcfg.epochs_img,
                             pcfg.batch_img, pcfg.image_lr, 0, pcfg.seed, log)
    if prompts and pcfg.epochs_txt:
        ids = list(prompts)
        if len(set(ids)) != len(ids):
            raise DataError("duplicate prompts in text pre-training set")
        teacher = _teacher_matrix(text_teacher, ids, "text_embedding", out_dim)
        tokens = model.text.token_ids(ids)
        history += _run_loop(lambda x, idx: model.text(x[idx]), tokens, teacher, ids,
                             model.text_params(), cfg, pcfg.epochs_txt, pcfg.batch_txt,
                             lambda _: pcfg.text_lr, 1, pcfg.seed, log)
    return history
