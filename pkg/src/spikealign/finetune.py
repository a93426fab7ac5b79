"""Dual-loss fine-tuning, zero-shot classification and label-set robustness runs."""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .distill import epoch_order
from .encoders import DualEncoder, apply_template
from .errors import ConfigError, ContractError, DataError, DimensionError, DomainError
from .io import TeacherStore
from .optim import make_optimizer
from .tensor import (Tensor, _record, add, backward, l2_normalize, matmul, max_index, no_grad,
                     scale, softmax, transpose)


@dataclass(frozen=True)
class LabelSet:
    labels: tuple[str, ...]
    template: str = "A photo of a {}."

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise DataError("label set has duplicate labels")
        if "{}" not in self.template:
            raise DataError(f"template {self.template!r} lacks a {{}} slot")

    def __len__(self) -> int:
        return len(self.labels)

    def prompts(self) -> list[str]:
        return [apply_template(self.template, label) for label in self.labels]


@dataclass
class FinetuneCfg:
    lam: float = 1.0
    eps: float = 1e-10
    epochs: int = 400
    batch: int = 196
    lr: float = 5e-4
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"finetune lambda must be >= 0, got {self.lam}")
        if self.eps <= 0:
            raise ConfigError(f"finetune eps must be > 0, got {self.eps}")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("finetune batch must be >= 1 and epochs >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")

    @classmethod
    def from_config(cls, cfg: Config) -> "FinetuneCfg":
        return cls(cfg["finetune.lambda"], cfg["finetune.eps"], cfg["finetune.epochs"],
                   cfg["finetune.batch"], cfg["finetune.lr"], cfg["eval.temperature"], cfg["seed"])


# -- losses ---------------------------------------------------------------------


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def ce_loss(probs: Tensor, target) -> Tensor:
    """``-(1/n) sum t log y`` for one-hot targets, accumulated in float64."""
    y = _rows(probs.data).astype(np.float64)
    t = _rows(np.asarray(target, dtype=np.float64))
    if y.shape != t.shape:
        raise DimensionError(f"ce_loss: probs {y.shape} vs target {t.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise ContractError("ce_loss: target must be one-hot")
    if np.any(y <= 0):
        raise DomainError("ce_loss: probabilities must be strictly positive")
    n = y.shape[0]
    loss = -np.sum(t * np.log(y)) / n
    shape = probs.shape

    def grad(g):
        return ((float(g) * -t / (n * y)).reshape(shape).astype(probs.dtype),)

    return _record("ce_loss", np.asarray(loss, dtype=probs.dtype), (probs,), grad)


def kl_loss(teacher, probs: Tensor, eps: float = 1e-10) -> Tensor:
    """``(1/n) sum_i sum_k h log((h + eps) / (y + eps))`` with constant teacher ``h``."""
    h = _rows(np.asarray(teacher, dtype=np.float64))
    y = _rows(probs.data).astype(np.float64)
    if y.shape != h.shape:
        raise DimensionError(f"kl_loss: teacher {h.shape} vs probs {y.shape}")
    if np.any(h < 0) or np.any(y < 0):
        raise DomainError("kl_loss: negative probability")
    for name, p in (("teacher", h), ("student", y)):
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
            raise ContractError(f"kl_loss: {name} rows must sum to 1")
    n = y.shape[0]
    loss = np.sum(h * np.log((h + eps) / (y + eps))) / n
    shape = probs.shape

    def grad(g):
        return ((float(g) * -h / (n * (y + eps))).reshape(shape).astype(probs.dtype),)

    return _record("kl_loss", np.asarray(loss, dtype=probs.dtype), (probs,), grad)


def finetune_loss(probs: Tensor, target, teacher, lam: float, eps: float = 1e-10) -> Tensor:
    kl = kl_loss(teacher, probs, eps)
    if lam == 0:
        return kl
    return add(kl, scale(ce_loss(probs, target), lam))


# -- classification ------------------------------------------------------------------


def label_embeddings(model: DualEncoder, labelset: LabelSet) -> Tensor:
    """Normalised prompt embeddings [K, D]; computed without gradient."""
    if len(labelset) < 2:
        raise ContractError("classification needs at least 2 labels")
    with no_grad():
        return l2_normalize(model.encode_texts(labelset.prompts()))


def class_probs(image_emb: Tensor, label_emb: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over cosine similarities of each image with each label."""
    sims = matmul(l2_normalize(image_emb), transpose(label_emb, (1, 0)))
    if temperature != 1.0:
        sims = scale(sims, 1.0 / temperature)
    return softmax(sims, axis=-1)


def classify(model: DualEncoder, images, labelset: LabelSet, *, temperature: float = 1.0,
             label_emb: Tensor | None = None, normalized: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Zero-shot class probabilities [B, K] and argmax predictions [B]."""
    if label_emb is None:
        label_emb = label_embeddings(model, labelset)
    with no_grad():
        probs = class_probs(model.encode_images(images, normalized=normalized), label_emb, temperature)
    return probs.data, max_index(probs, axis=-1)


def evaluate(model: DualEncoder, images: np.ndarray, classes: Sequence[int], labelset: LabelSet,
             *, temperature: float = 1.0, batch: int = 256, label_emb: Tensor | None = None,
             correct_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Accuracy over pre-normalised images.  ``correct_fn`` maps predictions to hits."""
    if len(images) == 0:
        raise DataError("evaluation set is empty")
    if label_emb is None:
        label_emb = label_embeddings(model, labelset)
    classes = np.asarray(classes)
    preds = np.concatenate([
        classify(model, images[i:i + batch], labelset, temperature=temperature,
                 label_emb=label_emb, normalized=True)[1]
        for i in range(0, len(images), batch)])
    hits = correct_fn(preds) if correct_fn is not None else preds == classes
    return float(np.mean(hits))


def finetune(model: DualEncoder, train: Sequence[tuple[str, np.ndarray, int]], labelset: LabelSet,
             teacher_probs: TeacherStore, cfg: Config,
             eval_set: Sequence[tuple[str, np.ndarray, int]] | None = None,
             log: Callable[[dict], None] | None = None) -> list[dict]:
    """Minimise KL(teacher || student) + lambda * CE over image-side parameters.

    The text encoder is never handed to the optimiser and label embeddings
    are computed without gradient, so its parameters stay bit-identical.
    """
    fcfg = FinetuneCfg.from_config(cfg)
    k = len(labelset)
    ids = [i for i, _, _ in train]
    classes = np.array([c for _, _, c in train], dtype=np.int64)
    if np.any(classes >= k) or np.any(classes < 0):
        raise DataError(f"training class index out of range for {k} labels")
    if teacher_probs.kind != "class_probabilities":
        raise DataError(f"teacher store holds {teacher_probs.kind}, expected class_probabilities")
    if teacher_probs.dim != k:
        raise DataError(f"teacher probability records have {teacher_probs.dim} classes, label set has {k}")
    teacher = teacher_probs.matrix(ids)
    onehot = np.eye(k, dtype=np.float32)[classes]
    pixels = model.prepare_images([img for _, img, _ in train])
    if eval_set is not None:
        eval_pixels = model.prepare_images([img for _, img, _ in eval_set])
        eval_classes = [c for _, _, c in eval_set]
    else:
        eval_pixels, eval_classes = pixels, classes
    label_emb = label_embeddings(model, labelset)
    opt = make_optimizer(cfg, model.image_params())
    history = []
    for epoch in range(fcfg.epochs):
        order = epoch_order(len(ids), fcfg.seed, epoch, 2)
        total, hits = 0.0, 0
        for start in range(0, len(ids), fcfg.batch):
            idx = order[start:start + fcfg.batch]
            opt.zero_grad()
            probs = class_probs(model.encode_images(pixels[idx], normalized=True), label_emb,
                                fcfg.temperature)
            loss = finetune_loss(probs, onehot[idx], teacher[idx], fcfg.lam, fcfg.eps)
            backward(loss)
            opt.step(fcfg.lr)
            total += float(loss.data) * len(idx)
            hits += int(np.sum(max_index(probs, axis=-1) == classes[idx]))
        acc = evaluate(model, eval_pixels, eval_classes, labelset, temperature=fcfg.temperature,
                       label_emb=label_emb)
        rec = {"epoch": epoch, "split": "finetune", "loss": total / len(ids),
               "train_acc": hits / len(ids), "eval_acc": acc}
        history.append(rec)
        if log is not None:
            log(rec)
    return history


# -- robustness ------------------------------------------------------------------------


def expanded_labelset(labelset: LabelSet, factor: int, distractors: Sequence[str]) -> LabelSet:
    """Original labels followed by the first ``(factor - 1) * K`` distractors."""
    if factor < 1:
        raise ContractError(f"expansion factor must be >= 1, got {factor}")
    need = (factor - 1) * len(labelset)
    pool = [d for d in distractors if d not in labelset.labels]
    if len(pool) < need:
        raise DataError(f"expand x{factor} needs {need} distractor labels, only {len(pool)} available")
    return LabelSet(labelset.labels + tuple(pool[:need]), labelset.template)


def replaced_labelset(labelset: LabelSet, percent: float, substitutes: dict[str, str],
                      seed: int) -> LabelSet:
    """Swap ``ceil(p * K)`` seed-chosen labels for their substitutes; class indices keep their meaning."""
    if not 0 <= percent <= 100:
        raise ContractError(f"replacement rate must be in [0, 100], got {percent}")
    k = len(labelset)
    count = math.ceil(round(percent / 100.0 * k, 9))
    chosen = np.random.default_rng(seed).permutation(k)[:count]
    labels = list(labelset.labels)
    for i in sorted(chosen):
        try:
            labels[i] = substitutes[labels[i]]
        except KeyError:
            raise DataError(f"no substitute label for {labels[i]!r}") from None
    return LabelSet(tuple(labels), labelset.template)


def robustness_suite(model: DualEncoder, images: np.ndarray, classes: Sequence[int], labelset: LabelSet,
                     *, expand: Sequence[int] = (), replace: Sequence[float] = (),
                     distractors: Sequence[str] = (), substitutes: dict[str, str] | None = None,
                     seeds: Sequence[int] = (0, 1, 2), temperature: float = 1.0) -> list[dict]:
    """Accuracy under label-set expansion and label replacement.

    Expansion keeps ground truth: a hit must select the original label.
    Replacement below 100% runs once per seed and adds a summary record with
    the mean and (population) variance.
    """
    classes = np.asarray(classes)
    records = []
    for factor in expand:
        ls = expanded_labelset(labelset, int(factor), distractors)
        acc = evaluate(model, images, classes, ls, temperature=temperature)
        records.append({"setting": f"expand_x{int(factor)}", "seed": None, "candidates": len(ls),
                        "accuracy": acc})
    for percent in replace:
        run_seeds = list(seeds) if percent < 100 else list(seeds)[:1]
        accs = []
        for seed in run_seeds:
            ls = replaced_labelset(labelset, percent, substitutes or {}, int(seed))
            acc = evaluate(model, images, classes, ls, temperature=temperature)
            accs.append(acc)
            records.append({"setting": f"replace_{percent:g}", "seed": int(seed), "candidates": len(ls),
                            "accuracy": acc})
        if percent < 100:
            records.append({"setting": f"replace_{percent:g}", "seed": "summary", "candidates": len(labelset),
                            "accuracy": statistics.fmean(accs), "mean": statistics.fmean(accs),
                            "variance": statistics.pvariance(accs), "runs": len(accs)})
    return records
