"""Seeded desk-scale data: a three-class brightness image set plus teachers.

Class ``c`` images have mean brightness inside tercile ``c``.  Teacher
embeddings come from one random prototype per concept; a substitute label
shares its original's prototype, distractors get their own.  Teacher class
probabilities are the softmax of teacher image/prompt cosine similarities.

Run ``python -m spikealign.synthetic OUT_DIR`` to write a complete run
directory including ``desk.cfg``.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import build_prompts
from .encoders import tokenize
from .io import TeacherStore, write_lines, write_manifest, write_store, write_tensor

LABELS = ("dark", "medium", "bright")
SUBSTITUTES = {"dark": "shadowy", "medium": "grey", "bright": "luminous"}
DISTRACTORS = ("tiger", "violin", "canyon", "glacier", "lantern", "orchid",
               "rocket", "walrus", "pretzel", "harbor", "cactus", "trumpet")
TEMPLATES = (
    "A photo of a {}.",
    "A blurry photo of a {}.",
    "A black and white photo of a {}.",
    "A high-contrast photo of a {}.",
    "A photo of a big {}.",
)
EVAL_TEMPLATE = TEMPLATES[0]

DESK_CONFIG = {
    "time_steps": 4,
    "image.mean": "0,0,0",
    "image.std": "1,1,1",
    "image.size": 8,
    "image.patch": 4,
    "image.depth": 1,
    "image.dim": 32,
    "image.heads": 2,
    "image.mlp_ratio": 2,
    "model.out_dim": 16,
    "text.hidden": "32",
    "text.max_len": 8,
    "optim.name": "adam",
    "pretrain.epochs_img": 50,
    "pretrain.batch_img": 10,
    "pretrain.epochs_txt": 50,
    "pretrain.batch_txt": 10,
    "pretrain.text_lr": 5e-3,
    "finetune.epochs": 100,
    "finetune.batch": 10,
    "energy.sample": 30,
}


@dataclass
class DeskData:
    labels: tuple[str, ...]
    templates: tuple[str, ...]
    train: list[tuple[str, np.ndarray, int]]
    test: list[tuple[str, np.ndarray, int]]
    words: TeacherStore
    image_teacher: TeacherStore
    text_teacher: TeacherStore
    probs_teacher: TeacherStore
    distractors: tuple[str, ...] = DISTRACTORS
    substitutes: dict[str, str] = field(default_factory=lambda: dict(SUBSTITUTES))

    def prompts(self) -> list[str]:
        pool = list(self.labels) + [self.substitutes[l] for l in self.labels] + list(self.distractors)
        return build_prompts(pool, self.templates)


def brightness_images(n: int, size: int, rng: np.random.Generator, prefix: str,
                      classes: int = 3, pixel_noise: float = 16.0) -> list[tuple[str, np.ndarray, int]]:
    items = []
    for i in range(n):
        c = i % classes
        level = (c + rng.uniform(0.15, 0.85)) / classes
        img = level * 255.0 + rng.normal(0.0, pixel_noise, (size, size, 3))
        items.append((f"{prefix}{i:04d}", np.clip(np.round(img), 0, 255).astype(np.float32), c))
    return items


def make_desk_data(n_train: int = 60, n_test: int = 30, size: int = 8, out_dim: int = 16,
                   embed_dim: int = 8, seed: int = 0, noise: float = 0.1) -> DeskData:
    rng = np.random.default_rng(seed)
    train = brightness_images(n_train, size, rng, "train")
    test = brightness_images(n_test, size, rng, "test")
    concepts = list(LABELS) + list(DISTRACTORS)
    protos = {c: rng.normal(0.0, 1.0, out_dim) for c in concepts}
    concept_of = {c: c for c in concepts}
    concept_of.update({sub: orig for orig, sub in SUBSTITUTES.items()})

    image_teacher = TeacherStore("image_embedding", out_dim)
    for item_id, _, c in train + test:
        image_teacher.add(item_id, protos[LABELS[c]] + noise * rng.normal(0.0, 1.0, out_dim))

    data = DeskData(LABELS, TEMPLATES, train, test, TeacherStore("text_embedding", embed_dim),
                    image_teacher, TeacherStore("text_embedding", out_dim),
                    TeacherStore("class_probabilities", len(LABELS)))
    template_noise = {t: rng.normal(0.0, 1.0, out_dim) for t in TEMPLATES}
    for label in sorted(concept_of):
        for t in TEMPLATES:
            data.text_teacher.add(t.replace("{}", label), protos[concept_of[label]] + noise * template_noise[t])

    tokens = sorted({tok for p in data.prompts() for tok in tokenize(p)})
    for tok in tokens:
        data.words.add(tok, rng.normal(0.4, 0.6, embed_dim))

    label_vecs = np.stack([data.text_teacher.get(EVAL_TEMPLATE.replace("{}", l)) for l in LABELS])
    label_vecs /= np.linalg.norm(label_vecs, axis=1, keepdims=True)
    for item_id, _, _ in train + test:
        v = image_teacher.get(item_id).astype(np.float64)
        sims = label_vecs @ (v / np.linalg.norm(v))
        e = np.exp(sims - sims.max())
        p = e / e.sum()
        # float32 storage must still sum to 1 within 1e-5
        data.probs_teacher.add(item_id, p.astype(np.float32))
    return data


def write_desk_data(out: str | Path, data: DeskData, config: dict | None = None) -> Path:
    """Write every input file plus ``desk.cfg``; returns the config path."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for split, items in (("train", data.train), ("test", data.test)):
        rows = []
        for item_id, img, c in items:
            rel = f"images/{item_id}.sclt"
            write_tensor(out / rel, img)
            rows.append((item_id, rel, c))
        write_manifest(out / f"{split}.tsv", rows)
    write_lines(out / "labels.txt", data.labels)
    write_lines(out / "templates.txt", data.templates)
    write_lines(out / "distractors.txt", data.distractors)
    write_lines(out / "substitutes.tsv", [f"{k}\t{v}" for k, v in data.substitutes.items()])
    write_store(out / "words.scst", data.words)
    write_store(out / "teacher_image.scst", data.image_teacher)
    write_store(out / "teacher_text.scst", data.text_teacher)
    write_store(out / "teacher_probs.scst", data.probs_teacher)
    cfg = dict(DESK_CONFIG)
    cfg.update({
        "data.train": "train.tsv", "data.test": "test.tsv", "data.labels": "labels.txt",
        "data.templates": "templates.txt", "text.word_embeddings": "words.scst",
        "teacher.image": "teacher_image.scst", "teacher.text": "teacher_text.scst",
        "teacher.probs": "teacher_probs.scst", "robustness.distractors": "distractors.txt",
        "robustness.substitutes": "substitutes.tsv", "robustness.expand": "1,2,3,4",
    })
    cfg.update(config or {})
    path = out / "desk.cfg"
    write_lines(path, [f"{k} = {v}" for k, v in cfg.items()])
    return path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m spikealign.synthetic", description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train", type=int, default=60)
    ap.add_argument("--test", type=int, default=30)
    args = ap.parse_args(argv)
    path = write_desk_data(args.out_dir, make_desk_data(args.train, args.test, seed=args.seed))
    print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
