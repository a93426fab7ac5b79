"""Command-line entry point: ``spikealign VERB [--config F] [--set k=v] [--seed N] [--out-dir D]``.

Machine-readable outputs are JSONL with sorted keys and carry ``run_seed``;
wall-clock times go to ``timestamps.json`` only, so two runs with the same
config and seed write byte-identical results.  Failures print one JSON line
on stderr and exit 2 (config), 3 (data) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import Config, load_config
from .distill import build_prompts, pretrain
from .encoders import PAD, UNK, DualEncoder, ProbeLog, load_model, params_digest, save_model, vocab_from_store
from .energy import LayerCost, profile, report_from_costs, report_from_probes
from .errors import ConfigError, NumericError, SpikeAlignError
from .finetune import LabelSet, evaluate, finetune, robustness_suite
from .io import load_dataset, read_labels, read_store, read_substitutes, read_templates, write_lines
from .tensor import no_grad

VERBS = ("pretrain", "finetune", "eval", "robustness", "energy", "gradcheck")
ARCH_PREFIXES = ("time_steps", "lif.", "image.", "model.", "text.")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spikealign", description="Spiking dual-encoder distillation toolkit.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key; repeatable")
    ap.add_argument("--seed", type=int, help="run seed (overrides the config)")
    ap.add_argument("--out-dir", default="out", help="directory for all outputs")
    return ap


class Run:
    def __init__(self, verb: str, cfg: Config, out_dir: Path):
        self.verb = verb
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.out = out_dir
        self.outputs: list[str] = []
        self.summary: dict = {}

    # -- output helpers --

    def jsonl(self, name: str, records) -> None:
        lines = [json.dumps({**r, "run_seed": self.seed}, sort_keys=True) for r in records]
        write_lines(self.out / name, lines)
        self.outputs.append(name)

    def text(self, name: str, body: str) -> None:
        write_lines(self.out / name, body.splitlines())
        self.outputs.append(name)

    # -- inputs --

    def labels(self) -> list[str]:
        return read_labels(self.cfg.path("data.labels"))

    def items(self, key: str, num_classes: int) -> list:
        items = list(load_dataset(self.cfg.path(key), num_classes))
        limit = int(self.cfg["data.limit"])
        return items[:limit] if limit > 0 else items

    def new_model(self) -> DualEncoder:
        tokens, vectors = vocab_from_store(read_store(self.cfg.path("text.word_embeddings"), "text_embedding"))
        return DualEncoder(self.cfg, tokens, vectors)

    def load_model(self) -> DualEncoder:
        # architecture comes from the checkpoint, everything else from this run
        runtime = {k: v for k, v in self.cfg.items() if not k.startswith(ARCH_PREFIXES)}
        return load_model(self.cfg.path("ckpt.in"), runtime)

    def optional_list(self, key: str) -> list[str]:
        path = self.cfg.path(key, required=False)
        return read_labels(path) if path is not None else []

    def substitutes(self) -> dict[str, str]:
        path = self.cfg.path("robustness.substitutes", required=False)
        return read_substitutes(path) if path is not None else {}


def _emit(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True), flush=True)


def cmd_pretrain(run: Run) -> None:
    cfg = run.cfg
    labels = run.labels()
    pool = list(dict.fromkeys(labels + list(run.substitutes().values()) + run.optional_list("robustness.distractors")))
    prompts = build_prompts(pool, read_templates(cfg.path("data.templates")))
    train = run.items("data.train", len(labels))
    model = run.new_model()
    img_teacher = read_store(cfg.path("teacher.image"), "image_embedding") if cfg["pretrain.epochs_img"] else None
    txt_teacher = read_store(cfg.path("teacher.text"), "text_embedding") if cfg["pretrain.epochs_txt"] else None
    history = pretrain(model, [(i, img) for i, img, _ in train], prompts, img_teacher, txt_teacher, cfg, _emit)
    digest = save_model(run.out / "model.ckpt", model)
    run.outputs.append("model.ckpt")
    run.jsonl("pretrain_log.jsonl", history)
    run.summary = {"checkpoint_sha256": digest, "prompts": len(prompts), "images": len(train)}


def cmd_finetune(run: Run) -> None:
    cfg = run.cfg
    model = run.load_model()
    labels = run.labels()
    labelset = LabelSet(tuple(labels), cfg["eval.prompt"])
    train = run.items("data.train", len(labels))
    test = run.items("data.test", len(labels)) if cfg.path("data.test", required=False) else None
    probs = read_store(cfg.path("teacher.probs"), "class_probabilities")
    before = params_digest(model.text_params())
    history = finetune(model, train, labelset, probs, cfg, test, _emit)
    after = params_digest(model.text_params())
    if before != after:
        raise SpikeAlignError("text encoder parameters changed during fine-tuning")
    digest = save_model(run.out / "model.ckpt", model)
    run.outputs.append("model.ckpt")
    run.jsonl("finetune_log.jsonl", history)
    run.summary = {"checkpoint_sha256": digest, "text_params_sha256": after,
                   "lambda": cfg["finetune.lambda"]}


def _test_set(run: Run, model: DualEncoder, labels: list[str]):
    test = run.items("data.test", len(labels))
    if not test:
        raise ConfigError("data.test is empty")
    return model.prepare_images([img for _, img, _ in test]), [c for _, _, c in test]


def cmd_eval(run: Run) -> None:
    model = run.load_model()
    labels = run.labels()
    labelset = LabelSet(tuple(labels), run.cfg["eval.prompt"])
    pixels, classes = _test_set(run, model, labels)
    acc = evaluate(model, pixels, classes, labelset, temperature=run.cfg["eval.temperature"])
    rec = {"setting": "baseline", "seed": None, "candidates": len(labels), "items": len(classes), "accuracy": acc}
    run.jsonl("eval.jsonl", [rec])
    run.summary = {"accuracy": acc, "items": len(classes)}


def cmd_robustness(run: Run) -> None:
    cfg = run.cfg
    model = run.load_model()
    labels = run.labels()
    labelset = LabelSet(tuple(labels), cfg["eval.prompt"])
    pixels, classes = _test_set(run, model, labels)
    temperature = cfg["eval.temperature"]
    baseline = evaluate(model, pixels, classes, labelset, temperature=temperature)
    records = [{"setting": "baseline", "seed": None, "candidates": len(labels), "accuracy": baseline}]
    records += robustness_suite(model, pixels, classes, labelset, expand=cfg.ints("robustness.expand"),
                                replace=cfg.floats("robustness.replace"),
                                distractors=run.optional_list("robustness.distractors"),
                                substitutes=run.substitutes(), seeds=cfg.ints("robustness.seeds"),
                                temperature=temperature)
    run.jsonl("robustness.jsonl", records)
    run.summary = {"baseline": baseline, "settings": len(records)}


def cmd_energy(run: Run) -> None:
    cfg = run.cfg
    forced = str(cfg["energy.force_gamma"]).strip()
    ckpt = cfg.path("ckpt.in", required=False)
    if ckpt is not None:
        model = run.load_model()
    else:
        # layer costs depend only on the image architecture
        model = DualEncoder(cfg, [PAD, UNK], np.zeros((2, 1), np.float32))
    per_layer_mean = bool(cfg["energy.per_layer_mean"])
    if forced:
        try:
            gamma = float(forced)
        except ValueError:
            raise ConfigError(f"energy.force_gamma: cannot parse {forced!r}") from None
        size, ch = model.image_cfg.image_size, model.image_cfg.channels
        probes = ProbeLog()
        with no_grad():
            model.encode_images(np.zeros((1, size, size, ch), np.float32), probes, normalized=True)
        base = report_from_probes(probes, model.time_steps, per_layer_mean)
        costs = [LayerCost(r.layer, r.kind, r.flops, gamma if r.spiking else 0.0) for r in base.rows]
        report = report_from_costs(costs, model.time_steps, gamma)
    else:
        if cfg.path("data.test", required=False) is None:
            raise ConfigError("energy needs data.test or energy.force_gamma")
        if cfg["energy.sample"] < 1:
            raise ConfigError("energy.sample must be >= 1")
        items = run.items("data.test", None)[:cfg["energy.sample"]]
        report = profile(model, [img for _, img, _ in items], per_layer_mean=per_layer_mean)
    run.jsonl("energy.jsonl", report.to_records())
    table = report.to_table()
    run.text("energy.txt", table)
    print(table)
    run.summary = {"energy_mJ_per_item": report.energy_mJ, "gamma_bar": report.gamma_bar,
                   "ecr_percent": round(100 * report.ecr, 2)}


def cmd_gradcheck(run: Run) -> None:
    results = gc.run_suite(run.seed)
    run.jsonl("gradcheck.jsonl", [r.to_record() for r in results])
    table = gc.format_table(results)
    run.text("gradcheck.txt", table)
    print(table)
    failed = [r.name for r in results if not r.passed]
    run.summary = {"cases": len(results), "failed": failed}
    if failed:
        raise NumericError(f"gradcheck: {len(failed)} of {len(results)} cases exceed "
                           f"{gc.TOLERANCE:g} relative error: {', '.join(failed)}")


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "robustness": cmd_robustness, "energy": cmd_energy, "gradcheck": cmd_gradcheck}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_command(verb: str, cfg: Config, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(verb, cfg, out)
    started, t0 = _now(), time.perf_counter()
    try:
        COMMANDS[verb](run)
    finally:
        stamps = {"verb": verb, "started_utc": started, "finished_utc": _now(),
                  "elapsed_s": round(time.perf_counter() - t0, 3)}
        write_lines(out / "timestamps.json", [json.dumps(stamps, sort_keys=True)])
    result = {"verb": verb, "run_seed": run.seed, "outputs": sorted(run.outputs), **run.summary}
    write_lines(out / "run.json", [json.dumps(result, sort_keys=True)])
    write_lines(out / "config.resolved", cfg.to_text().splitlines())
    return result


def main(argv=None) -> int:
    verb = None
    try:
        args = build_parser().parse_args(argv)
        verb = args.verb
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        result = run_command(verb, cfg, args.out_dir)
    except SpikeAlignError as exc:
        _error(verb, exc, exc.exit_code)
        return exc.exit_code
    except Exception as exc:  # anything else is an internal fault
        _error(verb, exc, 1)
        return 1
    _emit(result)
    return 0


def _error(verb, exc: BaseException, code: int) -> None:
    rec = {"error": type(exc).__name__, "exit_code": code, "message": " ".join(str(exc).split()), "verb": verb}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)


if __name__ == "__main__":
    raise SystemExit(main())
