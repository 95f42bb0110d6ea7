"""Command line: ``kanoclip [global flags] <verb> ...``.

Verbs: ``make-synth``, ``build-kb``, ``train``, ``infer``, ``eval``. Every
verb reads the same YAML config (``--config``); flags override it. Exit codes
are 0 on success, 2 for config errors, 3 for data errors and 4 for numeric
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from PIL import Image

from . import __version__
from .config import RunConfig, config_hash, load_config
from .data import load_dataset, make_synthetic_dataset
from .errors import ConfigError, InvalidConfig, KanoclipError
from .evaluate import emit_report, evaluate, heatmap_bytes, infer
from .kb import ChatCompletionsClient, FixtureClient, build_knowledge_base, load_kb, save_kb
from .trainer import load_checkpoint, save_checkpoint, train

logger = logging.getLogger("kanoclip")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kanoclip", description="Zero-shot anomaly detection toolkit.")
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--device", default="cpu", choices=["cpu"], help="compute device (CPU only)")
    p.add_argument("--allow-overlap", action="store_true",
                   help="permit evaluating on the auxiliary (training) dataset")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("make-synth", help="write the synthetic textured-surface dataset")
    s.add_argument("out", type=Path)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--class-name", default="synth")

    s = sub.add_parser("build-kb", help="collect anomaly descriptions into a knowledge base")
    s.add_argument("--classes", nargs="+", required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--fixtures", type=Path, help="canned responses (hermetic mode)")
    s.add_argument("--dataset", type=Path, help="images for image-level descriptions")

    s = sub.add_parser("train", help="train prompts, fusion stages and adapter")
    s.add_argument("--out", type=Path, required=True, help="checkpoint path")
    s.add_argument("--dataset", type=Path, help="auxiliary dataset (overrides config)")
    s.add_argument("--kb", type=Path, help="knowledge base file (overrides config)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--log", type=Path, help="per-step CSV loss log")

    s = sub.add_parser("infer", help="anomaly map and score for one image")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--class-name", required=True)
    s.add_argument("--heatmap", type=Path, help="write the 8-bit map here")

    s = sub.add_parser("eval", help="AUROC on one or more target datasets")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--target", type=Path, action="append", help="target dataset (repeatable)")
    s.add_argument("--out", type=Path, required=True)
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _kb_clients(cfg: RunConfig, fixtures: Path | None):
    fixtures = fixtures or (Path(cfg.kb.fixtures) if cfg.kb.fixtures else None)
    if fixtures is not None:
        client = FixtureClient.from_file(fixtures)
        return client, client
    if not (cfg.kb.base_url and cfg.kb.llm_model):
        raise InvalidConfig("build-kb needs --fixtures or kb.base_url and kb.llm_model in the config")
    key = os.environ.get(cfg.kb.api_key_env)
    llm = ChatCompletionsClient(cfg.kb.base_url, cfg.kb.llm_model, key, source="llm")
    vqa = ChatCompletionsClient(cfg.kb.base_url, cfg.kb.vqa_model, key, source="vqa") if cfg.kb.vqa_model else None
    return llm, vqa


def cmd_make_synth(args, cfg) -> int:
    seed = args.seed if args.seed is not None else 0
    class_dir = make_synthetic_dataset(args.out, args.count, seed, args.class_name)
    print(class_dir)
    return 0


def cmd_build_kb(args, cfg) -> int:
    llm, vqa = _kb_clients(cfg, args.fixtures)
    images = load_dataset(args.dataset, cfg.train.layout) if args.dataset else ()
    kb = build_knowledge_base(llm, args.classes, cfg.kb.templates, vqa, images)
    save_kb(kb, args.out)
    for name in kb.classes:
        print(f"{name}: {kb[name].n_llm} class, {kb[name].n_vqa} image descriptions")
    return 0


def cmd_train(args, cfg) -> int:
    if args.dataset:
        cfg.train.dataset = str(args.dataset)
    if args.epochs:
        cfg.train.epochs = args.epochs
    kb_path = args.kb or (Path(cfg.kb.path) if cfg.kb.path else None)
    kb = load_kb(kb_path) if kb_path else None
    ckpt = train(cfg, kb, log_path=args.log)
    save_checkpoint(ckpt, args.out)
    print(json.dumps({"checkpoint": str(args.out), "hash": ckpt.hash, "steps": ckpt.step}))
    return 0


def cmd_infer(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    amap, record = infer(model, args.image, args.class_name)
    if args.heatmap:
        args.heatmap.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(heatmap_bytes(amap), mode="L").save(args.heatmap)
    print(json.dumps({"image": str(args.image), "class": args.class_name, **record.to_dict(),
                      "map_shape": list(amap.shape)}))
    return 0


def _same_dataset(a, b) -> bool:
    return Path(a).resolve() == Path(b).resolve()


def cmd_eval(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = ckpt.run_config
    targets = [str(t) for t in args.target] if args.target else list(cfg.eval.targets)
    if not targets:
        raise InvalidConfig("no target dataset given (--target or eval.targets)")
    aux = run.train.dataset
    for target in targets:
        if aux and _same_dataset(target, aux) and not args.allow_overlap:
            raise ConfigError(f"target {target} is the auxiliary training set; pass --allow-overlap to evaluate it")
    model = ckpt.build_model()
    summary = {}
    for target in targets:
        samples = load_dataset(target, cfg.eval.layout)
        report = evaluate(model, samples, dataset=target, config=run.to_dict(),
                          pixel_pooling=cfg.eval.pixel_pooling, image_auc_mode=cfg.eval.image_auc_mode)
        report.provenance = {"config_hash": config_hash(run), "checkpoint_hash": ckpt.hash}
        out = args.out / Path(target).name if len(targets) > 1 else args.out
        emit_report(report, out)
        summary[target] = report.to_dict()["overall"]
    print(json.dumps(summary, sort_keys=True))
    return 0


COMMANDS = {
    "make-synth": cmd_make_synth,
    "build-kb": cmd_build_kb,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args, _config(args))
    except KanoclipError as exc:
        print(f"kanoclip: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
