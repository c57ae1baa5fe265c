"""Command-line workflows: gen-data, split, train, eval, score, report.

Exit codes: 0 success, 1 usage error, 2 data or contract error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import atelier as A
from .errors import ArtcriticError, NumericalError
from .evaluator import MAX_NEW, evaluate, read_table, scatter_svg, summarize, verdict_guide
from .model import ModelConfig
from .trainer import TrainConfig, build_model, load_checkpoint, save_checkpoint, train
from .vocab import Tokenizer

CRITIQUE_DELIMITER = "--- critique ---"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(path: Path, command: str, config: dict, seed, inputs: dict, outputs: list, started: str):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": [str(o) for o in outputs],
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _records_by_id(data_dir):
    records, tok = A.read_dataset(data_dir)
    return {r.id: r for r in records}, tok


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = A.generate_dataset(args.n, args.seed, args.image_size)
    written = A.write_dataset(records, out)
    counts = {c: sum(r.category == c for r in records) for c in A.CATEGORIES}
    _write_manifest(out / "run.json", "gen-data", {"n": args.n, "image_size": args.image_size},
                    args.seed, {}, written, started)
    print(f"wrote {len(records)} artworks to {out} ({', '.join(f'{c}={n}' for c, n in counts.items())})")
    return 0


def cmd_split(args) -> int:
    started = _now()
    records, _ = A.read_dataset(args.data)
    split = A.split_dataset(records, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    split.save(out)
    _write_manifest(out.with_name(out.stem + ".run.json"), "split", {}, args.seed,
                    {"data": str(args.data)}, [out], started)
    print(f"train={len(split.train)} test={len(split.test)}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    by_id, tok = _records_by_id(args.data)
    split = A.DatasetSplit.load(args.split)
    overrides = json.loads(Path(args.model_config).read_text()) if args.model_config else {}
    size = next(iter(by_id.values())).artwork.image.shape[0]
    mcfg = ModelConfig(**{"vocab_size": len(tok), "image_size": size, **overrides})
    if mcfg.vocab_size != len(tok):
        raise ArtcriticError("model vocab_size must equal the dataset vocabulary size")
    adapters = cfg.mode == "adapters_only"
    model = build_model(mcfg, quantized=adapters, adapters=adapters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "train_log.csv"
    if log.exists():
        log.unlink()
    train_samples = [by_id[i].sample for i in split.train]
    held_out = [by_id[i].sample for i in split.test] if cfg.plateau_patience else None

    def progress(row):
        mae = "" if row["held_out_mae"] is None else f" held_out_mae={row['held_out_mae']:.2f}"
        print(f"epoch {row['epoch']}: total={row['total']:.4f} l1={row['l1']:.4f} ce={row['ce']:.4f}{mae}",
              file=sys.stderr)

    model, state = train(model, train_samples, cfg, held_out=held_out, log_path=log, progress=progress)
    ckpt = out / "model.ckpt"
    save_checkpoint(model, state, ckpt, vocab=tok.tokens)
    _write_manifest(out / "run.json", "train", {"train": asdict(cfg), "model": mcfg.to_dict()}, cfg.seed,
                    {"data": str(args.data), "split": str(args.split)}, [ckpt, log], started)
    print(f"trained {state.epoch} epochs ({state.step} steps); checkpoint {ckpt}")
    return 0


def _load_model(path):
    model, _, meta = load_checkpoint(path)
    vocab = meta.get("vocab")
    return model, (Tokenizer(vocab) if vocab else A.build_tokenizer())


def cmd_eval(args) -> int:
    started = _now()
    model, tok = _load_model(args.model)
    by_id, data_tok = _records_by_id(args.data)
    if data_tok.tokens != tok.tokens:
        raise ArtcriticError("dataset vocabulary differs from the model's vocabulary")
    split = A.DatasetSplit.load(args.split)
    report = evaluate(model, [by_id[i] for i in split.test], tok, max_new=args.max_new)
    out = Path(args.out)
    report.write(out)
    _write_manifest(out / "run.json", "eval", {"max_new": args.max_new}, None,
                    {"model": str(args.model), "data": str(args.data), "split": str(args.split)},
                    [out / "report.json", out / "per_sample.csv", out / "scatter.svg"], started)
    print(_summary_text(report.summary()))
    return 0


def cmd_score(args) -> int:
    model, tok = _load_model(args.model)
    image = A.read_ppm(args.image)
    prompt = A.build_prompt(tok, args.description, model.config.text_budget - 1)
    visual = model.encode_image(image)
    out = model.forward(visual, prompt, len(prompt) - 2)
    guide = verdict_guide(tok, [float(out.score)])
    new = model.generate_critique(visual, prompt, args.max_new, allow=lambda so_far: guide(0, so_far))
    critique = tok.decode(new)
    print(f"total: {float(out.score):.1f}")
    print("context: rubric dimensions originality, color, composition, texture, content (0-20 each)")
    print(CRITIQUE_DELIMITER)
    print(critique)
    return 0


def _summary_text(m: dict) -> str:
    def f(v, spec=".4f"):
        return "undefined" if v is None else format(v, spec)

    return "\n".join([
        f"n_samples: {m['n_samples']}",
        f"pearson_r: {f(m['pearson_r'])}",
        f"mae_points: {f(m['mae_points'], '.3f')}",
        f"icc: {f(m['icc'])}",
        f"mean_semantic_similarity: {f(m['mean_semantic_similarity'])}",
        f"band_consistency_rate: {f(m['band_consistency_rate'])}",
    ])


def cmd_report(args) -> int:
    path = Path(args.eval)
    doc = json.loads(path.read_text(encoding="utf-8"))
    rows = read_table(path.parent / doc.get("table", "per_sample.csv"))
    svg = Path(args.svg) if args.svg else path.with_name("scatter.svg")
    svg.write_text(scatter_svg([r.true_total for r in rows], [r.predicted_total for r in rows]),
                   encoding="utf-8")
    print(_summary_text(summarize(rows).summary()))
    print(f"scatter: {svg}")
    return 0


# ---------------------------------------------------------------- parser


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults only where one exists."""

    def _get_help_string(self, action):
        if action.default is None or "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _Help
    p = _Parser(prog="artcritic", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus", formatter_class=fmt)
    g.add_argument("--n", type=int, default=1000, help="number of artworks")
    g.add_argument("--seed", type=int, default=7, help="dataset seed")
    g.add_argument("--image-size", type=int, default=32, help="pixels per side")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("split", help="80/20 split, every fifth item per category", formatter_class=fmt)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.add_argument("--out", required=True, help="split JSON file")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train score head and critique generator", formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--split", required=True, help="split JSON file")
    t.add_argument("--config", default=None, help="TrainConfig JSON; defaults apply when omitted")
    t.add_argument("--model-config", default=None, help="ModelConfig overrides as JSON")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate on the test split", formatter_class=fmt)
    e.add_argument("--model", required=True, help="model checkpoint")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", required=True, help="split JSON file")
    e.add_argument("--max-new", type=int, default=MAX_NEW, help="critique token budget")
    e.add_argument("--out", required=True, help="report directory")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("score", help="score one PPM image", formatter_class=fmt)
    c.add_argument("--model", required=True, help="model checkpoint")
    c.add_argument("--image", required=True, help="binary PPM image")
    c.add_argument("--description", required=True, help="artwork description text")
    c.add_argument("--max-new", type=int, default=MAX_NEW, help="critique token budget")
    c.set_defaults(func=cmd_score)

    r = sub.add_parser("report", help="summarise an evaluation report", formatter_class=fmt)
    r.add_argument("--eval", required=True, help="report.json written by eval")
    r.add_argument("--svg", default=None, help="scatter output path (default: next to the report)")
    r.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (ArtcriticError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
