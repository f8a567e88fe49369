"""Command-line entry point: ``ofa <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .coords import BBox, Codebook, CodecError, dequantize_image, read_ppm, write_ppm
from .decoding import BeamParams, ConstraintError, build_trie, classify, generate_box, generate_codes, generate_text, load_labels
from .metrics import acc_at_05, closed_set_accuracy, iou, token_f1
from .model import PRESETS, ModelConfig, ModelError, OFAModel, load_checkpoint
from .tasks import (
    DEFAULT_RATIOS,
    GROUPS,
    ConfigError,
    Task,
    TaskError,
    TaskRecord,
    codebook_for,
    corpus_texts,
    mix_batches,
    read_jsonl,
    serialize_sample,
    synth_grounding_dataset,
    write_jsonl,
)
from .training import NumericError, TrainConfig, train
from .vocab import UnifiedVocab, VocabError, build_vocab

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
CODEBOOK_FILE = "codebook.txt"
DATA_FILE = "data.jsonl"

MODES = {"caption": Task.Caption, "vqa": Task.VQA, "ground": Task.VG, "infill": Task.ImageInfill, "classify": None}
RUN_KEYS = {"preset", "tasks", "data", "vocab", "out"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def read_config(path: str | Path | None) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    if path is None:
        return {}
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _split_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        key, sep, value = p.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {p!r}")
        out[key.strip()] = value.strip()
    return out


def split_config(conf: dict[str, str]) -> tuple[dict, dict, dict]:
    """Route keys to TrainConfig, ModelConfig or run options; unknown keys are usage errors."""
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(ModelConfig)} - {"vocab_size", "num_loc_bins", "codebook_size"}
    t, m, r = {}, {}, {}
    for k, v in conf.items():
        if k in train_keys:
            t[k] = v
        elif k in model_keys:
            m[k] = v
        elif k in RUN_KEYS:
            r[k] = v
        else:
            raise UsageError(f"unknown config key {k!r}")
    return t, m, r


# ---------------------------------------------------------------------------
# helpers


def _data_path(p: str) -> Path:
    path = Path(p)
    if path.is_dir():
        path = path / DATA_FILE
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {path}")
    return path


def _load_vocab(d: str) -> tuple[UnifiedVocab, Codebook | None]:
    v = UnifiedVocab.load(d)
    cb_path = Path(d) / CODEBOOK_FILE
    return v, (Codebook.load(cb_path) if cb_path.exists() else None)


def _parse_tasks(spec: str | None) -> list[Task] | None:
    if not spec:
        return None
    return [Task.parse(s.strip()) for s in spec.split(",") if s.strip()]


def _beam(args) -> BeamParams:
    return BeamParams(beam_size=args.beam, length_penalty=args.length_penalty, max_len=args.max_len)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    rng = np.random.default_rng(args.seed)
    records = synth_grounding_dataset(args.n, args.image_px, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, out / DATA_FILE, out / "images")
    print(f"wrote {len(records)} records for {args.n} images to {out}")


def cmd_build_vocab(args) -> None:
    records = read_jsonl(_data_path(args.data))
    v = build_vocab(corpus_texts(records), args.subwords, args.loc_bins, args.codes)
    v.save(args.out)
    if any(r.image is not None for r in records):
        cb = codebook_for(records, args.codes, np.random.default_rng(args.seed))
        cb.save(Path(args.out) / CODEBOOK_FILE)
    print(f"vocab size {v.size} ({v.num_subwords} subwords, {v.num_loc_bins} loc, {v.codebook_size} code) -> {args.out}")


def cmd_encode(args) -> None:
    v, cb = _load_vocab(args.vocab)
    rng = np.random.default_rng(args.seed)
    lines = []
    for r in read_jsonl(_data_path(args.data)):
        s = serialize_sample(r, v, cb, rng)
        lines.append(
            json.dumps(
                {
                    "id": r.id,
                    "task": r.task.value,
                    "source_ids": s.source_ids,
                    "source": [v.token(i) for i in s.source_ids],
                    "target_ids": s.target_ids,
                    "target": [v.token(i) for i in s.target_ids],
                    "has_image": s.patches is not None,
                }
            )
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_train(args) -> None:
    conf = read_config(args.config)
    conf.update(_split_overrides(args.set))
    for flag, key in (("steps", "total_steps"), ("lr", "peak_lr"), ("batch_size", "batch_size"), ("preset", "preset"),
                      ("tasks", "tasks"), ("data", "data"), ("vocab", "vocab"), ("out", "out")):
        value = getattr(args, flag)
        if value is not None:
            conf[key] = str(value)
    conf["seed"] = str(args.seed)
    tconf, mconf, run = split_config(conf)
    for key in ("data", "vocab", "out"):
        if key not in run:
            raise UsageError(f"missing required option {key!r}")
    try:
        tc = TrainConfig.from_dict(tconf)
    except ValueError as e:
        raise UsageError(str(e)) from None
    v, cb = _load_vocab(run["vocab"])
    tasks = _parse_tasks(run.get("tasks"))
    records = read_jsonl(_data_path(run["data"]))
    if tasks is not None:
        records = [r for r in records if r.task in tasks]
    if not records:
        raise TaskError("no training records after task filtering")
    rng = np.random.default_rng(tc.seed)
    streams: dict[str, list] = {}
    for r in records:
        s = serialize_sample(r, v, cb, rng)
        if tc.trie_train and r.task is Task.ITM:
            s.trie = build_trie(["yes", "no"], v)
        streams.setdefault(GROUPS[r.task], []).append(s)
    ratios = {g: DEFAULT_RATIOS[g] for g in DEFAULT_RATIOS if g in streams}
    mcfg = ModelConfig.from_dict(
        {
            **ModelConfig.preset(run.get("preset", "nano"), v.size).to_dict(),
            "num_loc_bins": v.num_loc_bins,
            "codebook_size": v.codebook_size,
            "dropout": tc.dropout,
            "stochastic_depth_rate": tc.stochastic_depth,
            **mconf,
        }
    )
    model = OFAModel(mcfg, seed=tc.seed)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.cfg").write_text("".join(f"{k}={val}\n" for k, val in sorted(conf.items())), encoding="utf-8")

    def report(log):
        if args.log_every and log.step % args.log_every == 0:
            print(f"step {log.step} lr {log.lr:.3e} loss {log.loss:.4f}", flush=True)

    res = train(model, mix_batches(streams, ratios, tc.batch_size, rng), tc, out, report)
    print(f"trained {res.stopped_at} steps, final loss {res.logs[-1].loss:.4f}; checkpoint {res.last_checkpoint}")


def _record_from_flags(args, task: Task) -> TaskRecord:
    if task in (Task.VG, Task.ITM, Task.SentPair) and args.text is None:
        raise UsageError(f"{task.value} generation needs --text")
    if task is Task.VQA and args.question is None:
        raise UsageError("vqa generation needs --question")
    img = read_ppm(args.image) if args.image else None
    label = "yes" if task is Task.ITM else (args.label or "?")
    # targets are never read at generation time; placeholders satisfy record validation
    box = [(BBox(0.0, 0.0, 1.0, 1.0), args.text or "")] if task in (Task.VG, Task.GC) else []
    text = args.text if args.text is not None else "?"
    return TaskRecord(task, image=img, text=text, question=args.question, answer="?", label=label, boxes=box)


def cmd_generate(args) -> None:
    cfg, params = load_checkpoint(args.ckpt)
    model = OFAModel(cfg, params=params)
    model.eval()
    v, cb = _load_vocab(args.vocab)
    task = MODES[args.mode] if args.mode != "classify" else Task.parse(args.task)
    if args.mode == "classify" and not args.labels:
        raise UsageError("generate classify needs --labels")
    if args.mode == "infill" and cb is None:
        raise UsageError("generate infill needs a codebook in the vocab directory")
    trie = build_trie(load_labels(args.labels), v) if args.labels else None
    params_b = _beam(args)
    if args.data:
        records = [r for r in read_jsonl(_data_path(args.data)) if r.task is task]
    else:
        records = [_record_from_flags(args, task)]
    rng = np.random.default_rng(args.seed)
    rows = []
    for r in records:
        s = serialize_sample(r, v, cb, rng)
        row: dict = {"id": r.id}
        if args.mode == "ground":
            pred = generate_box(model, s, v, params_b)
            row["box"] = list(pred.box.as_tuple())
            row["tokens"] = [v.token(i) for i in pred.tokens]
            if not args.data:
                print(" ".join(row["tokens"]))
                print("box " + " ".join(f"{c:.4f}" for c in pred.box.as_tuple()))
        elif args.mode == "infill":
            n = (s.target_ids and len(s.target_ids) - 1) or 0
            codes = generate_codes(model, s, v, n, params_b)
            side = int(round(np.sqrt(len(codes))))
            row["codes"] = codes
            if args.out_image:
                write_ppm(args.out_image, dequantize_image(np.asarray(codes).reshape(side, side), cb))
            if not args.data:
                print(" ".join(f"<code_{c}>" for c in codes))
        elif args.mode == "classify":
            res = classify(model, s, trie, v, beam_size=args.beam)
            row["text"] = res.label
            if not args.data:
                print(res.label)
        else:
            row["text"] = generate_text(model, s, v, params_b, trie)
            if not args.data:
                print(row["text"])
        rows.append(row)
    if args.data:
        text = "".join(json.dumps(r) + "\n" for r in rows)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)


def _gold_text(r: TaskRecord) -> str | None:
    if r.task in (Task.VQA, Task.Summarize):
        return r.answer
    if r.task in (Task.ITM, Task.Classify, Task.SentPair):
        return r.label
    return r.text


def cmd_eval(args) -> None:
    gold = {r.id: r for r in read_jsonl(_data_path(args.gold))}
    preds = []
    for n, line in enumerate(Path(args.pred).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                preds.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise TaskError(f"{args.pred}:{n}: {e}") from None
    boxes_p, boxes_g, text_p, text_g = [], [], [], []
    for p in preds:
        if p.get("id") not in gold:
            raise TaskError(f"prediction id {p.get('id')!r} has no gold record")
        g = gold[p["id"]]
        if p.get("box") is not None:
            if not g.boxes:
                raise TaskError(f"gold record {g.id!r} has no box")
            boxes_p.append(BBox(*p["box"]))
            boxes_g.append(g.boxes[0][0])
        if p.get("text") is not None:
            text_p.append(p["text"])
            text_g.append(_gold_text(g) or "")
    rows = [("predictions", f"{len(preds)}")]
    if boxes_p:
        rows.append(("boxes", f"{len(boxes_p)}"))
        rows.append(("acc@0.5", f"{acc_at_05(boxes_p, boxes_g):.4f}"))
        rows.append(("mean_iou", f"{np.mean([iou(a, b) for a, b in zip(boxes_p, boxes_g)]):.4f}"))
    if text_p:
        rows.append(("texts", f"{len(text_p)}"))
        rows.append(("exact_match", f"{closed_set_accuracy(text_p, text_g):.4f}"))
        rows.append(("token_f1", f"{np.mean([token_f1(a, b) for a, b in zip(text_p, text_g)]):.4f}"))
    width = max(len(k) for k, _ in rows)
    for k, val in rows:
        print(f"{k:<{width}}  {val}")


def cmd_inspect(args) -> None:
    cfg, params = load_checkpoint(args.ckpt)
    print("config")
    for k, val in cfg.to_dict().items():
        print(f"  {k} = {val}")
    total = 0
    print("parameters")
    for name, p in params.items():
        total += p.size
        print(f"  {name:<28} {'x'.join(map(str, p.shape)) or 'scalar':>12} {p.size:>9}")
    print(f"total {total}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ofa", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "emit a synthetic shapes dataset with PPM images")
    p.add_argument("--n", type=int, default=100, help="number of images")
    p.add_argument("--image-px", type=int, default=64)
    p.add_argument("--out", default="synth")

    p = add("build-vocab", cmd_build_vocab, "learn BPE merges and the image codebook")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subwords", type=int, default=512)
    p.add_argument("--loc-bins", type=int, default=1000)
    p.add_argument("--codes", type=int, default=128)

    p = add("encode", cmd_encode, "dump serialized source/target tokens per record")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")

    p = add("train", cmd_train, "train a model on a JSONL dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--tasks", help="comma-separated task names to train on")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--log-every", type=int, default=100)

    p = add("generate", cmd_generate, "decode with a trained checkpoint")
    p.add_argument("mode", choices=sorted(MODES))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", help="JSONL; decode every record of the mode's task")
    p.add_argument("--out", help="predictions JSONL (with --data)")
    p.add_argument("--image")
    p.add_argument("--text")
    p.add_argument("--question")
    p.add_argument("--label")
    p.add_argument("--task", default="ITM", help="task template for classify")
    p.add_argument("--out-image", help="PPM for the infilled centre region")
    p.add_argument("--beam", type=int, default=6)
    p.add_argument("--length-penalty", type=float, default=0.7)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--labels", help="file with one label per line")

    p = add("eval", cmd_eval, "score predictions JSONL against a gold dataset")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)

    p = add("inspect-ckpt", cmd_inspect, "print a checkpoint's config and tensors")
    p.add_argument("ckpt")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"ofa: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as e:
        print(f"ofa: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TaskError, VocabError, CodecError, ModelError, ConstraintError, OSError, KeyError, ValueError) as e:
        print(f"ofa: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
