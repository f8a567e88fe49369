"""Task records, instruction templates, serialization to token sequences, batch mixing
and a synthetic shapes dataset."""
from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .coords import BBox, Codebook, build_codebook, mask_middle, quantize_box, read_ppm, write_ppm
from .vocab import BOS, EOS, MASK, UnifiedVocab


class TaskError(ValueError):
    pass


class TemplateError(TaskError):
    pass


class ConfigError(ValueError):
    pass


class Task(str, Enum):
    VG = "VG"
    GC = "GC"
    ITM = "ITM"
    Caption = "Caption"
    VQA = "VQA"
    Detection = "Detection"
    ImageInfill = "ImageInfill"
    TextInfill = "TextInfill"
    Classify = "Classify"
    SentPair = "SentPair"
    Summarize = "Summarize"

    @classmethod
    def parse(cls, name: str) -> "Task":
        for t in cls:
            if t.value.lower() == str(name).lower():
                return t
        raise TaskError(f"unknown task {name!r}")


PRETRAIN_TASKS = (
    Task.VG,
    Task.GC,
    Task.ITM,
    Task.Caption,
    Task.VQA,
    Task.ImageInfill,
    Task.Detection,
    Task.TextInfill,
)

# batch-mixing groups and their per-batch ratio (2048 : 256 : 256 : 512)
GROUPS = {
    Task.VG: "vl",
    Task.GC: "vl",
    Task.ITM: "vl",
    Task.Caption: "vl",
    Task.VQA: "vl",
    Task.Detection: "det",
    Task.ImageInfill: "img",
    Task.TextInfill: "txt",
    Task.Classify: "vl",
    Task.SentPair: "txt",
    Task.Summarize: "txt",
}
DEFAULT_RATIOS = {"vl": 2048, "det": 256, "img": 256, "txt": 512}

DEFAULT_TEMPLATES: dict[str, str] = {
    "VG": 'Which region does the text "{text}" describe?',
    "GC": "What does the region describe? region: {region}",
    "ITM": "Does the image describe {text}?",
    "Caption": "What does the image describe?",
    "VQA": "{question}",
    "ImageInfill": "What is the image in the middle part?",
    "Detection": "What are the objects in the image?",
    "TextInfill": 'What is the complete text of "{text}"?',
    "Classify": "What does the image describe?",
    "Classify.text": 'Is the sentiment of text "{text}" positive or negative?',
    "SentPair": 'Can text1 "{text}" imply text2 "{text2}"?',
    "SentPair.image": 'Can image and text1 "{text}" imply text2 "{text2}"?',
    "Summarize": 'What is the summary of article "{text}"?',
}

ENTAILMENT_ANSWERS = {"entailment": "yes", "neutral": "maybe", "contradiction": "no"}


@dataclass
class TaskRecord:
    task: Task
    image: np.ndarray | None = None
    text: str | None = None
    text2: str | None = None
    question: str | None = None
    answer: str | None = None
    label: str | None = None
    boxes: list[tuple[BBox, str]] = field(default_factory=list)
    id: str | None = None
    image_id: str | None = None

    def __post_init__(self):
        self.task = Task.parse(self.task) if not isinstance(self.task, Task) else self.task


@dataclass
class InstructionSample:
    source_ids: list[int]
    patches: np.ndarray | None
    target_ids: list[int]
    task: Task | None = None
    trie: object | None = None  # LabelTrie used for constrained training

    @property
    def group(self) -> str:
        return GROUPS[self.task] if self.task is not None else "vl"


_REQUIRED: dict[Task, tuple[str, ...]] = {
    Task.VG: ("image", "text", "boxes"),
    Task.GC: ("image", "text", "boxes"),
    Task.ITM: ("image", "text", "label"),
    Task.Caption: ("image", "text"),
    Task.VQA: ("image", "question", "answer"),
    Task.Detection: ("image", "boxes"),
    Task.ImageInfill: ("image",),
    Task.TextInfill: ("text",),
    Task.Classify: ("label",),
    Task.SentPair: ("text", "text2", "label"),
    Task.Summarize: ("text", "answer"),
}


def validate_record(r: TaskRecord) -> None:
    for name in _REQUIRED[r.task]:
        value = getattr(r, name)
        if value is None or (name == "boxes" and len(value) == 0):
            raise TaskError(f"{r.task.value} record is missing field {name!r}")
    if r.task is Task.Classify and r.image is None and r.text is None:
        raise TaskError("Classify record needs an image or a text")


# ---------------------------------------------------------------------------
# templates


def load_templates(path: str | Path) -> dict[str, str]:
    out = dict(DEFAULT_TEMPLATES)
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, tpl = line.partition("\t")
        if not sep:
            raise TemplateError(f"template line without a tab: {line!r}")
        out[key] = tpl
    return out


def save_templates(path: str | Path, templates: Mapping[str, str] = DEFAULT_TEMPLATES) -> None:
    Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in templates.items()), encoding="utf-8")


def _template_key(r: TaskRecord) -> str:
    if r.task is Task.Classify and r.image is None:
        return "Classify.text"
    if r.task is Task.SentPair and r.image is not None:
        return "SentPair.image"
    return r.task.value


def region_markup(box: BBox, num_bins: int) -> str:
    return " ".join(f"<loc_{b}>" for b in quantize_box(box, num_bins))


def render_instruction(r: TaskRecord, templates: Mapping[str, str] | None = None, num_bins: int = 1000) -> str:
    """Fill the task template. Region boxes are rendered as ``<loc_i>`` markers."""
    templates = DEFAULT_TEMPLATES if templates is None else templates
    tpl = templates[_template_key(r)]
    values: dict[str, str] = {}
    for _, name, _, _ in string.Formatter().parse(tpl):
        if name is None:
            continue
        if name == "region":
            if not r.boxes:
                raise TemplateError(f"{r.task.value} template needs field 'region'")
            values[name] = region_markup(r.boxes[0][0], num_bins)
            continue
        value = getattr(r, name, None)
        if value is None:
            raise TemplateError(f"{r.task.value} template needs field {name!r}")
        values[name] = str(value)
    return tpl.format(**values)


# ---------------------------------------------------------------------------
# serialization


def _frame(ids: list[int]) -> list[int]:
    return [BOS] + ids + [EOS]


def serialize_sample(
    r: TaskRecord,
    v: UnifiedVocab,
    codebook: Codebook | None = None,
    rng: np.random.Generator | None = None,
    templates: Mapping[str, str] | None = None,
    mask_frac: float = 0.5,
    max_source_len: int = 256,
) -> InstructionSample:
    validate_record(r)
    templates = DEFAULT_TEMPLATES if templates is None else templates
    patches = r.image
    task = r.task
    if task is Task.TextInfill:
        rng = rng if rng is not None else np.random.default_rng(0)
        ids = v.encode(r.text)
        corrupted, _ = corrupt_text_infilling(ids, rng)
        pre, _, post = templates["TextInfill"].partition("{text}")
        source = _frame(v.encode(pre) + corrupted + v.encode(post))
        target = ids + [EOS]
    elif task is Task.ImageInfill:
        if codebook is None:
            raise TaskError("ImageInfill serialization needs a codebook")
        patches, codes = mask_middle(r.image, codebook, mask_frac)
        source = _frame(v.encode(render_instruction(r, templates)))
        target = [v.code_id(int(c)) for c in codes.reshape(-1)] + [EOS]
    else:
        source = _frame(v.encode_markup(render_instruction(r, templates, v.num_loc_bins)))
        target = _target_ids(r, v)
    if len(source) > max_source_len:
        raise TaskError(f"source of {len(source)} tokens exceeds {max_source_len}")
    if any(v.is_code(i) for i in source):
        raise TaskError("image-code tokens are not allowed on the source side")
    return InstructionSample(source, patches, target, task)


def detection_order(boxes: Sequence[tuple[BBox, str]]) -> list[tuple[BBox, str]]:
    return sorted(boxes, key=lambda bl: (bl[0].y1, bl[0].x1))


def _target_ids(r: TaskRecord, v: UnifiedVocab) -> list[int]:
    t = r.task
    if t is Task.VG:
        return [v.loc_id(b) for b in quantize_box(r.boxes[0][0], v.num_loc_bins)] + [EOS]
    if t is Task.Detection:
        out: list[int] = []
        for box, label in detection_order(r.boxes):
            out += [v.loc_id(b) for b in quantize_box(box, v.num_loc_bins)]
            out += v.encode(label)
        return out + [EOS]
    if t is Task.ITM:
        return v.encode(r.label.lower()) + [EOS]
    if t in (Task.GC, Task.Caption):
        return v.encode(r.text) + [EOS]
    if t in (Task.VQA, Task.Summarize):
        return v.encode(r.answer) + [EOS]
    if t is Task.Classify:
        return v.encode(r.label) + [EOS]
    if t is Task.SentPair:
        return v.encode(ENTAILMENT_ANSWERS.get(r.label.lower(), r.label.lower())) + [EOS]
    raise TaskError(f"no target rule for {t.value}")


def make_itm_negative(r: TaskRecord, pool: Sequence[str], rng: np.random.Generator) -> TaskRecord:
    """Swap in a uniformly drawn caption different from the current one; label becomes ``no``."""
    others = [c for c in dict.fromkeys(pool) if c != r.text]
    if len(set(pool)) < 2 or not others:
        raise TaskError("need at least two distinct captions to draw a negative")
    caption = others[int(rng.integers(len(others)))]
    rid = None if r.id is None else f"{r.id}-neg"
    return TaskRecord(Task.ITM, image=r.image, text=caption, label="no", id=rid, image_id=r.image_id)


def corrupt_text_infilling(
    ids: Sequence[int], rng: np.random.Generator, mask_ratio: float = 0.3, mean_span: float = 3.0
) -> tuple[list[int], list[int]]:
    """Span masking: Poisson span lengths cover ``mask_ratio`` of the tokens.

    Each maximal run of masked tokens becomes a single ``<mask>`` in the source.
    The target is the original sequence.
    """
    ids = list(ids)
    n = len(ids)
    if n == 0:
        raise TaskError("cannot corrupt an empty sequence")
    budget = int(round(mask_ratio * n))
    covered = np.zeros(n, dtype=bool)
    left = budget
    while left > 0:
        span = min(max(1, int(rng.poisson(mean_span))), left)
        while True:
            free = np.flatnonzero(~covered)
            # starts whose whole span is uncovered
            ok = [s for s in free if s + span <= n and not covered[s : s + span].any()]
            if ok or span == 1:
                break
            span -= 1
        s = ok[int(rng.integers(len(ok)))]
        covered[s : s + span] = True
        left -= span
    source: list[int] = []
    for k, tok in enumerate(ids):
        if not covered[k]:
            source.append(tok)
        elif k == 0 or not covered[k - 1]:
            source.append(MASK)
    return source, ids


# ---------------------------------------------------------------------------
# batch mixing


def batch_counts(ratios: Mapping[str, int], batch_size: int) -> dict[str, int]:
    """Exact per-group counts for one batch."""
    if not ratios:
        raise ConfigError("no task groups to mix")
    for g, r in ratios.items():
        if int(r) != r or r <= 0:
            raise ConfigError(f"ratio for group {g!r} must be a positive integer, got {r}")
    gcd = 0
    for r in ratios.values():
        gcd = math.gcd(gcd, int(r))
    reduced = {g: int(r) // gcd for g, r in ratios.items()}
    total = sum(reduced.values())
    if batch_size % total:
        raise ConfigError(f"batch size {batch_size} is not divisible by the reduced ratio total {total}")
    k = batch_size // total
    return {g: r * k for g, r in reduced.items()}


def mix_batches(
    streams: Mapping[str, Sequence],
    ratios: Mapping[str, int],
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[list[tuple[str, object]]]:
    """Endless batches with exact per-group counts.

    Each group's items are visited in a fresh random order per pass; a group that
    runs out starts a new pass.
    """
    counts = batch_counts(ratios, batch_size)
    for g in counts:
        if g not in streams or len(streams[g]) == 0:
            raise ConfigError(f"group {g!r} has no samples")
    order = {g: rng.permutation(len(streams[g])) for g in counts}
    cursor = {g: 0 for g in counts}
    while True:
        batch: list[tuple[str, object]] = []
        for g, c in counts.items():
            items = streams[g]
            for _ in range(c):
                if cursor[g] == len(items):
                    order[g] = rng.permutation(len(items))
                    cursor[g] = 0
                batch.append((g, items[order[g][cursor[g]]]))
                cursor[g] += 1
        yield batch


# ---------------------------------------------------------------------------
# synthetic shapes

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 90, 235),
    "yellow": (235, 215, 40),
    "white": (240, 240, 240),
    "purple": (150, 60, 200),
}
SHAPES = ("square", "bar", "column")
NUMBER_WORDS = ("zero", "one", "two", "three", "four")


def _shape_size(shape: str, unit: int, rng: np.random.Generator) -> tuple[int, int]:
    """Width and height in grid units."""
    if shape == "square":
        s = int(rng.integers(4, 8))
        return s, s
    short = int(rng.integers(3, 5))
    return (2 * short, short) if shape == "bar" else (short, 2 * short)


def caption_for(labels: Sequence[str]) -> str:
    return " and ".join(f"a {lab}" for lab in sorted(labels))


def synth_scene(grid_px: int, rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[BBox, str]]]:
    """One image with 1-4 non-overlapping rectangles snapped to a 16x16 unit grid."""
    if grid_px % 16:
        raise TaskError(f"grid_px {grid_px} not divisible by 16")
    unit = grid_px // 16
    bg = rng.integers(0, 70, size=3)
    img = np.empty((grid_px, grid_px, 3), dtype=np.uint8)
    img[:] = bg
    n_obj = int(rng.integers(1, 5))
    # colours are distinct within an image so a phrase names exactly one object
    colors = [list(COLORS)[i] for i in rng.permutation(len(COLORS))[:n_obj]]
    taken = np.zeros((16, 16), dtype=bool)
    objects: list[tuple[BBox, str]] = []
    for color in colors:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        placed = False
        for _ in range(200):
            w, h = _shape_size(shape, unit, rng)
            x = int(rng.integers(0, 16 - w + 1))
            y = int(rng.integers(0, 16 - h + 1))
            y0, y1, x0, x1 = max(y - 1, 0), min(y + h + 1, 16), max(x - 1, 0), min(x + w + 1, 16)
            if taken[y0:y1, x0:x1].any():
                continue
            taken[y : y + h, x : x + w] = True
            img[y * unit : (y + h) * unit, x * unit : (x + w) * unit] = COLORS[color]
            objects.append((BBox(x / 16, y / 16, (x + w) / 16, (y + h) / 16), f"{color} {shape}"))
            placed = True
            break
        if not placed and objects:
            continue
        if not placed:
            raise TaskError("could not place a single object")  # pragma: no cover
    return img, objects


def synth_grounding_dataset(n: int, grid_px: int, rng: np.random.Generator) -> list[TaskRecord]:
    """Records for ``n`` synthetic images: VG/GC per object, caption, detection,
    a positive and a negative ITM pair, two VQA questions, image and text infilling."""
    scenes = [synth_scene(grid_px, rng) for _ in range(n)]
    captions = [caption_for([lab for _, lab in objs]) for _, objs in scenes]
    records: list[TaskRecord] = []
    for k, (img, objs) in enumerate(scenes):
        iid = f"img{k:05d}"

        def rec(task, tag, **kw):
            records.append(TaskRecord(task, image=img, id=f"{iid}-{tag}", image_id=iid, **kw))

        for j, (box, lab) in enumerate(objs):
            rec(Task.VG, f"vg{j}", text=lab, boxes=[(box, lab)])
        for j, (box, lab) in enumerate(objs):
            rec(Task.GC, f"gc{j}", text=lab, boxes=[(box, lab)])
        rec(Task.Caption, "cap", text=captions[k])
        rec(Task.Detection, "det", boxes=list(objs))
        rec(Task.ITM, "itm", text=captions[k], label="yes")
        if len(set(captions)) > 1:
            records.append(make_itm_negative(records[-1], captions, rng))
        rec(Task.VQA, "vqa0", question="how many shapes are there?", answer=NUMBER_WORDS[len(objs)])
        shapes = [lab.split()[1] for _, lab in objs]
        unique = [lab for lab in (l for _, l in objs) if shapes.count(lab.split()[1]) == 1]
        if unique:
            lab = unique[int(rng.integers(len(unique)))]
            rec(Task.VQA, "vqa1", question=f"what color is the {lab.split()[1]}?", answer=lab.split()[0])
        rec(Task.ImageInfill, "infill")
        records.append(TaskRecord(Task.TextInfill, text=captions[k], id=f"{iid}-txt", image_id=None))
    return records


def corpus_texts(records: Sequence[TaskRecord], templates: Mapping[str, str] | None = None) -> list[str]:
    """Strings for training a vocabulary: instructions plus every text field."""
    templates = DEFAULT_TEMPLATES if templates is None else templates
    out = [string.Formatter().vformat(t, (), _Blank()) for t in templates.values()]
    for r in records:
        out += [s for s in (r.text, r.text2, r.question, r.answer, r.label) if s]
        out += [lab for _, lab in r.boxes]
    out += ["yes", "no", "maybe"]
    return out


class _Blank(dict):
    def __missing__(self, key):
        return ""


def codebook_for(records: Sequence[TaskRecord], k: int, rng: np.random.Generator, limit: int = 200) -> Codebook:
    seen: dict[str, np.ndarray] = {}
    for r in records:
        if r.image is not None and r.image_id not in seen:
            seen[r.image_id] = r.image
        if len(seen) >= limit:
            break
    return build_codebook(list(seen.values()), k, rng)


# ---------------------------------------------------------------------------
# JSONL


def write_jsonl(records: Sequence[TaskRecord], path: str | Path, image_dir: str | Path | None = None) -> None:
    """One record per line; images become PPM files referenced by relative path."""
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    written: dict[int, str] = {}
    lines = []
    for k, r in enumerate(records):
        img_ref = None
        if r.image is not None:
            key = id(r.image)
            if key not in written:
                name = f"{r.image_id or f'rec{k:06d}'}.ppm"
                write_ppm(image_dir / name, r.image)
                written[key] = str((image_dir / name).relative_to(path.parent))
            img_ref = written[key]
        row = {
            "id": r.id,
            "task": r.task.value,
            "image": img_ref,
            "text": r.text,
            "text2": r.text2,
            "question": r.question,
            "answer": r.answer,
            "label": r.label,
            "boxes": [dict(zip(("x1", "y1", "x2", "y2"), b.as_tuple()), label=lab) for b, lab in r.boxes],
        }
        lines.append(json.dumps(row, sort_keys=False))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_jsonl(path: str | Path) -> list[TaskRecord]:
    path = Path(path)
    cache: dict[str, np.ndarray] = {}
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise TaskError(f"{path}:{n}: {e}") from None
        img = None
        ref = row.get("image")
        if ref:
            if ref not in cache:
                p = Path(ref) if Path(ref).is_absolute() else path.parent / ref
                cache[ref] = read_ppm(p)
            img = cache[ref]
        boxes = [(BBox(b["x1"], b["y1"], b["x2"], b["y2"]), b.get("label", "")) for b in row.get("boxes") or []]
        out.append(
            TaskRecord(
                Task.parse(row["task"]),
                image=img,
                text=row.get("text"),
                text2=row.get("text2"),
                question=row.get("question"),
                answer=row.get("answer"),
                label=row.get("label"),
                boxes=boxes,
                id=row.get("id"),
                image_id=Path(ref).stem if ref else None,
            )
        )
    return out
