"""Procedural garment-on-body renders: the synthetic training and evaluation data.

Images are 3 x 16 x 16 with values in [-1, 1]. A fixed body template is
shifted by a seeded jitter of at most one pixel in each direction.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .prompt import PromptText, tokenize
from .seeding import rng_for

SIZE = 16
PARTS = ("head", "torso", "left_arm", "right_arm", "left_leg", "right_leg")
KINDS = ("t-shirt", "dress", "pants")
TOPS = ("t-shirt", "dress")
SLEEVES = ("none", "short", "long")
COLLARS = ("round", "v")
PATTERNS = ("solid", "striped", "dotted")
TASK_TYPES = ("color", "detail", "material", "comprehensive")

PALETTE = {
    "red": (0.9, -0.8, -0.8),
    "green": (-0.8, 0.7, -0.8),
    "blue": (-0.8, -0.8, 0.9),
    "yellow": (0.9, 0.9, -0.8),
    "black": (-0.9, -0.9, -0.9),
    "white": (0.9, 0.9, 0.9),
    "purple": (0.4, -0.8, 0.6),
    "cyan": (-0.8, 0.8, 0.8),
}
COLORS = tuple(PALETTE)
BACKGROUND = np.array([-0.2, -0.2, -0.2])
SKIN = np.array([0.8, 0.4, 0.1])
SHADE = 0.5

SLEEVE_WORDS = {"none": ("sleeveless",), "short": ("short", "sleeve"), "long": ("long", "sleeve")}
COLLAR_WORDS = {"round": ("round", "neck"), "v": ("v-neck",)}

# template boxes: (row0, row1, col0, col1), inclusive, before jitter
_BODY = {
    "head": (1, 3, 6, 9),
    "torso": (4, 9, 5, 10),
    "left_arm": (4, 10, 3, 4),
    "right_arm": (4, 10, 11, 12),
    "left_leg": (10, 14, 5, 7),
    "right_leg": (10, 14, 8, 10),
}
_SLEEVE_ROWS = {"short": (4, 6), "long": (4, 10)}
_COLLAR_CUT = {"round": [(4, 7), (4, 8)], "v": [(4, 6), (4, 7), (4, 8), (4, 9), (5, 7), (5, 8)]}
_SKIRT = (10, 12, 4, 11)
_PANTS = (9, 14, 5, 10)


@dataclass(frozen=True)
class GarmentSpec:
    kind: str = "t-shirt"
    color: str = "red"
    sleeve: str = "short"
    collar: str = "round"
    pattern: str = "solid"

    def __post_init__(self):
        if self.kind not in KINDS or self.color not in PALETTE or self.pattern not in PATTERNS:
            raise ParameterError(f"invalid garment spec {self}")
        if self.sleeve not in SLEEVES or self.collar not in COLLARS:
            raise ParameterError(f"invalid garment spec {self}")
        if self.kind == "pants" and (self.sleeve, self.collar) != ("none", "round"):
            raise ParameterError("pants carry sleeve='none' and collar='round'")

    def to_dict(self):
        return asdict(self)

    @property
    def id(self):
        return f"{self.kind}/{self.color}/{self.sleeve}/{self.collar}/{self.pattern}"


def caption(spec: GarmentSpec) -> str:
    words = ["a", spec.color]
    if spec.kind != "pants":
        words += SLEEVE_WORDS[spec.sleeve]
        words += COLLAR_WORDS[spec.collar]
    words += [spec.pattern, spec.kind]
    return " ".join(words)


def parse_caption(text, base: GarmentSpec | None = None) -> GarmentSpec:
    """Parse a caption produced by the template grammar.

    Missing slots are filled from ``base`` (or the defaults of
    :class:`GarmentSpec`). Unknown words are ignored.
    """
    tokens = list(tokenize(str(text)))
    base = base or GarmentSpec()
    fields = {}
    for tok in tokens:
        if tok in PALETTE:
            fields["color"] = tok
        elif tok in PATTERNS:
            fields["pattern"] = tok
        elif tok in KINDS:
            fields["kind"] = tok
        elif tok == "sleeveless":
            fields["sleeve"] = "none"
        elif tok == "v-neck":
            fields["collar"] = "v"
    for i, tok in enumerate(tokens[:-1]):
        nxt = tokens[i + 1]
        if nxt in ("sleeve", "sleeves") and tok in ("short", "long"):
            fields["sleeve"] = tok
        if tok == "round" and nxt in ("neck", "collar"):
            fields["collar"] = "round"
    kind = fields.get("kind", base.kind)
    if kind == "pants":
        fields.update(sleeve="none", collar="round")
    elif base.kind == "pants":
        fields.setdefault("sleeve", GarmentSpec.sleeve)
        fields.setdefault("collar", GarmentSpec.collar)
    return replace(base, **fields)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W)
    caption: str
    cloth_mask: np.ndarray  # (H, W) in {0, 1}
    foreground: np.ndarray  # (H, W) in {0, 1}
    densepose: np.ndarray  # (H, W, P) one-hot, all-zero off body
    spec: GarmentSpec
    body_seed: int


@dataclass
class EditTask:
    id: str
    input: Sample
    target_prompt: str
    task_type: str
    target_spec: GarmentSpec
    region: np.ndarray  # (H, W) target editing region

    @property
    def source_spec(self):
        return self.input.spec

    @property
    def changed(self):
        return changed_attributes(self.input.spec, self.target_spec)


def jitter(body_seed):
    rng = rng_for(body_seed, "body-jitter")
    dy, dx = rng.integers(-1, 2, size=2)
    return int(dy), int(dx)


def _box(grid, box, dy, dx, value=1):
    r0, r1, c0, c1 = box
    grid[r0 + dy : r1 + dy + 1, c0 + dx : c1 + dx + 1] = value


@lru_cache(maxsize=64)
def _body(body_seed):
    dy, dx = jitter(body_seed)
    labels = np.zeros((SIZE, SIZE), dtype=np.int64)
    for idx, name in enumerate(PARTS, start=1):
        _box(labels, _BODY[name], dy, dx, idx)
    labels.setflags(write=False)
    return labels, dy, dx


def body_parts(body_seed) -> np.ndarray:
    """Part labels 0..6 (0 = off body)."""
    return _body(body_seed)[0]


def cloth_mask(spec: GarmentSpec, body_seed) -> np.ndarray:
    _, dy, dx = _body(body_seed)
    m = np.zeros((SIZE, SIZE), dtype=np.float64)
    if spec.kind == "pants":
        _box(m, _PANTS, dy, dx)
        return m
    _box(m, _BODY["torso"], dy, dx)
    if spec.sleeve != "none":
        r0, r1 = _SLEEVE_ROWS[spec.sleeve]
        for arm in ("left_arm", "right_arm"):
            _, _, c0, c1 = _BODY[arm]
            _box(m, (r0, r1, c0, c1), dy, dx)
    for r, c in _COLLAR_CUT[spec.collar]:
        m[r + dy, c + dx] = 0
    if spec.kind == "dress":
        _box(m, _SKIRT, dy, dx)
    return m


def _pattern_shade(spec: GarmentSpec, body_seed):
    _, dy, dx = _body(body_seed)
    rows = np.arange(SIZE)[:, None] - dy
    cols = np.arange(SIZE)[None, :] - dx
    if spec.pattern == "striped":
        return np.broadcast_to(rows % 2 == 1, (SIZE, SIZE))
    if spec.pattern == "dotted":
        return (rows % 2 == 0) & (cols % 2 == 0)
    return np.zeros((SIZE, SIZE), dtype=bool)


def garment_colors(spec: GarmentSpec) -> np.ndarray:
    """Base and shade colors of the garment, shape (2, 3)."""
    base = np.asarray(PALETTE[spec.color])
    return np.stack([base, SHADE * base])


def render(spec: GarmentSpec, body_seed=0) -> Sample:
    labels = body_parts(body_seed)
    cloth = cloth_mask(spec, body_seed)
    fg = ((labels > 0) | (cloth > 0)).astype(np.float64)
    img = np.empty((SIZE, SIZE, 3))
    img[:] = BACKGROUND
    img[labels > 0] = SKIN
    base, shade = garment_colors(spec)
    shaded = _pattern_shade(spec, body_seed)
    img[(cloth > 0) & ~shaded] = base
    img[(cloth > 0) & shaded] = shade
    dp = np.zeros((SIZE, SIZE, len(PARTS)))
    for idx in range(len(PARTS)):
        dp[..., idx] = labels == idx + 1
    return Sample(
        image=np.ascontiguousarray(img.transpose(2, 0, 1)),
        caption=caption(spec),
        cloth_mask=cloth,
        foreground=fg,
        densepose=dp,
        spec=spec,
        body_seed=int(body_seed),
    )


def render_display(sample: Sample, scale=4) -> np.ndarray:
    """Nearest-neighbour upscale for inspection, (3, 16*scale, 16*scale)."""
    return np.repeat(np.repeat(sample.image, scale, axis=1), scale, axis=2)


def prototype_id(spec: GarmentSpec, body_seed=0) -> str:
    return f"{spec.id}@{int(body_seed)}"


def render_prototype(pid: str) -> np.ndarray:
    spec_part, seed = pid.rsplit("@", 1)
    kind, color, sleeve, collar, pattern = spec_part.split("/")
    return render(GarmentSpec(kind, color, sleeve, collar, pattern), int(seed)).image


def changed_attributes(src: GarmentSpec, tgt: GarmentSpec):
    return tuple(f for f in ("kind", "color", "sleeve", "collar", "pattern") if getattr(src, f) != getattr(tgt, f))


def editing_region(src: GarmentSpec, tgt: GarmentSpec, body_seed=0) -> np.ndarray:
    """Pixels that must change: the union of source and target garment regions."""
    if not changed_attributes(src, tgt):
        raise ParameterError("source and target specs are identical")
    return np.maximum(cloth_mask(src, body_seed), cloth_mask(tgt, body_seed))


def random_spec(rng, kinds=KINDS) -> GarmentSpec:
    kind = kinds[rng.integers(len(kinds))]
    color = COLORS[rng.integers(len(COLORS))]
    pattern = PATTERNS[rng.integers(len(PATTERNS))]
    if kind == "pants":
        return GarmentSpec(kind, color, "none", "round", pattern)
    sleeve = SLEEVES[rng.integers(len(SLEEVES))]
    collar = COLLARS[rng.integers(len(COLLARS))]
    return GarmentSpec(kind, color, sleeve, collar, pattern)


def _other(rng, options, current):
    choices = [o for o in options if o != current]
    return choices[rng.integers(len(choices))]


def make_target(src: GarmentSpec, task_type: str, rng) -> GarmentSpec:
    if task_type == "color":
        return replace(src, color=_other(rng, COLORS, src.color))
    if task_type == "material":
        return replace(src, pattern=_other(rng, PATTERNS, src.pattern))
    if src.kind not in TOPS:
        raise ParameterError(f"{task_type} tasks need a top, got {src.kind}")
    shape_field = ("sleeve", "collar")[rng.integers(2)]
    options = SLEEVES if shape_field == "sleeve" else COLLARS
    tgt = replace(src, **{shape_field: _other(rng, options, getattr(src, shape_field))})
    if task_type == "comprehensive":
        tgt = replace(tgt, color=_other(rng, COLORS, src.color))
        if rng.random() < 0.5:
            tgt = replace(tgt, pattern=_other(rng, PATTERNS, src.pattern))
    elif task_type != "detail":
        raise ParameterError(f"unknown task type {task_type!r}")
    return tgt


def make_task(task_id, src: GarmentSpec, tgt: GarmentSpec, body_seed, task_type) -> EditTask:
    return EditTask(
        id=task_id,
        input=render(src, body_seed),
        target_prompt=caption(tgt),
        task_type=task_type,
        target_spec=tgt,
        region=editing_region(src, tgt, body_seed),
    )


def valid_task_types(kind):
    return TASK_TYPES if kind in TOPS else ("color", "material")


def gen_training_set(n, seed=0, vocab=None, table=None):
    """``n`` MaskNet triples ``(MaskInput, target_region, target_prompt)``."""
    from .masknet import MaskInput
    from .prompt import EmbeddingTable, embed_prompt, extract_mask_prompt, load_vocabulary

    if n < 1:
        raise ParameterError("n must be >= 1")
    vocab = vocab or load_vocabulary()
    table = table or EmbeddingTable()
    out = []
    for task in gen_training_tasks(n, seed):
        mp = extract_mask_prompt(PromptText(task.target_prompt), vocab)
        inp = MaskInput(task.input.foreground, task.input.densepose, embed_prompt(mp, table).vector)
        out.append((inp, task.region, PromptText(task.target_prompt)))
    return out


def gen_training_tasks(n, seed=0):
    rng = rng_for(seed, "train-set")
    tasks = []
    for i in range(n):
        src = random_spec(rng)
        types = valid_task_types(src.kind)
        ttype = types[rng.integers(len(types))]
        tgt = make_target(src, ttype, rng)
        body_seed = int(rng.integers(2**31))
        tasks.append(make_task(f"train-{i:06d}", src, tgt, body_seed, ttype))
    return tasks


def gen_eval_set(n_per_task, seed=0, task_types=TASK_TYPES):
    if n_per_task < 1:
        raise ParameterError("n_per_task must be >= 1")
    tasks = []
    for ttype in task_types:
        rng = rng_for(seed, "eval-set", ttype)
        kinds = KINDS if ttype in ("color", "material") else TOPS
        for i in range(n_per_task):
            src = random_spec(rng, kinds)
            tgt = make_target(src, ttype, rng)
            body_seed = int(rng.integers(2**31))
            tasks.append(make_task(f"eval-{ttype}-{i:05d}", src, tgt, body_seed, ttype))
    return tasks


@lru_cache(maxsize=1)
def _catalog():
    specs = []
    for kind in KINDS:
        sleeves = ("none",) if kind == "pants" else SLEEVES
        collars = ("round",) if kind == "pants" else COLLARS
        for color, sleeve, collar, pattern in itertools.product(COLORS, sleeves, collars, PATTERNS):
            specs.append(GarmentSpec(kind, color, sleeve, collar, pattern))
    offsets = sorted({jitter(s) for s in range(64)})
    seeds = {}
    for s in range(10_000):
        seeds.setdefault(jitter(s), s)
        if len(seeds) == len(offsets):
            break
    return specs, [seeds[o] for o in offsets]


def recognize(image) -> tuple[GarmentSpec, int]:
    """Nearest template render to ``image``: returns ``(spec, body_seed)``."""
    image = np.asarray(image, dtype=np.float64)
    specs, seeds = _catalog()
    best, best_d = None, np.inf
    for seed in seeds:
        for spec in specs:
            d = float(np.sum((render(spec, seed).image - image) ** 2))
            if d < best_d:
                best, best_d = (spec, seed), d
    return best


# on-disk layout ------------------------------------------------------------

def _to_u8(img):
    return np.round((np.clip(img, -1, 1) + 1) * 127.5).astype(np.uint8)


def save_image(img, path):
    from PIL import Image

    Image.fromarray(_to_u8(np.asarray(img).transpose(1, 2, 0)), mode="RGB").save(path)


def load_image(path, size=SIZE) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 127.5 - 1.0
    h, w, _ = arr.shape
    if (h, w) != (size, size):
        if h % size or w % size:
            raise ParameterError(f"image {h}x{w} is not a multiple of {size}")
        arr = arr.reshape(size, h // size, size, w // size, 3).mean(axis=(1, 3))
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_mask(mask, path):
    from PIL import Image

    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path):
    from PIL import Image

    return (np.asarray(Image.open(path)) > 127).astype(np.float64)


_PART_PALETTE = [0, 0, 0, 230, 190, 140, 200, 40, 40, 40, 160, 40, 40, 40, 200, 200, 160, 40, 160, 40, 200]


def save_parts(densepose, path):
    from PIL import Image

    labels = np.zeros(densepose.shape[:2], dtype=np.uint8)
    for idx in range(densepose.shape[2]):
        labels[densepose[..., idx] > 0] = idx + 1
    im = Image.fromarray(labels, mode="P")
    im.putpalette(_PART_PALETTE + [0] * (768 - len(_PART_PALETTE)))
    im.save(path)


def load_parts(path, n_parts=len(PARTS)):
    from PIL import Image

    labels = np.asarray(Image.open(path))
    return np.stack([(labels == idx + 1).astype(np.float64) for idx in range(n_parts)], axis=-1)


def _task_record(task: EditTask, split, mask_prompt):
    return {
        "id": task.id,
        "split": split,
        "caption": task.input.caption,
        "spec": task.input.spec.to_dict(),
        "body_seed": task.input.body_seed,
        "target_prompt": task.target_prompt,
        "target_spec": task.target_spec.to_dict(),
        "task_type": task.task_type,
        "mask_prompt": mask_prompt,
    }


def write_dataset(root, n_train, n_eval_per_task, seed=0, vocab=None):
    """Write ``images/``, ``masks/``, ``parts/`` and ``meta.jsonl`` under ``root``."""
    from .prompt import extract_mask_prompt, load_vocabulary

    vocab = vocab or load_vocabulary()
    root = Path(root)
    for sub in ("images", "masks", "parts"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    split_tasks = [("train", gen_training_tasks(n_train, seed)) if n_train else ("train", []),
                   ("eval", gen_eval_set(n_eval_per_task, seed)) if n_eval_per_task else ("eval", [])]
    lines = []
    for split, tasks in split_tasks:
        for task in tasks:
            s = task.input
            save_image(s.image, root / "images" / f"{task.id}.png")
            save_mask(task.region, root / "masks" / f"{task.id}_region.png")
            save_mask(s.cloth_mask, root / "masks" / f"{task.id}_cloth.png")
            save_mask(s.foreground, root / "masks" / f"{task.id}_fg.png")
            save_parts(s.densepose, root / "parts" / f"{task.id}.png")
            mp = extract_mask_prompt(PromptText(task.target_prompt), vocab).text
            lines.append(json.dumps(_task_record(task, split, mp), sort_keys=True))
    (root / "meta.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return len(lines)


def read_meta(root):
    path = Path(root) / "meta.jsonl"
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_task(root, record) -> EditTask:
    """Rebuild an :class:`EditTask` from the PNGs on disk and its metadata."""
    root = Path(root)
    tid = record["id"]
    spec = GarmentSpec(**record["spec"])
    sample = Sample(
        image=load_image(root / "images" / f"{tid}.png"),
        caption=record["caption"],
        cloth_mask=load_mask(root / "masks" / f"{tid}_cloth.png"),
        foreground=load_mask(root / "masks" / f"{tid}_fg.png"),
        densepose=load_parts(root / "parts" / f"{tid}.png"),
        spec=spec,
        body_seed=int(record["body_seed"]),
    )
    return EditTask(
        id=tid,
        input=sample,
        target_prompt=record["target_prompt"],
        task_type=record["task_type"],
        target_spec=GarmentSpec(**record["target_spec"]),
        region=load_mask(root / "masks" / f"{tid}_region.png"),
    )
