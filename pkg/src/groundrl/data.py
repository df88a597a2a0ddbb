"""Synthetic grounded VQA: shapes on a blank grid, templated questions, boxes.

Every object fills exactly one patch, so a question's evidence is a set of
patch-aligned pixel boxes. Three question families:

* ``color``: "what color is the <shape>" (queried shape is unique)
* ``row_shape``: "what shape is in <rowR>" (row holds exactly one object)
* ``count``: "how many <color>" (one box per matching object)

On disk a dataset is ``manifest.json``, ``samples.jsonl`` and
``images/<id>.ppm``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ConfigError
from .render import PixmapError, decode_ppm, encode_ppm
from .reward import BoundingBox
from .vocab import (
    BEGIN_THINK,
    COLORS,
    COUNTS,
    END_THINK,
    EOS,
    MAX_GRID,
    SHAPES,
    TOKEN_ID,
    TOKENS,
    col_token,
    ids,
    row_token,
)

DATASET_VERSION = 1
FAMILIES = ("color", "row_shape", "count")

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}


class DatasetError(ValueError):
    pass


class ConsistencyError(DatasetError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    grid: tuple[int, int] = (6, 6)
    patch_px: int = 4
    min_objects: int = 2
    max_objects: int = 4
    families: tuple[str, ...] = FAMILIES

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "families", tuple(self.families))

    def validate(self) -> "TaskConfig":
        rows, cols = self.grid
        if not (1 <= rows <= MAX_GRID and 1 <= cols <= MAX_GRID):
            raise ConfigError(f"grid {self.grid} outside 1..{MAX_GRID}")
        if self.patch_px < 4:
            raise ConfigError("patch_px must be >= 4 for the shapes to be distinguishable")
        if not 1 <= self.min_objects <= self.max_objects <= min(len(COUNTS), rows * cols):
            raise ConfigError(f"bad object range {self.min_objects}..{self.max_objects}")
        if not self.families or any(f not in FAMILIES for f in self.families):
            raise ConfigError(f"unknown families in {self.families}")
        if "row_shape" in self.families and rows < 2 and self.max_objects > 1:
            raise ConfigError("row questions need at least two rows")
        return self

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.grid[0] * self.patch_px, self.grid[1] * self.patch_px

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["families"] = list(self.families)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        return cls(**d).validate()


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    color: str
    shape: str


@dataclass
class DataSample:
    id: str
    image: np.ndarray
    question: list[int]
    answer: list[int]
    boxes: list[BoundingBox]
    family: str
    objects: list[SceneObject] = field(default_factory=list)
    warmup_response: list[int] = field(default_factory=list)

    def same_as(self, other: "DataSample") -> bool:
        return (
            self.id == other.id
            and np.array_equal(self.image, other.image)
            and self.question == other.question
            and self.answer == other.answer
            and self.boxes == other.boxes
            and self.family == other.family
            and self.objects == other.objects
            and self.warmup_response == other.warmup_response
        )


def shape_mask(shape: str, p: int) -> np.ndarray:
    i, j = np.indices((p, p))
    if shape == "square":
        return np.ones((p, p), dtype=bool)
    if shape == "ring":
        return (i == 0) | (j == 0) | (i == p - 1) | (j == p - 1)
    if shape == "cross":
        lo, hi = p // 4, p - p // 4
        return ((i >= lo) & (i < hi)) | ((j >= lo) & (j < hi))
    if shape == "wedge":
        return i >= j
    raise ValueError(f"unknown shape {shape!r}")


def draw_scene(objects: Iterable[SceneObject], task: TaskConfig) -> np.ndarray:
    h, w = task.image_hw
    p = task.patch_px
    img = np.zeros((h, w, 3))
    for o in objects:
        block = img[o.row * p : (o.row + 1) * p, o.col * p : (o.col + 1) * p]
        block[shape_mask(o.shape, p)] = RGB[o.color]
    return img


def object_box(o: SceneObject, p: int) -> BoundingBox:
    return BoundingBox(o.col * p, o.row * p, (o.col + 1) * p, (o.row + 1) * p)


def pointer_phrase(targets: Sequence[SceneObject]) -> list[int]:
    out = [TOKEN_ID["look"]]
    for o in targets:
        out += [row_token(o.row), col_token(o.col)]
    return out


def scripted_response(pointer: Sequence[int], answer: Sequence[int]) -> list[int]:
    return [BEGIN_THINK, *pointer, END_THINK, *answer, EOS]


def _candidates(objects: list[SceneObject], family: str):
    if family == "color":
        for s in SHAPES:
            hits = [o for o in objects if o.shape == s]
            if len(hits) == 1:
                yield ids(f"what color is the {s}"), [TOKEN_ID[hits[0].color]], hits
    elif family == "row_shape":
        for r in range(MAX_GRID):
            hits = [o for o in objects if o.row == r]
            if len(hits) == 1:
                yield ids(["what", "shape", "is", "in", f"row{r}"]), [TOKEN_ID[hits[0].shape]], hits
    elif family == "count":
        for c in COLORS:
            hits = [o for o in objects if o.color == c]
            if hits:
                yield ids(f"how many {c}"), [TOKEN_ID[COUNTS[len(hits) - 1]]], hits


def generate_sample(task: TaskConfig, seed: int, sample_id: str | None = None) -> DataSample:
    task.validate()
    rng = np.random.default_rng(seed)
    rows, cols = task.grid
    p = task.patch_px
    while True:
        n = int(rng.integers(task.min_objects, task.max_objects + 1))
        cells = rng.choice(rows * cols, size=n, replace=False)
        objects = [
            SceneObject(int(c // cols), int(c % cols), COLORS[rng.integers(len(COLORS))], SHAPES[rng.integers(len(SHAPES))])
            for c in sorted(cells)
        ]
        family = task.families[int(rng.integers(len(task.families)))]
        options = list(_candidates(objects, family))
        if options:
            break
    question, answer, targets = options[int(rng.integers(len(options)))]
    return DataSample(
        id=sample_id if sample_id is not None else f"s{seed}",
        image=draw_scene(objects, task),
        question=list(question),
        answer=list(answer),
        boxes=[object_box(o, p) for o in targets],
        family=family,
        objects=objects,
        warmup_response=scripted_response(pointer_phrase(targets), answer),
    )


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


@dataclass
class Dataset:
    task: TaskConfig
    samples: list[DataSample]
    splits: dict[str, list[str]]
    seed: int

    def split(self, name: str) -> list[DataSample]:
        wanted = set(self.splits[name])
        return [s for s in self.samples if s.id in wanted]

    def manifest(self) -> dict:
        return {
            "format_version": DATASET_VERSION,
            "config": {"task": self.task.to_dict(), "vocabulary": list(TOKENS)},
            "sample_count": len(self.samples),
            "splits": {k: list(v) for k, v in self.splits.items()},
            "seed": self.seed,
        }


def build_dataset(task: TaskConfig, n: int, n_test: int, seed: int) -> Dataset:
    if not 0 <= n_test <= n:
        raise ConfigError(f"n_test={n_test} not within 0..{n}")
    samples = [generate_sample(task, sample_seed(seed, i), f"{i:05d}") for i in range(n)]
    order = np.random.default_rng([seed, 1]).permutation(n)
    test = {f"{i:05d}" for i in order[:n_test]}
    splits = {
        "train": [s.id for s in samples if s.id not in test],
        "test": [s.id for s in samples if s.id in test],
    }
    return Dataset(task, samples, splits, seed)


# ----------------------------------------------------------------------- io

def _sample_record(s: DataSample) -> dict:
    return {
        "id": s.id,
        "image": f"images/{s.id}.ppm",
        "family": s.family,
        "question": s.question,
        "answer": s.answer,
        "boxes": [b.as_list() for b in s.boxes],
        "objects": [[o.row, o.col, o.color, o.shape] for o in s.objects],
        "warmup_response": s.warmup_response,
    }


def write_dataset(path: str | Path, ds: Dataset) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        (root / "images" / f"{s.id}.ppm").write_bytes(encode_ppm(s.image))
    with open(root / "samples.jsonl", "w") as fh:
        for s in ds.samples:
            fh.write(json.dumps(_sample_record(s)) + "\n")
    (root / "manifest.json").write_text(json.dumps(ds.manifest(), indent=1) + "\n")
    return root


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest in {root}: {exc}") from None
    if manifest.get("format_version") != DATASET_VERSION:
        raise DatasetError(f"dataset version {manifest.get('format_version')!r} != {DATASET_VERSION}")
    task = TaskConfig.from_dict(manifest["config"]["task"])
    if list(manifest["config"].get("vocabulary", [])) != list(TOKENS):
        raise DatasetError("dataset vocabulary differs from this build's vocabulary")

    samples = []
    with open(root / "samples.jsonl") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise DatasetError(f"samples.jsonl line {lineno}: truncated record")
            try:
                rec = json.loads(line)
                image = decode_ppm((root / rec["image"]).read_bytes())
                samples.append(
                    DataSample(
                        id=rec["id"],
                        image=image,
                        question=list(rec["question"]),
                        answer=list(rec["answer"]),
                        boxes=[BoundingBox.from_list(b) for b in rec["boxes"]],
                        family=rec["family"],
                        objects=[SceneObject(int(r), int(c), col, sh) for r, c, col, sh in rec["objects"]],
                        warmup_response=list(rec["warmup_response"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, OSError, PixmapError) as exc:
                raise DatasetError(f"samples.jsonl line {lineno}: {exc}") from None

    if len(samples) != manifest["sample_count"]:
        raise ConsistencyError(
            f"manifest lists {manifest['sample_count']} samples but samples.jsonl has {len(samples)}"
        )
    splits = {k: list(v) for k, v in manifest["splits"].items()}
    all_ids = [s.id for s in samples]
    split_ids = [i for v in splits.values() for i in v]
    if sorted(split_ids) != sorted(all_ids) or len(set(split_ids)) != len(split_ids):
        raise ConsistencyError("splits are not a disjoint cover of the samples")
    return Dataset(task, samples, splits, int(manifest["seed"]))
