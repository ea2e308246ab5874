"""Synthetic grid-world task suite: generation, solving, serialization.

Each instance pairs a query triplet with one positive target and a pool of
same-task distractor targets.  Grids are K x K cells of (shape, color) drawn
from a small per-grid palette so that counting and ordinal questions have
learnable structure.  Every instance is solvable by the brute-force
interpreter `solve_instance`, which is an independent code path from the
constructive generator and is checked against it over whole suites.

Tasks:
  classification   majority shape or color of the grid -> label word
  vqa              attribute/count questions -> single-word answer
  retrieval_i2t    grid -> its reading-order description
  retrieval_t2i    description -> its grid
  grounding        ordinal referring expression -> cell (1x1 grid + position)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleInstance, ShapeMismatch, UnsupportedTask
from .vocabulary import (
    COLORS,
    NUMBER_WORDS,
    ORDINAL_WORDS,
    SHAPES,
    position_word,
)

TASK_KINDS = ("classification", "vqa", "retrieval_i2t", "retrieval_t2i", "grounding")
_TASK_CODE = {t: i + 1 for i, t in enumerate(TASK_KINDS)}
_SPLIT_CODE = {"train": 0, "test": 1}
_RETRIES = 50

QUERY_INSTRUCTIONS = {
    "classification": (
        "identify the most frequent shape in the grid image",
        "identify the most frequent color in the grid image",
    ),
    "vqa": ("answer the question about the grid image",),
    "retrieval_i2t": ("find the description matching the image",),
    "retrieval_t2i": ("find the image matching the description",),
    "grounding": ("locate the cell described by the query",),
}

TARGET_INSTRUCTIONS = {
    "classification": "represent this category label",
    "vqa": "represent the answer",
    "retrieval_i2t": "represent the grid description",
    "retrieval_t2i": "represent the grid image",
    "grounding": "represent the grid cell",
}


@dataclass(frozen=True)
class Cell:
    shape: str
    color: str


@dataclass(frozen=True)
class GridImage:
    k: int
    cells: tuple  # reading order, length k*k

    def __post_init__(self):
        if len(self.cells) != self.k * self.k:
            raise ShapeMismatch(f"grid side {self.k} needs {self.k * self.k} cells")

    def cell_at(self, row: int, col: int) -> Cell:
        return self.cells[row * self.k + col]

    def description(self) -> str:
        return " ".join(f"{c.color} {c.shape}" for c in self.cells)


@dataclass(frozen=True)
class ExampleTriplet:
    image: GridImage | None
    instruction: str
    text: str


@dataclass
class TaskInstance:
    instance_id: str
    task_kind: str
    split: str
    query: ExampleTriplet
    positive_target: ExampleTriplet
    pool: list = field(default_factory=list)
    answer_canonical: str = ""


@dataclass
class Suite:
    instances: list

    def __post_init__(self):
        self._by_id = {i.instance_id: i for i in self.instances}
        if len(self._by_id) != len(self.instances):
            raise ShapeMismatch("duplicate instance ids in suite")

    def __iter__(self):
        return iter(self.instances)

    def __len__(self):
        return len(self.instances)

    def get(self, instance_id: str) -> TaskInstance:
        return self._by_id[instance_id]

    def of_task(self, task_kind: str, split: str | None = None) -> list:
        return [i for i in self.instances
                if i.task_kind == task_kind and (split is None or i.split == split)]

    def split(self, name: str) -> list:
        return [i for i in self.instances if i.split == name]

    @property
    def grid_side(self) -> int:
        for i in self.instances:
            if i.query.image is not None:
                return i.query.image.k
        raise ShapeMismatch("suite has no grid images")


# -- generation ----------------------------------------------------------------

def _sample_grid(rng, k: int) -> GridImage:
    combos = [(s, c) for s in SHAPES for c in COLORS]
    n = int(rng.integers(2, 5))
    picks = rng.choice(len(combos), size=n, replace=False)
    palette = [combos[i] for i in picks]
    idx = rng.integers(0, n, size=k * k)
    return GridImage(k=k, cells=tuple(Cell(*palette[i]) for i in idx))


def _majority(counts: dict) -> str | None:
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ordered) > 1 and ordered[0][1] == ordered[1][1]:
        return None
    return ordered[0][0] if ordered and ordered[0][1] > 0 else None


def _gen_classification(rng, k):
    family = "shape" if rng.random() < 0.5 else "color"
    for _ in range(_RETRIES):
        grid = _sample_grid(rng, k)
        values = [getattr(c, family) for c in grid.cells]
        counts: dict = {}
        for v in values:
            counts[v] = counts.get(v, 0) + 1
        answer = _majority(counts)
        if answer is None:
            continue
        query = ExampleTriplet(grid, QUERY_INSTRUCTIONS["classification"][family == "color"], "")
        target = ExampleTriplet(None, TARGET_INSTRUCTIONS["classification"], answer)
        return query, target, answer
    raise InfeasibleInstance("no grid with a strict majority after retries")


def _gen_vqa(rng, k):
    for _ in range(_RETRIES):
        grid = _sample_grid(rng, k)
        template = int(rng.integers(0, 4))
        if template == 0:
            # color of the unique <shape> in row <n>
            cands = []
            for r in range(k):
                row = [grid.cell_at(r, c) for c in range(k)]
                for s in SHAPES:
                    hits = [c for c in row if c.shape == s]
                    if len(hits) == 1:
                        cands.append((r, s, hits[0].color))
            if not cands:
                continue
            r, s, answer = cands[int(rng.integers(0, len(cands)))]
            question = f"what color is the {s} in row {NUMBER_WORDS[r]}"
        elif template == 1:
            r, c = int(rng.integers(0, k)), int(rng.integers(0, k))
            question = f"what shape is at {position_word(r, c)}"
            answer = grid.cell_at(r, c).shape
        elif template == 2:
            r, c = int(rng.integers(0, k)), int(rng.integers(0, k))
            question = f"what color is at {position_word(r, c)}"
            answer = grid.cell_at(r, c).color
        else:
            color = COLORS[int(rng.integers(0, 4))]
            count = sum(1 for c in grid.cells if c.color == color)
            question = f"how many {color} cells are in the grid"
            answer = NUMBER_WORDS[count]
        query = ExampleTriplet(grid, QUERY_INSTRUCTIONS["vqa"][0], question)
        target = ExampleTriplet(None, TARGET_INSTRUCTIONS["vqa"], answer)
        return query, target, answer
    raise InfeasibleInstance("no feasible vqa question after retries")


def _gen_retrieval_i2t(rng, k):
    grid = _sample_grid(rng, k)
    desc = grid.description()
    query = ExampleTriplet(grid, QUERY_INSTRUCTIONS["retrieval_i2t"][0], "")
    target = ExampleTriplet(None, TARGET_INSTRUCTIONS["retrieval_i2t"], desc)
    return query, target, desc


def _gen_retrieval_t2i(rng, k):
    grid = _sample_grid(rng, k)
    desc = grid.description()
    query = ExampleTriplet(None, QUERY_INSTRUCTIONS["retrieval_t2i"][0], desc)
    target = ExampleTriplet(grid, TARGET_INSTRUCTIONS["retrieval_t2i"], "")
    return query, target, desc


def _matches(grid: GridImage, color: str | None, shape: str | None) -> list:
    out = []
    for r in range(grid.k):
        for c in range(grid.k):
            cell = grid.cell_at(r, c)
            if (color is None or cell.color == color) and \
               (shape is None or cell.shape == shape):
                out.append((r, c))
    return out


def _gen_grounding(rng, k):
    for _ in range(_RETRIES):
        grid = _sample_grid(rng, k)
        anchor = grid.cells[int(rng.integers(0, k * k))]
        kind = int(rng.integers(0, 3))
        if kind == 0:
            color, shape = anchor.color, anchor.shape
            noun = f"{color} {shape}"
        elif kind == 1:
            if anchor.color == "none":
                continue
            color, shape = anchor.color, None
            noun = f"{color} cell"
        else:
            color, shape = None, anchor.shape
            noun = anchor.shape
        found = _matches(grid, color, shape)
        if not found:
            continue
        ordinal = int(rng.integers(1, min(len(found), len(ORDINAL_WORDS)) + 1))
        r, c = found[ordinal - 1]
        pos = position_word(r, c)
        expression = f"the {ORDINAL_WORDS[ordinal - 1]} {noun} in reading order"
        query = ExampleTriplet(grid, QUERY_INSTRUCTIONS["grounding"][0], expression)
        target = ExampleTriplet(GridImage(1, (grid.cell_at(r, c),)),
                                TARGET_INSTRUCTIONS["grounding"], pos)
        return query, target, pos
    raise InfeasibleInstance("no feasible referring expression after retries")


_GENERATORS = {
    "classification": _gen_classification,
    "vqa": _gen_vqa,
    "retrieval_i2t": _gen_retrieval_i2t,
    "retrieval_t2i": _gen_retrieval_t2i,
    "grounding": _gen_grounding,
}


def _normalize_counts(counts: dict) -> dict:
    norm = {}
    for task, spec in counts.items():
        if task not in TASK_KINDS:
            raise UnsupportedTask(f"unknown task kind {task!r}")
        if isinstance(spec, int):
            spec = {"train": spec, "test": 0}
        train, test = int(spec.get("train", 0)), int(spec.get("test", 0))
        if train + test < 1:
            raise InfeasibleInstance(f"counts for {task} must total at least 1")
        norm[task] = (train, test)
    if not norm:
        raise InfeasibleInstance("no task counts requested")
    return norm


def _triplet_key(t: ExampleTriplet):
    return (t.image.cells if t.image is not None else None, t.instruction, t.text)


def generate_suite(seed: int, counts: dict, k: int = 4, pool_size: int = 64) -> Suite:
    """Deterministic suite from (seed, counts, k, pool_size).

    counts: {task_kind: n} or {task_kind: {"train": n, "test": m}}.
    Pools hold the positive plus up to pool_size-1 content-distinct
    distractor targets drawn from the same task (both splits).
    """
    if pool_size < 2:
        raise InfeasibleInstance(f"pool_size must be >= 2, got {pool_size}")
    norm = _normalize_counts(counts)
    instances: list[TaskInstance] = []
    for task in TASK_KINDS:
        if task not in norm:
            continue
        task_instances = []
        for split in ("train", "test"):
            n = norm[task][_SPLIT_CODE[split]]
            for i in range(n):
                rng = np.random.default_rng([seed, _TASK_CODE[task], _SPLIT_CODE[split], i])
                query, target, answer = _GENERATORS[task](rng, k)
                task_instances.append(TaskInstance(
                    instance_id=f"{task}-{split}-{i:05d}",
                    task_kind=task, split=split,
                    query=query, positive_target=target,
                    answer_canonical=answer,
                ))
        _assign_pools(task_instances, pool_size, seed, task)
        instances.extend(task_instances)
    return Suite(instances=instances)


def _assign_pools(task_instances: list, pool_size: int, seed: int, task: str) -> None:
    for idx, inst in enumerate(task_instances):
        rng = np.random.default_rng([seed, _TASK_CODE[task], 0x900D, idx])
        order = rng.permutation(len(task_instances))
        seen = {_triplet_key(inst.positive_target)}
        distractors = []
        for j in order:
            other = task_instances[int(j)]
            if other.instance_id == inst.instance_id:
                continue
            key = _triplet_key(other.positive_target)
            if key in seen:
                continue
            seen.add(key)
            distractors.append(other.instance_id)
            if len(distractors) == pool_size - 1:
                break
        if not distractors:
            raise InfeasibleInstance(
                f"{inst.instance_id}: no content-distinct distractor available"
            )
        pool = [inst.instance_id] + distractors
        rng.shuffle(pool)
        inst.pool = pool


# -- brute-force interpreter -----------------------------------------------------

def solve_instance(inst: TaskInstance) -> str:
    """Recompute the canonical answer by exhaustive grid scan.

    Independent of the constructive generator; used to validate suites.
    """
    kind, q = inst.task_kind, inst.query
    if kind == "classification":
        family = "color" if "color" in q.instruction else "shape"
        counts: dict = {}
        for c in q.image.cells:
            v = getattr(c, family)
            counts[v] = counts.get(v, 0) + 1
        ans = _majority(counts)
        if ans is None:
            raise UnsupportedTask(f"{inst.instance_id}: no strict majority")
        return ans
    if kind == "vqa":
        words = q.text.split()
        grid = q.image
        if words[:4] == ["what", "color", "is", "the"]:
            shape, row = words[4], NUMBER_WORDS.index(words[-1])
            hits = [grid.cell_at(row, c) for c in range(grid.k)
                    if grid.cell_at(row, c).shape == shape]
            if len(hits) != 1:
                raise UnsupportedTask(f"{inst.instance_id}: non-unique row shape")
            return hits[0].color
        if words[:4] == ["what", "shape", "is", "at"]:
            r, c = _parse_position(words[4])
            return grid.cell_at(r, c).shape
        if words[:4] == ["what", "color", "is", "at"]:
            r, c = _parse_position(words[4])
            return grid.cell_at(r, c).color
        if words[:2] == ["how", "many"]:
            color = words[2]
            return NUMBER_WORDS[sum(1 for c in grid.cells if c.color == color)]
        raise UnsupportedTask(f"{inst.instance_id}: unparsable question {q.text!r}")
    if kind == "retrieval_i2t":
        return q.image.description()
    if kind == "retrieval_t2i":
        return q.text
    if kind == "grounding":
        words = q.text.split()
        # the <ordinal> <noun...> in reading order
        ordinal = ORDINAL_WORDS.index(words[1]) + 1
        noun = words[2:-3]
        if len(noun) == 2 and noun[1] == "cell":
            color, shape = noun[0], None
        elif len(noun) == 2:
            color, shape = noun[0], noun[1]
        else:
            color, shape = None, noun[0]
        found = _matches(q.image, color, shape)
        if len(found) < ordinal:
            raise UnsupportedTask(f"{inst.instance_id}: referent missing")
        return position_word(*found[ordinal - 1])
    raise UnsupportedTask(f"unknown task kind {kind!r}")


def _parse_position(word: str) -> tuple[int, int]:
    # r<digit>c<digit>
    if len(word) == 4 and word[0] == "r" and word[2] == "c":
        return int(word[1]), int(word[3])
    raise UnsupportedTask(f"bad position word {word!r}")


# -- serialization ----------------------------------------------------------------

def _triplet_record(t: ExampleTriplet) -> dict:
    return {
        "image_cells": [[c.shape, c.color] for c in t.image.cells] if t.image else None,
        "instruction": t.instruction,
        "text": t.text,
    }


def _triplet_from_record(rec: dict) -> ExampleTriplet:
    cells = rec["image_cells"]
    image = None
    if cells is not None:
        k = int(round(len(cells) ** 0.5))
        image = GridImage(k=k, cells=tuple(Cell(s, c) for s, c in cells))
    return ExampleTriplet(image=image, instruction=rec["instruction"], text=rec["text"])


def save_suite(path, suite: Suite) -> None:
    with open(path, "w") as fh:
        for inst in suite.instances:
            rec = {
                "id": inst.instance_id,
                "task_kind": inst.task_kind,
                "split": inst.split,
                "query": _triplet_record(inst.query),
                "target": _triplet_record(inst.positive_target),
                "pool": list(inst.pool),
                "answer_canonical": inst.answer_canonical,
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_suite(path) -> Suite:
    instances = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            instances.append(TaskInstance(
                instance_id=rec["id"], task_kind=rec["task_kind"], split=rec["split"],
                query=_triplet_from_record(rec["query"]),
                positive_target=_triplet_from_record(rec["target"]),
                pool=list(rec["pool"]),
                answer_canonical=rec["answer_canonical"],
            ))
    return Suite(instances=instances)
