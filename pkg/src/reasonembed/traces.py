"""Reasoning traces: oracle construction, noisy corruption, parsing, files.

A trace renders as `<think>` + cot + `</think> Answer: ` + final.  The
teacher oracle solves each instance by grid scan and narrates the solve path
in closed-vocabulary words.  The noisy variant keeps the ground-truth answer
for half the traces (rephrased through a fixed synonym table so the surface
differs but the canonical label survives) and replaces the final answer with
a description-only ending for the rest.  Withheld mode stands in for a
zero-shot reasoner: informative structure, never the answer.

Modes: teacher_exact, teacher_noisy, withheld, plus student for traces
decoded by a trained reasoner (kept out of the oracle itself).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import MalformedTrace, OutOfVocabulary, UnsupportedTask
from .gridworld import TaskInstance, _matches, solve_instance
from .vocabulary import NUMBER_WORDS, ORDINAL_WORDS, canonicalize, position_word

TRACE_MODES = ("teacher_exact", "teacher_noisy", "withheld", "student")

# final used when noisy corruption drops the ground truth
DESCRIPTION_ONLY_FINAL = "the content described by the reasoning above"

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)


@dataclass(frozen=True)
class ECRTrace:
    cot: str
    final: str
    mode: str

    def __post_init__(self):
        if self.mode not in TRACE_MODES:
            raise MalformedTrace(f"unknown trace mode {self.mode!r}")


def render_trace(trace: ECRTrace) -> str:
    return "<think>" + trace.cot + "</think> Answer: " + trace.final


def parse_ecr(text: str, mode: str = "teacher_exact") -> ECRTrace:
    """Extract the first well-formed think block and the trailing final."""
    m = _THINK_RE.search(text)
    if m is None:
        if "<think>" in text or "</think>" in text:
            raise MalformedTrace("unbalanced <think> tags")
        raise MalformedTrace("no <think> block found")
    rest = text[m.end():]
    marker = rest.find("Answer:")
    if marker < 0:
        raise MalformedTrace("no final-answer marker after think block")
    final = rest[marker + len("Answer:"):].strip()
    if not final:
        raise MalformedTrace("empty final answer")
    return ECRTrace(cot=m.group(1).strip(), final=final, mode=mode)


# -- synonym table ---------------------------------------------------------------

def load_synonyms() -> dict:
    raw = resources.files("reasonembed").joinpath("assets/synonyms.json").read_text()
    asset = json.loads(raw)
    return asset["entries"]


def synonym_phrase(phrase: str, table: dict) -> str:
    out = []
    for w in phrase.split():
        if w not in table:
            raise OutOfVocabulary(f"no synonym-table entry for {w!r}")
        out.append(table[w])
    return " ".join(out)


# -- oracle ----------------------------------------------------------------------

def _count_phrase(values, ordered_keys) -> str:
    counts = {k: 0 for k in ordered_keys}
    for v in values:
        counts[v] += 1
    return " ".join(f"{k} {NUMBER_WORDS[n]}" for k, n in counts.items() if n > 0)


def _transcribe(grid) -> str:
    """Cell-by-cell readout of the grid in reading order.

    Lookup questions get solved in two text-level steps: transcribe every
    patch next to its position word, then copy from the transcript.  Each
    step is dense next-token supervision, unlike a single answer token."""
    parts = []
    for r in range(grid.k):
        for c in range(grid.k):
            cell = grid.cell_at(r, c)
            parts.append(f"{position_word(r, c)} shows {cell.color} {cell.shape}")
    return " ".join(parts)


def _teacher_cot(inst: TaskInstance, answer: str) -> str:
    kind, q = inst.task_kind, inst.query
    if kind == "classification":
        family = "color" if "color" in q.instruction else "shape"
        keys = ("red", "blue", "green", "yellow", "none") if family == "color" else \
               ("circle", "square", "triangle", "star")
        body = _count_phrase([getattr(c, family) for c in q.image.cells], keys)
        return f"the grid counts {body} so the most frequent {family} is {answer}"
    if kind == "vqa":
        words = q.text.split()
        grid = q.image
        scan = _transcribe(grid)
        if words[:4] == ["what", "color", "is", "the"]:
            shape, row = words[4], NUMBER_WORDS.index(words[-1])
            col = next(c for c in range(grid.k) if grid.cell_at(row, c).shape == shape)
            pos = f"r{row}c{col}"
            cell = grid.cell_at(row, col)
            parts = []
            for r in range(grid.k):
                for c in range(grid.k):
                    other = grid.cell_at(r, c)
                    parts.append(f"{position_word(r, c)} shows "
                                 f"{other.color} {other.shape} selects {shape}")
                    if (r, c) == (row, col):
                        parts.append(f"match {pos}")
            return (f"{scan} selects {shape} {' '.join(parts)} "
                    f"so {pos} shows {cell.color} {cell.shape} "
                    f"so the color is {answer}")
        if words[:4] in (["what", "shape", "is", "at"], ["what", "color", "is", "at"]):
            pos = words[4]
            r, c = int(pos[1]), int(pos[3])
            cell = grid.cell_at(r, c)
            asked = words[1]
            return (f"{scan} the cell at {pos} shows {cell.color} {cell.shape} "
                    f"so the {asked} is {answer}")
        if words[:2] == ["how", "many"]:
            color = words[2]
            n = 0
            parts = []
            for r in range(grid.k):
                for c in range(grid.k):
                    cell = grid.cell_at(r, c)
                    parts.append(f"{position_word(r, c)} shows "
                                 f"{cell.color} {cell.shape} counts {color}")
                    if cell.color == color:
                        n += 1
                        parts.append(f"match {NUMBER_WORDS[n]}")
            return (f"{scan} counts {color} {' '.join(parts)} "
                    f"so {answer} {color} cells are in the grid")
        raise UnsupportedTask(f"{inst.instance_id}: unparsable question")
    if kind == "grounding":
        words = q.text.split()
        ordinal_word = words[1]
        ordinal = ORDINAL_WORDS.index(ordinal_word) + 1
        noun = words[2:-3]
        if len(noun) == 2 and noun[1] == "cell":
            color, shape = noun[0], None
        elif len(noun) == 2:
            color, shape = noun[0], noun[1]
        else:
            color, shape = None, noun[0]
        hits = set(_matches(q.image, color, shape))
        filt = " ".join(w for w in (color, shape) if w)
        parts = []
        n = 0
        for r in range(q.image.k):
            for c in range(q.image.k):
                cell = q.image.cell_at(r, c)
                # restate the filter after each readout so the verdict is a
                # comparison at fixed relative offsets; one anchor far back
                # drifts out of reach as the scan advances
                parts.append(f"{position_word(r, c)} shows "
                             f"{cell.color} {cell.shape} selects {filt}")
                # verdict marks cap at the ordinal inventory; questions never
                # ask past it
                if (r, c) in hits and n < len(ORDINAL_WORDS):
                    parts.append(f"match {ORDINAL_WORDS[n]} {position_word(r, c)}")
                    n += 1
        return (f"{_transcribe(q.image)} selects {filt} "
                f"{' '.join(parts)} so the {ordinal_word} match is {answer}")
    if kind == "retrieval_i2t":
        return "the grid shows these cells in reading order"
    if kind == "retrieval_t2i":
        return "the description lists the cells of the target image in reading order"
    raise UnsupportedTask(f"unknown task kind {kind!r}")


_WITHHELD = {
    "classification": (
        "the grid shows a mix of shapes and colors across its cells",
        "the most frequent category of the grid",
    ),
    "vqa": (
        "the question asks about an attribute of a specific part of the grid",
        "the requested attribute of the grid",
    ),
    "grounding": (
        "the expression selects a single cell of the grid by its listed properties",
        "the cell described by the expression",
    ),
    "retrieval_i2t": (
        "the grid lists several colored shapes in reading order",
        "the matching description of the grid",
    ),
    "retrieval_t2i": (
        "the description lists several colored shapes in reading order",
        "the matching image of the description",
    ),
}


def oracle_ecr(inst: TaskInstance, mode: str = "teacher_exact") -> ECRTrace:
    """Rule-based teacher: solve by grid scan, narrate, answer (or withhold)."""
    if inst.task_kind not in _WITHHELD:
        raise UnsupportedTask(f"unknown task kind {inst.task_kind!r}")
    if mode == "withheld":
        cot, final = _WITHHELD[inst.task_kind]
        trace = ECRTrace(cot=cot, final=final, mode="withheld")
        rendered = canonicalize(render_trace(trace))
        if canonicalize(inst.answer_canonical) in rendered:
            raise UnsupportedTask(
                f"{inst.instance_id}: withheld template leaks the answer"
            )
        return trace
    if mode != "teacher_exact":
        raise UnsupportedTask(
            f"oracle_ecr builds teacher_exact or withheld traces, not {mode!r}"
        )
    answer = solve_instance(inst)
    return ECRTrace(cot=_teacher_cot(inst, answer), final=answer, mode="teacher_exact")


def make_noisy_ecr(traces, seed: int) -> list:
    """Appendix-style corruption: keep ground truth (rephrased) w.p. 0.5,
    otherwise end with a description-only final.  Deterministic under seed."""
    table = load_synonyms()
    rng = np.random.default_rng([seed, 0xECA])
    out = []
    for t in traces:
        if t.mode != "teacher_exact":
            raise UnsupportedTask(f"make_noisy_ecr expects teacher_exact input, got {t.mode}")
        if rng.random() < 0.5:
            out.append(ECRTrace(cot=t.cot, final=synonym_phrase(t.final, table),
                                mode="teacher_noisy"))
        else:
            out.append(ECRTrace(cot=t.cot, final=DESCRIPTION_ONLY_FINAL,
                                mode="teacher_noisy"))
    return out


# -- trace files -------------------------------------------------------------------

@dataclass(frozen=True)
class EcrRecord:
    instance_id: str
    side: str  # query | target
    trace: ECRTrace


def build_ecr_records(suite, mode: str, sides=("query",), seed: int = 0) -> list:
    """Oracle traces for every instance, optionally corrupted (teacher_noisy)."""
    base_mode = "teacher_exact" if mode == "teacher_noisy" else mode
    records = []
    for side_idx, side in enumerate(sides):
        if side not in ("query", "target"):
            raise UnsupportedTask(f"unknown trace side {side!r}")
        traces = [oracle_ecr(inst, base_mode) for inst in suite]
        if mode == "teacher_noisy":
            traces = make_noisy_ecr(traces, seed + side_idx)
        records.extend(
            EcrRecord(instance_id=inst.instance_id, side=side, trace=tr)
            for inst, tr in zip(suite, traces)
        )
    return records


def save_ecr_file(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "instance_id": r.instance_id,
                "side": r.side,
                "mode": r.trace.mode,
                "cot": r.trace.cot,
                "final": r.trace.final,
            }, sort_keys=True, separators=(",", ":")) + "\n")


def load_ecr_file(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            records.append(EcrRecord(
                instance_id=rec["instance_id"], side=rec["side"],
                trace=ECRTrace(cot=rec["cot"], final=rec["final"], mode=rec["mode"]),
            ))
    return records


def trace_lookup(records) -> dict:
    """{(instance_id, side): ECRTrace} for fast joins against a suite."""
    return {(r.instance_id, r.side): r.trace for r in records}
