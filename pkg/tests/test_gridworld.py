"""Suite generation: determinism, count contracts, pool structure, and the
generator-vs-interpreter cross-check."""

import json

import numpy as np
import pytest

from reasonembed.errors import InfeasibleInstance, UnsupportedTask
from reasonembed.gridworld import (
    Cell,
    ExampleTriplet,
    GridImage,
    QUERY_INSTRUCTIONS,
    TARGET_INSTRUCTIONS,
    TASK_KINDS,
    TaskInstance,
    generate_suite,
    load_suite,
    save_suite,
    solve_instance,
)

SMALL_COUNTS = {t: {"train": 6, "test": 3} for t in TASK_KINDS}


@pytest.fixture(scope="module")
def suite():
    return generate_suite(seed=7, counts=SMALL_COUNTS, k=4, pool_size=8)


def test_deterministic_bytes(tmp_path, suite):
    again = generate_suite(seed=7, counts=SMALL_COUNTS, k=4, pool_size=8)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_suite(p1, suite)
    save_suite(p2, again)
    assert p1.read_bytes() == p2.read_bytes()


def test_different_seed_differs(suite, tmp_path):
    other = generate_suite(seed=8, counts=SMALL_COUNTS, k=4, pool_size=8)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_suite(p1, suite)
    save_suite(p2, other)
    assert p1.read_bytes() != p2.read_bytes()


def test_count_contract():
    s = generate_suite(seed=1, counts={"vqa": 100}, k=4, pool_size=8)
    assert len(s) == 100
    assert all(i.task_kind == "vqa" for i in s)
    for inst in s:
        positives = [tid for tid in inst.pool if tid == inst.instance_id]
        assert len(positives) == 1


def test_split_counts(suite):
    for t in TASK_KINDS:
        assert len(suite.of_task(t, "train")) == 6
        assert len(suite.of_task(t, "test")) == 3


def test_pool_structure(suite):
    for inst in suite:
        assert 2 <= len(inst.pool) <= 8
        assert inst.instance_id in inst.pool
        assert len(set(inst.pool)) == len(inst.pool)
        # distractors come from the same task
        for tid in inst.pool:
            assert suite.get(tid).task_kind == inst.task_kind
        # pool targets are content-distinct from the positive
        pos = inst.positive_target
        for tid in inst.pool:
            if tid == inst.instance_id:
                continue
            other = suite.get(tid).positive_target
            key = (other.image.cells if other.image else None, other.instruction, other.text)
            pkey = (pos.image.cells if pos.image else None, pos.instruction, pos.text)
            assert key != pkey


def test_interpreter_agrees_with_generator(suite):
    for inst in suite:
        assert solve_instance(inst) == inst.answer_canonical, inst.instance_id


def test_grounding_target_is_that_cell(suite):
    for inst in suite.of_task("grounding"):
        tgt = inst.positive_target
        assert tgt.image is not None and tgt.image.k == 1
        pos = inst.answer_canonical
        r, c = int(pos[1]), int(pos[3])
        assert inst.query.image.cell_at(r, c) == tgt.image.cells[0]
        assert tgt.text == pos


def test_instructions_from_template_sets(suite):
    for inst in suite:
        assert inst.query.instruction in QUERY_INSTRUCTIONS[inst.task_kind]
        assert inst.positive_target.instruction == TARGET_INSTRUCTIONS[inst.task_kind]


def test_triplet_has_content(suite):
    for inst in suite:
        for t in (inst.query, inst.positive_target):
            assert t.image is not None or t.text


def test_suite_roundtrip(tmp_path, suite):
    path = tmp_path / "suite.jsonl"
    save_suite(path, suite)
    loaded = load_suite(path)
    assert len(loaded) == len(suite)
    for a, b in zip(suite, loaded):
        assert a == b


def test_grid_serialization_schema(tmp_path, suite):
    path = tmp_path / "suite.jsonl"
    save_suite(path, suite)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"id", "task_kind", "split", "query", "target", "pool",
                        "answer_canonical"}
    assert set(rec["query"]) == {"image_cells", "instruction", "text"}


def test_bad_inputs():
    with pytest.raises(UnsupportedTask):
        generate_suite(seed=0, counts={"poetry": 3})
    with pytest.raises(InfeasibleInstance):
        generate_suite(seed=0, counts={"vqa": 4}, pool_size=1)
    with pytest.raises(InfeasibleInstance):
        generate_suite(seed=0, counts={})


def test_solve_rejects_unknown():
    inst = TaskInstance(
        instance_id="x", task_kind="vqa", split="train",
        query=ExampleTriplet(GridImage(1, (Cell("circle", "red"),)),
                             "answer the question about the grid image",
                             "why is the sky blue"),
        positive_target=ExampleTriplet(None, "represent the answer", "blue"),
    )
    with pytest.raises(UnsupportedTask):
        solve_instance(inst)


def test_description_readout():
    g = GridImage(2, (Cell("circle", "red"), Cell("square", "blue"),
                      Cell("star", "none"), Cell("triangle", "green")))
    assert g.description() == "red circle blue square none star green triangle"


def test_generation_scales(suite):
    big = generate_suite(seed=3, counts={"grounding": 40}, k=4, pool_size=16)
    lens = {len(i.pool) for i in big}
    assert max(lens) == 16  # enough distinct cell targets to fill pools
    assert np.mean([len(i.pool) for i in big]) > 10
