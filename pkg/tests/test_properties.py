"""Randomized property checks over the engine's structural guarantees."""

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medpipe.anonymize import luhn_valid, mask_table, scan_table
from medpipe.config import EngineConfig
from medpipe.embedding import FallbackEmbedder, cosine
from medpipe.gbm import matrix_from_table
from medpipe.ingest import FileArtifact, MIME_CSV, detect_mime, parse_tabular, unpack_recursive
from medpipe.matching import greedy_match, select_model
from medpipe.pipeline import CANONICAL_ORDER, Outcome, new_context, run_pipeline
from medpipe.errors import EmptyTable
from medpipe.preprocess import (
    ColumnType,
    StepKind,
    apply_transform,
    execute_plan,
    infer_column_type,
    profile_columns,
    recommend,
)
from medpipe.registry import ModelDatabase, ModelDescriptor
from medpipe.tabular import TabularDataset

from tests.conftest import MODEL_01_HEADERS, toy_rows
from tests.oracles import build_zip_bytes, full_assignment_exists, luhn_reference

ENC = FallbackEmbedder()

# no CR or other controls beyond \n and \t; CSV readers normalize bare \r,
# which is a file format ambiguity rather than an engine defect
_cell_text = st.text(
    alphabet=st.characters(
        blacklist_categories=("Cs", "Cc"), whitelist_characters="\n\t"
    ),
    max_size=24,
)
_header_text = st.text(
    alphabet=st.characters(whitelist_categories=("L", "N"), max_codepoint=0x2FF),
    min_size=1,
    max_size=12,
)


@st.composite
def string_tables(draw):
    headers = draw(st.lists(_header_text, min_size=1, max_size=5, unique=True))
    n_rows = draw(st.integers(min_value=1, max_value=8))
    columns = {h: [draw(_cell_text) for _ in range(n_rows)] for h in headers}
    return TabularDataset(headers=headers, columns=columns)


@settings(max_examples=60, deadline=None)
@given(table=string_tables(), name=st.sampled_from(["a.csv", "b.png", "c", "d.xlsx"]))
def test_csv_round_trip(table, name):
    data = table.to_csv().encode("utf-8")
    parsed = parse_tabular(FileArtifact(name=name, data=data, mime=MIME_CSV))
    assert parsed.headers == table.headers
    assert parsed.columns == {h: [str(v) for v in table.columns[h]] for h in table.headers}


@settings(max_examples=40, deadline=None)
@given(
    payload=st.binary(min_size=1, max_size=64),
    name=st.sampled_from(["x.csv", "x.json", "x.zip", "x.png", "noext", "x.xlsx"]),
)
def test_detect_mime_ignores_names(payload, name):
    base = detect_mime(FileArtifact(name="anything", data=payload))
    assert detect_mime(FileArtifact(name=name, data=payload)) == base


# leading 0xff keeps random payloads from colliding with the zip magic, which
# would make them look like corrupt nested archives
_leaf_payload = st.binary(min_size=0, max_size=16).map(lambda b: b"\xff" + b)


@st.composite
def archive_trees(draw, depth=0):
    """dict name -> bytes | subtree; leaf count bounded by the strategy sizes."""
    n_files = draw(st.integers(min_value=0, max_value=4))
    tree = {f"f{i}.bin": draw(_leaf_payload) for i in range(n_files)}
    if depth < 3:
        for i in range(draw(st.integers(min_value=0, max_value=2))):
            tree[f"z{i}.zip"] = draw(archive_trees(depth=depth + 1))
    return tree


def _count_leaves(tree) -> int:
    return sum(_count_leaves(v) if isinstance(v, dict) else 1 for v in tree.values())


def _build_tree(tree) -> bytes:
    entries = {
        name: _build_tree(value) if isinstance(value, dict) else value
        for name, value in tree.items()
    }
    return build_zip_bytes(entries)


@settings(max_examples=50, deadline=None)
@given(tree=archive_trees())
def test_unpack_leaf_count_matches_oracle(tree):
    artifact = FileArtifact(name="root.zip", data=_build_tree(tree))
    leaves = unpack_recursive(artifact, max_depth=8)
    assert len(leaves) == _count_leaves(tree)


_noisy_text = st.text(
    alphabet="abcdefghij 0123456789.-()@/",
    max_size=32,
)


@settings(max_examples=60, deadline=None)
@given(
    headers=st.lists(
        st.sampled_from(["patient_name", "birth_date", "contact", "note", "record"]),
        min_size=1, max_size=3, unique=True,
    ),
    rows=st.integers(min_value=1, max_value=6),
    data=st.data(),
)
def test_mask_idempotent_on_noisy_tables(headers, rows, data):
    columns = {
        h: [data.draw(_noisy_text) for _ in range(rows)] for h in headers
    }
    table = TabularDataset(headers=headers, columns=columns)
    masked = mask_table(table)
    assert masked.headers == table.headers
    assert masked.n_rows == table.n_rows
    assert scan_table(masked) == []
    assert mask_table(masked).columns == masked.columns


def test_luhn_matches_reference_on_ten_thousand_strings():
    rng = random.Random(4242)
    for _ in range(10_000):
        digits = "".join(str(rng.randrange(10)) for _ in range(16))
        assert luhn_valid(digits) == luhn_reference(digits)


@settings(max_examples=80, deadline=None)
@given(
    a=st.lists(st.floats(-5, 5), min_size=2, max_size=6),
    b=st.lists(st.floats(-5, 5), min_size=2, max_size=6),
    k=st.floats(min_value=0.001, max_value=100.0),
)
def test_cosine_symmetry_and_scale_invariance(a, b, k):
    size = min(len(a), len(b))
    va, vb = np.array(a[:size]), np.array(b[:size])
    if np.linalg.norm(va) == 0 or np.linalg.norm(vb) == 0:
        return
    assert abs(cosine(va, vb) - cosine(vb, va)) <= 1e-9
    assert abs(cosine(k * va, vb) - cosine(va, vb)) <= 1e-9


@st.composite
def similarity_cases(draw):
    n = draw(st.integers(min_value=1, max_value=5))
    m = draw(st.integers(min_value=1, max_value=5))
    sims = np.array(
        [[draw(st.floats(0, 1).map(lambda x: round(x, 3))) for _ in range(m)] for _ in range(n)]
    )
    threshold = draw(st.sampled_from([0.2, 0.4, 0.6, 0.8]))
    global_order = draw(st.booleans())
    return sims, threshold, global_order


@settings(max_examples=120, deadline=None)
@given(case=similarity_cases())
def test_greedy_injective_and_sound(case):
    sims, threshold, global_order = case
    n, m = sims.shape
    model = ModelDescriptor(
        id="M", kind="table", modality="t",
        headers=tuple(f"r{i}" for i in range(n)), output="r0",
    )
    columns = [f"c{j}" for j in range(m)]
    result = greedy_match(columns, model, sims, threshold, global_order)
    taken = [c for c, _ in result.assignment.values()]
    assert len(set(taken)) == len(taken)
    assert all(score > threshold for _, score in result.assignment.values())
    if result.eligible:
        assert full_assignment_exists(sims.tolist(), threshold)
    # raising the bar can only remove options
    stricter = greedy_match(columns, model, sims, min(1.0, threshold + 0.15), global_order)
    if not result.eligible:
        assert not stricter.eligible


_ORDER_DESCRIPTORS = (
    ModelDescriptor(id="A", kind="table", modality="t",
                    headers=("age", "gender", "anxiety"), output="anxiety"),
    ModelDescriptor(id="B", kind="table", modality="t",
                    headers=("age", "ECOG", "anxiety"), output="anxiety"),
    ModelDescriptor(id="C", kind="table", modality="t",
                    headers=tuple(MODEL_01_HEADERS), output="anxiety"),
)


@settings(max_examples=25, deadline=None)
@given(order=st.permutations(range(3)))
def test_select_model_ignores_registry_order(order):
    table = TabularDataset.from_rows(MODEL_01_HEADERS, toy_rows(n=12))
    baseline = ModelDatabase(table=_ORDER_DESCRIPTORS, image=())
    expected, _, _ = select_model(table, baseline, ENC, threshold=0.6)
    permuted = ModelDatabase(
        table=tuple(_ORDER_DESCRIPTORS[i] for i in order), image=()
    )
    model, _, _ = select_model(table, permuted, ENC, threshold=0.6)
    assert model.id == expected.id


@st.composite
def typed_tables(draw):
    """Small tables mixing numeric, categorical and free-text columns with nulls."""
    n_rows = draw(st.integers(min_value=12, max_value=30))
    rng = random.Random(draw(st.integers(0, 10_000)))
    columns: dict[str, list] = {}
    for i in range(draw(st.integers(min_value=1, max_value=4))):
        flavor = draw(st.sampled_from(["num", "cat", "text", "binary"]))
        name = f"{flavor}_{i}"
        if flavor == "num":
            cells = [f"{rng.uniform(-10, 10):.4f}" for _ in range(n_rows)]
        elif flavor == "cat":
            cells = [rng.choice(["red", "green", "blue"]) for _ in range(n_rows)]
        elif flavor == "binary":
            cells = [rng.choice(["0", "1"]) for _ in range(n_rows)]
        else:
            cells = [
                " ".join(rng.choice("abcdefgh") * 3 for _ in range(6)) + str(r)
                for r in range(n_rows)
            ]
        if draw(st.booleans()):
            cells[rng.randrange(n_rows)] = None
        columns[name] = cells
    return TabularDataset(headers=list(columns), columns=columns)


@settings(max_examples=40, deadline=None)
@given(table=typed_tables())
def test_typing_total_and_plans_execute_clean(table):
    metas = profile_columns(table)
    for meta in metas:
        assert infer_column_type(meta) in ColumnType
        assert meta.null_count + len(
            [v for v in table.columns[meta.name] if v is not None and str(v).strip()]
        ) == meta.row_count
        assert meta.unique_count <= meta.row_count

    plan = recommend(table, metas, None, dataset_bytes=1024)
    dropped = {s.column for s in plan.steps if s.kind == StepKind.DROP}
    if dropped == set(table.headers):
        # a plan that discards every column leaves nothing to build a table from
        with pytest.raises(EmptyTable):
            execute_plan(table, plan)
        return
    result = execute_plan(table, plan)
    assert result.table.n_rows == table.n_rows
    for header in result.table.headers:
        assert all(v is not None for v in result.table.columns[header])
    replayed = apply_transform(table, result.fitted)
    assert replayed.headers == result.table.headers
    assert replayed.columns == result.table.columns


@pytest.fixture(scope="module")
def shared_registry_file(tmp_path_factory):
    doc = {
        "table": {
            "MODEL_01": {
                "modality": "anxiety prediction",
                "headers": list(MODEL_01_HEADERS),
                "output": "anxiety",
            }
        },
        "image": {},
    }
    path = tmp_path_factory.mktemp("reg") / "registry.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


@settings(max_examples=15, deadline=None)
@given(
    threshold=st.sampled_from([0.3, 0.6, 1.0]),
    n_rows=st.integers(min_value=25, max_value=60),
)
def test_audit_is_always_a_canonical_prefix(shared_registry_file, threshold, n_rows):
    config = EngineConfig(
        registry_path=shared_registry_file, similarity_threshold=threshold, seed=3
    ).validate()
    csv_bytes = TabularDataset.from_rows(MODEL_01_HEADERS, toy_rows(n=n_rows)).to_csv().encode()
    artifact = FileArtifact(name="t.csv", data=csv_bytes)
    ctx = run_pipeline(new_context([artifact], config), config)
    stages = [e.stage for e in ctx.audit]
    assert stages == [s.value for s in CANONICAL_ORDER[: len(stages)]]
    failed = [e for e in ctx.audit if e.outcome == Outcome.FAILED.value]
    if failed:
        assert ctx.audit[-1] is failed[0] and len(failed) == 1
