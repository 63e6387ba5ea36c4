import numpy as np
import pytest

from medpipe.embedding import FallbackEmbedder, cosine, embed
from medpipe.errors import NoEligibleModel, RoutingInconclusive
from medpipe.ingest import FileArtifact
from medpipe.matching import (
    ImageRoute,
    MatchResult,
    ScriptedVisionClient,
    find_image_model,
    greedy_match,
    match_all,
    route_image,
    select_model,
    similarity_matrix,
)
from medpipe.registry import ModelDescriptor, parse_registry
from medpipe.tabular import TabularDataset

from tests.conftest import MODEL_01_HEADERS, make_png_bytes, toy_rows
from tests.oracles import full_assignment_exists

ENC = FallbackEmbedder()


def model_of(headers, mid="M", output=None):
    return ModelDescriptor(
        id=mid,
        kind="table",
        modality="test",
        headers=tuple(headers),
        output=output or headers[-1],
    )


def test_similarity_matrix_values():
    required = ["age", "gender"]
    columns = ["age", "sex", "height"]
    sims = similarity_matrix(required, columns, ENC)
    vecs = dict(zip(required + columns, embed(required + columns, ENC)))
    for i, r in enumerate(required):
        for j, c in enumerate(columns):
            assert sims[i, j] == pytest.approx(cosine(vecs[r], vecs[c]), abs=1e-12)
    assert sims[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_greedy_order_dependence():
    # first required header takes the shared best column; the second settles
    sims = np.array([[0.9, 0.8], [0.85, 0.8]])
    m = model_of(["r1", "r2"])
    res = greedy_match(["c1", "c2"], m, sims, threshold=0.6)
    assert res.assignment["r1"] == ("c1", 0.9)
    assert res.assignment["r2"] == ("c2", 0.8)
    assert res.eligible


def test_greedy_threshold_is_strict():
    m = model_of(["r1", "r2"])
    sims = np.array([[0.59, 0.0], [0.0, 0.6]])
    res = greedy_match(["c1", "c2"], m, sims, threshold=0.6)
    assert res.assignment == {}
    assert not res.eligible
    assert res.mean_similarity == 0.0
    just_over = greedy_match(
        ["c1", "c2"], m, np.array([[0.6001, 0.0], [0.0, 0.6001]]), threshold=0.6
    )
    assert just_over.eligible


def test_greedy_injective():
    sims = np.array([[0.9, 0.7], [0.95, 0.65]])
    res = greedy_match(["c1", "c2"], model_of(["r1", "r2"]), sims)
    cols = [c for c, _ in res.assignment.values()]
    assert len(cols) == len(set(cols))


def test_greedy_global_order_variant():
    # global order lets the higher-scoring later row claim the shared column
    sims = np.array([[0.9, 0.8], [0.95, 0.1]])
    m = model_of(["r1", "r2"])
    plain = greedy_match(["c1", "c2"], m, sims, threshold=0.6)
    swapped = greedy_match(["c1", "c2"], m, sims, threshold=0.6, global_order=True)
    assert plain.assignment["r1"][0] == "c1"
    assert swapped.assignment["r2"][0] == "c1"
    assert swapped.assignment["r1"][0] == "c2"


def test_greedy_shape_mismatch():
    with pytest.raises(ValueError):
        greedy_match(["c1"], model_of(["r1", "r2"]), np.zeros((1, 1)))


def test_greedy_against_feasibility_oracle_small():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n_req = int(rng.integers(2, 5))
        n_col = int(rng.integers(n_req, 6))
        sims = rng.uniform(0.0, 1.0, size=(n_req, n_col))
        m = model_of([f"r{i}" for i in range(n_req)])
        res = greedy_match([f"c{j}" for j in range(n_col)], m, sims, threshold=0.6)
        for req, (col, score) in res.assignment.items():
            assert score > 0.6
        if not full_assignment_exists(sims.tolist(), 0.6):
            assert not res.eligible


def test_select_model_prefers_higher_mean(registry):
    doc = {
        "table": {
            "LOW": {"modality": "m", "headers": ["alpha", "beta"], "output": "beta"},
            "HIGH": {"modality": "m", "headers": ["age", "gender"], "output": "gender"},
        }
    }
    db = parse_registry(doc)
    table = TabularDataset.from_rows(
        ["age", "gender", "alpha", "beta"], [["1", "M", "x", "y"]]
    )
    model, filtered, result = select_model(table, db, ENC, threshold=0.5)
    assert model.id in {"HIGH", "LOW"}
    # both match perfectly (their own headers are present); tie broken by id
    assert result.mean_similarity == pytest.approx(1.0, abs=1e-9)
    assert model.id == "HIGH"


def test_select_model_filters_and_renames():
    db = parse_registry(
        {"table": {"M": {"modality": "m", "headers": ["age", "sex"], "output": "sex"}}}
    )
    table = TabularDataset.from_rows(
        ["patient age", "sex", "extra"], [["40", "F", "z"]]
    )
    model, filtered, result = select_model(table, db, ENC, threshold=0.3)
    assert filtered.headers == ["age", "sex"]
    assert filtered.row(0) == ["40", "F"]


def test_select_model_no_eligible():
    db = parse_registry(
        {"table": {"M": {"modality": "m", "headers": ["zzz", "qqq"], "output": "qqq"}}}
    )
    table = TabularDataset.from_rows(["age", "gender"], [["1", "M"]])
    with pytest.raises(NoEligibleModel):
        select_model(table, db, ENC, threshold=0.6)


def test_select_model_no_table_models():
    db = parse_registry(
        {"image": {"I": {"modality": "scan", "caption": "finds things"}}}
    )
    table = TabularDataset.from_rows(["a"], [["1"]])
    with pytest.raises(ValueError):
        select_model(table, db, ENC)


def test_match_all_covers_every_table_model(registry):
    table = TabularDataset.from_rows(MODEL_01_HEADERS, toy_rows(5))
    results = match_all(list(table.headers), registry, ENC)
    assert [m.id for m, _ in results] == ["MODEL_01"]
    assert all(isinstance(r, MatchResult) for _, r in results)


# --- image routing -----------------------------------------------------------------


def scan_artifacts(n=3):
    return [
        FileArtifact(name=f"scan{i}.png", data=make_png_bytes(8 + i, 8), mime="image/png")
        for i in range(n)
    ]


def test_find_image_model(registry):
    m = find_image_model(registry, "colon colonoscopy scan", "adenomatous")
    assert m is not None and m.id == "MODEL_02"
    assert find_image_model(registry, "colon colonoscopy scan", "melanoma") is None
    assert find_image_model(registry, "chest x-ray", "adenomatous") is None


def test_route_image_first_attempt(registry):
    vlm = ScriptedVisionClient(
        responses=[(("colon colonoscopy scan", 0.92), ("adenomatous", 0.81))]
    )
    route = route_image(scan_artifacts(), registry, vlm, seed=5)
    assert isinstance(route, ImageRoute)
    assert route.model_id == "MODEL_02"
    assert route.attempts == 1
    assert route.confidences == (0.92, 0.81)


def test_route_image_retries_on_low_confidence(registry):
    vlm = ScriptedVisionClient(
        responses=[
            (("colon colonoscopy scan", 0.2), ("adenomatous", 0.9)),
            (("colon colonoscopy scan", 0.9), ("adenomatous", 0.3)),
            (("colon colonoscopy scan", 0.9), ("hyperplastic", 0.7)),
        ]
    )
    route = route_image(scan_artifacts(), registry, vlm, seed=5)
    assert route.attempts == 3
    assert route.disease == "hyperplastic"


def test_route_image_inconclusive(registry):
    vlm = ScriptedVisionClient(
        responses=[(("colon colonoscopy scan", 0.1), ("adenomatous", 0.1))]
    )
    with pytest.raises(RoutingInconclusive):
        route_image(scan_artifacts(), registry, vlm, seed=5, max_attempts=3)
    assert vlm.calls == 3


def test_route_image_unknown_disease_burns_attempt(registry):
    vlm = ScriptedVisionClient(
        responses=[
            (("colon colonoscopy scan", 0.9), ("melanoma", 0.9)),
            (("colon colonoscopy scan", 0.9), ("adenomatous", 0.9)),
        ]
    )
    route = route_image(scan_artifacts(), registry, vlm, seed=5)
    assert route.attempts == 2


def test_route_image_seeded_pick_is_deterministic(registry):
    vlm1 = ScriptedVisionClient(
        responses=[(("colon colonoscopy scan", 0.9), ("adenomatous", 0.9))]
    )
    vlm2 = ScriptedVisionClient(
        responses=[(("colon colonoscopy scan", 0.9), ("adenomatous", 0.9))]
    )
    r1 = route_image(scan_artifacts(), registry, vlm1, seed=123)
    r2 = route_image(scan_artifacts(), registry, vlm2, seed=123)
    assert r1 == r2


def test_route_image_requires_images(registry):
    vlm = ScriptedVisionClient(responses=[(("x", 1.0), ("y", 1.0))])
    with pytest.raises(ValueError):
        route_image([], registry, vlm, seed=1)
