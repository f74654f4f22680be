import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentplan import numerics as nx
from latentplan.evaluation import (
    HIGHER,
    LOWER,
    MetricTable,
    ScfConfig,
    evaluate,
    latent_fidelity,
    normalized_score,
    payload_wer,
    scf,
    score_grid,
    summarize,
    write_report,
)
from latentplan.inference import GenConfig
from latentplan.model import Model, ModelConfig
from latentplan.toyworld import SCENARIOS, Detection, make_split

EYE = np.eye(4)
onehot = lambda i: EYE[i]


def test_scf_hand_case():
    assert scf([Detection(0, 0.5, 0, 3)], [0, 1], onehot) == pytest.approx(0.25)


def test_scf_full_and_empty():
    assert scf([(0, 1.0), (1, 1.0)], [0, 1], onehot) == 1.0
    assert scf([], [0, 1], onehot) == 0.0
    with pytest.raises(nx.ContractError):
        scf([(0, 1.0)], [], onehot)


def test_scf_confidence_floor_and_similarity_threshold():
    assert scf([(0, 0.05)], [0], onehot) == 0.0
    near = {0: np.array([1.0, 0.0]), 1: np.array([0.6, 0.8]), 2: np.array([0.4, 0.9165])}
    assert scf([(1, 1.0)], [0], near.get) == pytest.approx(0.6)
    assert scf([(2, 1.0)], [0], near.get) == 0.0  # cosine 0.4 is below the 0.5 threshold


def test_scf_is_one_to_one():
    # one strong detection cannot cover two identical gt events
    assert scf([(0, 1.0)], [0, 0], onehot) == pytest.approx(0.5)


def test_scf_optimal_assignment_beats_greedy():
    x = np.array([1.0, 0.9, 0.0]) / np.hypot(1.0, 0.9)
    emb = {"A": np.array([1.0, 0.0, 0.0]), "B": np.array([0.0, 1.0, 0.0]), "x": x, "y": np.array([0.6, -0.8, 0.0])}
    # greedy takes the best pair (A, x) and strands B; the optimal pairing is (A, y) + (B, x)
    want = (0.6 + x[1]) / 2
    assert scf([("x", 1.0), ("y", 1.0)], ["A", "B"], emb.get) == pytest.approx(want)
    assert want > x[0] / 2


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 3), st.floats(0, 1)), max_size=6),
    st.lists(st.integers(0, 3), min_size=1, max_size=4),
    st.floats(0, 1),
)
def test_scf_bounds_and_monotone_in_confidence(dets, gt, bump):
    v = scf(dets, gt, onehot)
    assert 0.0 <= v <= 1.0
    raised = [(l, min(1.0, c + bump)) for l, c in dets]
    assert scf(raised, gt, onehot) >= v - 1e-12


def test_wer_examples():
    assert payload_wer([1, 2, 3], [1, 2, 3]) == 0.0
    assert payload_wer([1, 3], [1, 2, 3]) == pytest.approx(1 / 3)
    assert payload_wer([9, 2, 8], [1, 2, 3]) == pytest.approx(2 / 3)
    assert payload_wer([], [1, 2]) == 1.0
    with pytest.raises(nx.ContractError):
        payload_wer([1], [])


def test_latent_fidelity():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert latent_fidelity(a, a) == pytest.approx(1.0)
    assert latent_fidelity(a, -a) == pytest.approx(-1.0)
    with pytest.raises(nx.ShapeError):
        latent_fidelity(a, a[:1])


def test_latent_fidelity_random_is_near_zero():
    rng = np.random.default_rng(0)
    v = latent_fidelity(rng.normal(size=(20_000, 64)), rng.normal(size=(20_000, 64)))
    assert abs(v) < 0.005


def test_normalized_score_reference_column():
    t = MetricTable()
    for s, v in zip("ABCD", (177, 217, 230, 319)):
        t.add(s, "COMPOSITE", "FD", v, LOWER)
    got = normalized_score(t, "COMPOSITE")
    assert [round(got[s], 3) for s in "ABCD"] == [1.0, 0.718, 0.627, 0.0]


def test_normalized_score_mixed_orientations_and_ties():
    t = MetricTable()
    t.add("a", "SOUND", "scf", 0.9, HIGHER)
    t.add("b", "SOUND", "scf", 0.5, HIGHER)
    t.add("a", "SOUND", "wer", 0.3, LOWER)
    t.add("b", "SOUND", "wer", 0.1, LOWER)
    t.add("a", "SOUND", "flat", 2.0, HIGHER)
    t.add("b", "SOUND", "flat", 2.0)
    assert normalized_score(t, "SOUND") == pytest.approx({"a": 1.5 / 3, "b": 1.5 / 3})
    with pytest.raises(KeyError):
        normalized_score(t, "SPEECH")
    with pytest.raises(ValueError):
        MetricTable().add("a", "SOUND", "new", 1.0)


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_ground_truth_grids_score_perfectly(world, scenario):
    for rec in make_split(world, {scenario: 20}, 7, "gt"):
        got = score_grid(world, rec, rec.grid)
        assert got["scf"] == 1.0
        if rec.spec.payload:
            assert got["wer"] == 0.0


def test_untrained_model_scores_low(world, tmp_path):
    model = Model(ModelConfig(v_text=world.v_text), seed=0)
    recs = make_split(world, {s: 4 for s in SCENARIOS}, 2, "u")
    report = evaluate(model, world, recs, GenConfig(seed=0))
    summary = report["scenarios"]
    assert [summary[s]["count"] for s in SCENARIOS] == [4, 4, 4]
    assert np.mean([summary[s]["scf"] for s in ("SOUND", "COMPOSITE")]) < 0.15
    assert summary["SOUND"]["FAD"] is None
    write_report(tmp_path / "r.json", tmp_path / "m.csv", report, {"seed": 0})
    assert (tmp_path / "m.csv").read_text().startswith("scenario,metric,value")


def test_summarize_counts_undecodable():
    rows = [
        {"scenario": "SOUND", "undecodable": True, "scf": 0.0, "token_acc": 0.5, "latent_fidelity": 0.1},
        {"scenario": "SOUND", "undecodable": False, "scf": 1.0, "token_acc": 0.7, "latent_fidelity": 0.3},
    ]
    s = summarize(rows)["SOUND"]
    assert s["count"] == 2 and s["undecodable"] == 1 and s["scf"] == 0.5
    assert "SPEECH" not in summarize(rows)


def test_scf_config_validation():
    with pytest.raises(ValueError):
        ScfConfig(sim_threshold=1.5)
