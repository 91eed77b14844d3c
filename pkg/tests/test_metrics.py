import json
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from polarsim.agents import RandomAgent
from polarsim.harness import EpisodeRecord, EvaluationReport, evaluate, generate_population, make_experiment
from polarsim.metrics import (
    SummaryRow,
    belief_histogram,
    composition_matrix,
    disambiguate,
    export_report,
    load_population,
    read_csv,
    save_population,
    summarize,
)
from polarsim.storage import ContainerError, write_container


def hand_report(clicks_per_user, lengths, attrited, name="hand"):
    n, life = len(lengths), max(lengths)
    actions = np.full((n, life), -1, dtype=np.int8)
    clicks = np.zeros((n, life), dtype=bool)
    for i, (c, n_i) in enumerate(zip(clicks_per_user, lengths)):
        actions[i, :n_i] = i % 7
        clicks[i, :c] = True
    return EvaluationReport(
        agent_name=name, actions=actions, clicks=clicks, rewards=clicks.astype(float),
        beliefs=np.zeros((n, life + 1)), lengths=np.array(lengths), attrited=np.array(attrited),
        ideology=np.arange(n) % 7,
    )


@pytest.fixture(scope="module")
def random_report():
    cfg = make_experiment("random")
    return evaluate(RandomAgent(), cfg, name="random")


# --- histograms ---------------------------------------------------------------


def test_all_zero_beliefs_single_bin():
    h = belief_histogram(np.zeros(40), 50)
    assert np.count_nonzero(h.counts) == 1
    k = int(np.flatnonzero(h.counts)[0])
    assert h.edges[k] <= 0 < h.edges[k + 1]
    assert h.total == 40


def test_edges_and_right_edge_value():
    h = belief_histogram([-1.0, 1.0, 1.0], 4)
    assert h.edges.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert h.counts.tolist() == [1, 0, 0, 2]


def test_out_of_range_rejected():
    with pytest.raises(ValueError):
        belief_histogram([0.2, 1.0001])
    with pytest.raises(ValueError):
        belief_histogram([np.nan])


def test_uniform_beliefs_pass_chi_square():
    b = np.random.default_rng(0).uniform(-1, 1, 50_000)
    h = belief_histogram(b, 50)
    assert stats.chisquare(h.counts).pvalue > 0.01


@settings(max_examples=50, deadline=None)
@given(b=st.lists(st.floats(-1, 1), max_size=200), bins=st.integers(1, 80))
def test_histogram_conserves_count(b, bins):
    h = belief_histogram(b, bins)
    assert h.total == len(b) and h.bins == bins
    assert np.all(np.diff(h.edges) > 0)


# --- composition --------------------------------------------------------------


def test_single_user_rows_are_one_hot():
    rec = EpisodeRecord([2, 5, 5, 0], [False] * 4, [0.0] * 4, [0.0] * 4, 0.1, 0.1, None, 3)
    comp = composition_matrix([rec])
    assert comp.freq.shape == (7, 4, 7)
    assert np.array_equal(comp.freq[3], np.eye(7)[[2, 5, 5, 0]])
    assert comp.survivors[3].tolist() == [1, 1, 1, 1]
    assert not comp.defined[[0, 1, 2, 4, 5, 6]].any()
    assert np.isnan(comp.freq[0]).all()


def test_cells_beyond_last_survivor_undefined():
    recs = [
        EpisodeRecord([1] * 3, [False] * 3, [0.0] * 3, [0.0] * 3, 0.0, 0.0, 3, 2),
        EpisodeRecord([4] * 5, [False] * 5, [0.0] * 5, [0.0] * 5, 0.0, 0.0, 5, 2),
    ]
    comp = composition_matrix(recs, steps=8)
    assert comp.survivors[2].tolist() == [2, 2, 2, 1, 1, 0, 0, 0]
    assert comp.freq[2, 0].tolist() == [0, 0.5, 0, 0, 0.5, 0, 0]
    assert comp.defined[2, :5].all() and not comp.defined[2, 5:].any()


def test_random_agent_composition_near_uniform(random_report):
    comp = composition_matrix(random_report)
    d = comp.defined
    sums = comp.freq[d].sum(axis=1)
    assert np.all(np.abs(sums - 1) < 1e-12)
    # pooled over each category's first 20 steps: multinomial 1/7 within 4 SE
    for k in range(7):
        n = comp.survivors[k, :20]
        if n.sum() < 200:
            continue
        pooled = (comp.freq[k, :20] * n[:, None]).sum(axis=0) / n.sum()
        se = np.sqrt((1 / 7) * (6 / 7) / n.sum())
        assert np.all(np.abs(pooled - 1 / 7) < 4 * se)


def test_report_and_records_agree(random_report):
    a = composition_matrix(random_report)
    b = composition_matrix(random_report.records, steps=a.steps)
    assert np.array_equal(a.survivors, b.survivors)
    assert np.allclose(a.freq, b.freq, equal_nan=True)


# --- summaries ----------------------------------------------------------------


def test_two_user_summary():
    rep = hand_report([2, 3], [8, 12], [True, False])
    (row,) = summarize(rep)
    assert row.ctr == 0.25 and row.attrition_rate == 0.5


def test_zero_clicks_and_full_attrition(random_report):
    (row,) = summarize(hand_report([0, 0], [3, 4], [False, False]))
    assert row.ctr == 0.0
    (row,) = summarize(random_report)
    assert random_report.population == 1000 and row.attrition_rate == 1.0


def test_summary_validation():
    with pytest.raises(ValueError):
        summarize([])
    with pytest.raises(ValueError):
        SummaryRow("x", 1.2, 0.0)


def test_disambiguate():
    assert disambiguate(["a", "b", "a", "a", "c"]) == ["a", "b", "a-2", "a-3", "c"]


# --- population persistence -----------------------------------------------------


def test_population_round_trip(tmp_path):
    cfg = make_experiment()
    pop = generate_population(cfg, 50)
    pop.engagement[3] = 0.123456789
    path = save_population(tmp_path / "p.snapshot", pop, seed=cfg.eval_seed)
    loaded, seed = load_population(path)
    assert seed == cfg.eval_seed
    assert loaded.users() == pop.users()
    for name in ("belief", "alive", "decay_rate"):
        assert getattr(loaded, name).dtype == getattr(pop, name).dtype


def test_population_wrong_version(tmp_path):
    pop = generate_population(make_experiment(), 5)
    path = save_population(tmp_path / "p.snapshot", pop, 1)
    bad = tmp_path / "bad.snapshot"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(bad, "w") as dst:
        for name in src.namelist():
            data = src.read(name)
            if name == "__meta__.json":
                data = json.dumps({**json.loads(data), "version": 99})
            dst.writestr(name, data)
    with pytest.raises(ContainerError, match="version"):
        load_population(bad)


def test_population_rejects_other_kinds(tmp_path):
    path = write_container(tmp_path / "x", "agent", {"belief": np.zeros(2)})
    with pytest.raises(ContainerError):
        load_population(path)


# --- export -------------------------------------------------------------------


def test_export_row_counts_and_reexport(tmp_path, random_report):
    files = export_report(random_report, tmp_path / "a", bins=50, stride=10)
    assert len(read_csv(files["belief_hist_initial"])) + 1 == 51
    assert len(read_csv(files["composition"])) == 7 * 500
    rows = read_csv(files["eval_summary"])
    assert rows == [{"agent": "random", "ctr": repr(random_report.ctr), "attrition_rate": "1.0"}]
    # undefined composition cells are empty fields
    last = [r for r in read_csv(files["composition"]) if r["step"] == "499"]
    assert all(r["f1"] == "" and r["survivors"] == "0" for r in last)
    again = export_report(random_report, tmp_path / "a", bins=50, stride=10)
    other = export_report(random_report, tmp_path / "b", bins=50, stride=10)
    for key, path in files.items():
        assert again[key].read_bytes() == path.read_bytes() == other[key].read_bytes()


def test_trajectory_stride_includes_last_step(tmp_path):
    rep = hand_report([0, 0], [7, 3], [True, True])
    rep.beliefs[:] = np.arange(8)[None, :] / 10
    files = export_report(rep, tmp_path, stride=5)
    rows = read_csv(files["trajectories"])
    steps = [(int(r["user_id"]), int(r["step"])) for r in rows]
    assert steps == [(0, 0), (0, 5), (0, 7), (1, 0), (1, 3)]
    assert float(rows[2]["belief"]) == 0.7
