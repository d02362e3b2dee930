import math

import pytest

import circles


def test_metrics():
    assert circles.normalize_answer("The Blue Jay.") == "blue jay"
    assert circles.exact_match("a dog", "dog") == 1
    assert circles.word_f1("red bus", "red") == pytest.approx(2 / 3)
    acc, wf1 = circles.classification_metrics(
        ["alpha", "alpha", "beta", "beta"],
        ["alpha", "beta", "beta", "beta"],
        ["alpha", "beta"],
    )
    assert acc == pytest.approx(0.75)
    assert wf1 == pytest.approx(0.7666666666666667)


def test_budget():
    b = circles.allocate_budget(32, 3, 16)
    assert b == {"k_corr": 16, "k_causal": 16, "num_attributes": 3, "per_attribute_k": 6}
    with pytest.raises(circles.PreconditionError):
        circles.allocate_budget(8, 1, 12)


def test_store_ranking_ties_by_id():
    s = circles.EmbeddingStore()
    v = circles.normalize([1.0, 1.0, 0.0])
    w = circles.normalize([0.0, 0.0, 1.0])
    for i in ["d", "b", "a", "c"]:
        s.add(i, "image", v)
        s.add(i, "question", w)
    s.add("z", "image", w)
    s.add("z", "question", w)
    assert len(s) == 10 and s.dim == 3
    assert [i for i, _ in s.rices(v, 5)] == ["a", "b", "c", "d", "z"]
    assert [i for i, _ in s.rices(v, 2, exclude=["a"])] == ["b", "c"]
    top = s.counterfactual(w, w, 1)
    assert top[0][0] == "z" and math.isclose(top[0][1], 2.0, rel_tol=1e-6)
    with pytest.raises(circles.PreconditionError):
        s.add("bad", "image", [3.0, 0.0, 0.0])


def test_mock_world_and_embed():
    w = circles.generate_world(num_items=32, num_queries=4, seed=5)
    assert len(w["train"]) == 32 and len(w["queries"]) == 4
    import json

    schema = json.dumps(w["schema"])
    vec = circles.mock_embed(w["train"][0]["image"], schema)
    assert math.isclose(sum(x * x for x in vec), 1.0, rel_tol=1e-6)


def test_run_mock_circles_beats_rices_when_confounded():
    world = {"num_items": 512, "num_queries": 40, "num_attributes": 4, "num_values": 6,
             "num_confounders": 2, "confounder_strength": 1.0, "seed": 2}
    r = circles.run_mock({"method": "rices", "mock": {"world": world}})
    c = circles.run_mock({"method": "circles", "mock": {"world": world}})
    assert r["queries"] == c["queries"] == 40
    assert c["accuracy"] > r["accuracy"]
    assert c["mean_calls"] == pytest.approx(3.0)
    assert all(row["demonstrations"] == 32 for row in c["rows"])


def test_bad_config():
    with pytest.raises(circles.ConfigError):
        circles.run_mock({"method": "best"})
