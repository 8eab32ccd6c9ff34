"""Smoke test for the referi Python extension.

Build and install it first:

    pip install --no-build-isolation -e crates/py

then run `python python/smoke_test.py`.
"""

import json
import math
import os
import tempfile

import referi


def check_scores():
    assert referi.forward_score([-1.0, -0.5]) == -1.5
    assert referi.backward_full_score([(-1.0, -3.0), (-2.0, -2.0)]) == 1.0
    assert referi.backward_approx_score(-1.0, -3.0) == 2.0
    assert referi.final_score(-4.0, 1.0) == -5.0
    assert referi.select_argmax([0.2, 0.7, 0.7]) == (1, True)
    assert math.isclose(referi.cosine([1.0, 0.0], [2.0, 2.0]), math.sqrt(0.5))
    assert [referi.mask_size(t) for t in (1, 5, 10)] == [1, 3, 6]
    assert referi.canonical("  The  ANSWER ") == "the answer"
    try:
        referi.forward_score([])
    except ValueError:
        pass
    else:
        raise AssertionError("empty response should be rejected")


def check_prompts():
    shots = [("q0", "a0"), ("q1", "a1"), ("q2", "a2")]
    replaced = referi.leave_one_out(shots, 1, ("test", "cand"))
    assert replaced == [("q0", "a0"), ("test", "cand"), ("q2", "a2")]
    (cond, cont), (uncond, ucont) = referi.backward_contexts(shots, 1, ("test", "cand"))
    assert cont == ucont == "a1"
    assert "cand" in cond and "a1" not in cond
    assert uncond == "Q: q1\nA: "


def check_engine_and_eval():
    with tempfile.TemporaryDirectory() as d:
        n = referi.synth("arithmetic", d, size=20, seed=7)
        assert n == 20
        with open(os.path.join(d, "few_shot.jsonl")) as f:
            shots = [(r["query"], r["answer"]) for r in map(json.loads, f)]
        with open(os.path.join(d, "dataset.jsonl")) as f:
            query = json.loads(f.readline())["query"]

        engine = referi.Engine(config=os.path.join(d, "referi.toml"), mode="full", seed=7)
        result = engine.select(shots, query)
        assert len(result.candidates) == 5
        assert result.selected == result.candidates[result.selected_index]
        best = max(result.final_scores)
        assert result.final_scores[result.selected_index] == best
        for f, b, s in zip(result.forward_scores, result.backward_scores, result.final_scores):
            assert math.isclose(f - b, s, abs_tol=1e-12)
        assert json.loads(result.to_json())["selected_index"] == result.selected_index

        forward = engine.select(shots, query, candidates=result.candidates, selector="forward")
        assert forward.candidates == result.candidates

        report = os.path.join(d, "report.jsonl")
        acc = referi.eval_run(
            os.path.join(d, "referi.toml"),
            os.path.join(d, "dataset.jsonl"),
            os.path.join(d, "few_shot.jsonl"),
            report,
            selectors=["referi", "forward", "random"],
        )
        assert set(acc) == {"referi", "forward", "random"}
        assert all(0.0 <= v <= 1.0 for v in acc.values())
        assert os.path.exists(report)


if __name__ == "__main__":
    check_scores()
    check_prompts()
    check_engine_and_eval()
    print("python smoke test passed")
