#!/usr/bin/env python3
"""End-to-end smoke test for the `carpo` extension module.

Locates the built cdylib under target/, imports it, and drives the whole
pipeline: scalar formulas, screening metrics, Fleiss' kappa, closed-form
optimal policy, corpus generation, ensemble fitting, training, evaluation,
and artifact round trips.  Exits nonzero on the first failure.

Build the module first:

    cargo build -p carpo-python
    python3 python/smoke_test.py
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path


def import_carpo():
    root = Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / "release" / "libcarpo.so",
        root / "target" / "debug" / "libcarpo.so",
        root / "target" / "release" / "libcarpo.dylib",
        root / "target" / "debug" / "libcarpo.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("no built extension found; run `cargo build -p carpo-python` first")
    stage = Path(tempfile.mkdtemp(prefix="carpo-py-"))
    shutil.copy(built, stage / "carpo.so")
    sys.path.insert(0, str(stage))
    import carpo  # noqa: E402

    return carpo


def approx(a, b, tol=1e-12):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    carpo = import_carpo()

    # Scalar formulas.
    approx(carpo.bt_probability(0.0, 0.0), 0.5)
    approx(carpo.bt_probability(2.0, 0.0), 1.0 / (1.0 + math.exp(-2.0)))
    approx(carpo.advantage(5.0, 2.0, 0.45), 5.0 - 0.45 * 2.0)
    approx(carpo.lambda_weight(0.45, 1.0), 0.9)
    approx(carpo.DEFAULT_LAMBDA0, 0.45)
    approx(carpo.HIGH_RISK_CUTOFF, 3.0)

    # KL controller: over budget scales up, far under decays toward beta0.
    approx(carpo.kl_schedule_step(1.0, 0.5, 0.1, 0.1), 0.15)
    approx(carpo.kl_schedule_step(0.1, 0.5, 0.2, 0.1), 0.2 / 1.05)
    approx(carpo.kl_schedule_step(0.1, 0.5, 0.1, 0.1), 0.1)
    approx(carpo.kl_schedule_step(0.3, 0.5, 0.1, 0.1), 0.1)

    # Screening metrics on the reference confusion table.
    metrics = json.loads(carpo.screening_metrics_json(9591, 20, 9, 380))
    assert round(metrics["precision_accept"] * 1000) / 10 == 99.8
    assert round(metrics["recall_rejectable"] * 1000) / 10 == 95.0
    assert round(metrics["false_positive_rejection"] * 1000) / 10 == 2.3

    # Fleiss' kappa: perfect agreement is exactly 1.
    counts = [[5, 0, 0], [0, 5, 0], [0, 0, 5], [5, 0, 0]]
    kappa = json.loads(carpo.fleiss_kappa_json(counts, 5))
    assert kappa["result"] == "defined"
    assert kappa["kappa"] == 1.0

    # Closed-form optimal policy against a hand-computed softmax.
    ref = carpo.PolicyTable.uniform([2])
    star = carpo.optimal_policy(ref, [[0.0, 1.0]], 1.0)
    dist = star.row_distribution(0)
    z = 1.0 + math.exp(1.0)
    approx(dist[0], 1.0 / z)
    approx(dist[1], math.exp(1.0) / z)
    approx(carpo.kl_divergence(ref, ref), 0.0)

    # Analytic gradient matches finite differences.
    report = json.loads(carpo.gradient_check_json(5, 25))
    assert report["max_rel_err"] < 1e-6, report

    # Generate -> validate -> fit -> train -> evaluate.
    spec = {
        "n_prompts": 40,
        "m_candidates": 4,
        "feature_dim": 6,
        "per_prompt_pairs": 2,
        "seed": 7,
    }
    corpus, truth = carpo.generate(json.dumps(spec))
    assert corpus.n_prompts() == 40
    assert corpus.n_cells() == 160
    assert corpus.seed == 7
    assert json.loads(corpus.validate_json())["violations"] == []
    assert truth.n_entries() == 160
    assert 0 < truth.high_risk_count() < 160
    cell = json.loads(truth.truth_json(0, 0))
    assert 1.0 <= cell["true_r_p"] <= 7.0 and 0.0 <= cell["true_r_s"] <= 4.0
    assert truth.truth_json(9999, 0) is None

    ensemble = carpo.fit_ensemble(corpus, 4, 7)
    r_p, r_s, u = ensemble.predict([0.1] * 6, [-0.2] * 6)
    assert 1.0 <= r_p <= 7.0 and 0.0 <= r_s <= 4.0 and u >= 0.0

    config = {"epochs": 12, "batch_size": 16, "seed": 7}
    policy, report_json = carpo.train(corpus, ensemble, json.dumps(config))
    rows = json.loads(report_json)
    assert len(rows) == 12
    assert rows[-1]["kl"] <= 0.5 * 1.05
    assert policy.shape() == [4] * 40

    scores = json.loads(carpo.evaluate(policy, corpus, ensemble))
    assert 1.0 <= scores["exp_pref"] <= 7.0
    assert 0.0 <= scores["exp_risk"] <= 4.0
    assert 0.0 <= scores["bt_accuracy"] <= 1.0

    # The no-risk arm ends at least as risky as the full arm (same seed).
    risky_policy, _ = carpo.train(corpus, ensemble, json.dumps(config), "no-risk-penalty")
    risky = json.loads(carpo.evaluate(risky_policy, corpus, ensemble))
    assert risky["exp_risk"] >= scores["exp_risk"] - 1e-9

    # Artifact round trips through disk.
    with tempfile.TemporaryDirectory(prefix="carpo-art-") as tmp:
        tmp = Path(tmp)
        corpus.save(str(tmp / "corpus.jsonl"))
        truth.save(str(tmp / "truth.jsonl"))
        ensemble.save(str(tmp / "ensemble.json"))
        policy.save(str(tmp / "policy.json"))
        again = carpo.Corpus.load(str(tmp / "corpus.jsonl"))
        assert again.n_pairs() == corpus.n_pairs()
        assert carpo.GroundTruth.load(str(tmp / "truth.jsonl")).n_entries() == 160
        reloaded = carpo.PolicyTable.load(str(tmp / "policy.json"))
        assert reloaded.logits() == policy.logits()
        re_scores = json.loads(carpo.evaluate(reloaded, again, carpo.RewardEnsemble.load(str(tmp / "ensemble.json"))))
        assert re_scores == scores

    # Audit sampling and group-weight filtering.
    batch = [[i, (i % 5)] for i in range(1, 21)]
    audit = json.loads(carpo.audit_sample_json([tuple(b) for b in batch], 5))
    assert audit["uniform_quota"] == 2 and audit["stratified_quota"] == 2
    assert all(it["high_risk"] == (it["id"] % 5 >= 3) for it in audit["items"])

    stream = [(i % 2, 0.45 + 0.02 * ((i % 5) - 2)) for i in range(100)]
    weights = json.loads(carpo.update_group_weights_json(stream, 2, 10))
    for group in weights["groups"]:
        assert not group["flagged_empty"]
        assert abs(group["lambdas"][-1] - 0.45) < 0.05

    # Validation errors surface as ValueError.
    try:
        carpo.fleiss_kappa_json([[3, 0], [1, 1]], 3)
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched rater counts should raise ValueError")
    try:
        carpo.Corpus.load("/nonexistent/corpus.jsonl")
    except IOError:
        pass
    else:
        raise AssertionError("missing file should raise IOError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
