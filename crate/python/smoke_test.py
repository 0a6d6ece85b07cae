"""Quick end-to-end check of the Python bindings."""

import math
import tempfile
from pathlib import Path

import fairpl


def main():
    c = fairpl.FairnessConstraints.from_delta([0.5, 0.5], 0.1, 3)
    assert c.k == 3 and c.lower == [1, 1] and c.upper == [2, 2], c

    scores = [0.8, 0.1, -0.3, 0.5, -1.0, 0.2]
    groups = [0, 0, 0, 1, 1, 1]
    policy = fairpl.FairPolicy(scores, groups, c)
    for r in policy.sample(200, seed=1):
        assert fairpl.check_ex_post_fair(r, groups, c), r
        assert policy.log_prob(r) < 0.0
    assert policy.sample(5, seed=3) == policy.sample(5, seed=3)

    rel = [0.9, 0.2, 0.4, 0.7, 0.0, 0.5]
    exact = policy.exact_relevance_gradient(rel)
    est = policy.gradient(rel, samples=20000, seed=2)
    scale = max(abs(g) for g in exact)
    assert all(abs(a - b) < 0.05 * scale for a, b in zip(exact, est)), (exact, est)

    pl = fairpl.PlPolicy(scores, groups, 3)
    total = sum(math.exp(pl.log_prob(r)) for r in pl.sample(1, seed=0))
    assert 0.0 < total <= 1.0
    assert len(fairpl.plrank3_gradient(scores, rel, 3, samples=50)) == len(scores)

    assert fairpl.check_ex_post_fair(fairpl.gak19(scores, groups, c), groups, c)
    assert fairpl.check_ex_post_fair(fairpl.gdl22(scores, groups, c, seed=4), groups, c)

    data = fairpl.Dataset.synthetic(30, 12, [0.7, 0.3], 4, 5)
    assert len(data) == 30 and data.feature_dim == 4
    assert fairpl.Dataset.parse(data.to_text()).query_ids == data.query_ids
    biased = data.inject_bias(data.minority_group, 0.5)
    q = data.query_ids[0]
    assert biased.relevance(q) == data.relevance(q)
    train, test = biased.split(0.8, seed=1)

    model = fairpl.train(train, epochs=3, learning_rate=0.01, batch_size=64, seed=1)
    assert len(model.scores(test, test.query_ids[0])) == 12
    m = model.evaluate(test, k=5, n_samples=50, proportions=data.group_proportions())
    assert m["violation_rate"] == 0.0 and 0.0 < m["ndcg_true"] <= 1.0, m

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.json"
        model.save(path)
        again = fairpl.Model.load(path)
        assert again.scores(test, test.query_ids[0]) == model.scores(test, test.query_ids[0])

    try:
        fairpl.FairnessConstraints(3, [2, 2], [1, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("infeasible bounds accepted")

    print("smoke test ok: ndcg_true %.4f" % m["ndcg_true"])


if __name__ == "__main__":
    main()
