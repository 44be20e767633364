"""Smoke test for the circle_py extension.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import math

import circle_py as c

SMALL = """
[corpus.toy]
n_topics = 4
held_out_topics = 1

[model]
n_layers = 1
d_model = 32
n_heads = 2
d_ff = 64
max_len = 48

[sft]
epochs = 40

[one_to_one]
epochs = 20

[ppo]
max_steps = 2
batch = 8
"""


def brute_rbo(s, t, p, depth):
    d = min(len(s), len(t), depth)
    return (1 - p) * sum(p ** (i - 1) * len(set(s[:i]) & set(t[:i])) / i for i in range(1, d + 1))


def main():
    a, b = ["d1", "d2", "d3", "d4"], ["d2", "d1", "d5", "d4"]
    assert math.isclose(c.rbo(a, b, p=0.8), brute_rbo(a, b, 0.8, 100), abs_tol=1e-12)
    assert math.isclose(c.rbo(a, a, p=0.9, eval_depth=3), 1 - 0.9**3, abs_tol=1e-12)
    assert c.dissimilarity_reward([["x"], ["y"]]) == 0.0
    assert math.isclose(c.dissimilarity_reward([a, b], p=0.8), -2 * brute_rbo(a, b, 0.8, 100), abs_tol=1e-12)
    assert math.isclose(c.mrr([1, 2, None]), 0.5, abs_tol=1e-12)
    assert c.reciprocal_rank(None) == 0.0
    try:
        c.rbo(a, b, p=1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("p outside (0, 1) accepted")
    assert "[ppo]" in c.default_config()

    p = c.Pipeline(SMALL)
    qid, query = p.dev_queries()[0]
    hits = p.search(query, depth=5)
    assert 0 < len(hits) <= 5 and all(isinstance(d, str) for d, _ in hits)
    for gen in ["circle", "supervised", "beam"]:
        first = p.suggest([query], generator=gen, k=2)
        assert 1 <= len(first) <= 2, (gen, first)
        later = p.suggest([query, first[0]], generator=gen, k=2)
        assert len(later) <= 2
    print("smoke test ok:", qid, repr(query), "->", p.suggest([query]))


if __name__ == "__main__":
    main()
