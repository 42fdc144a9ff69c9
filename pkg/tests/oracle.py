"""Independent reference computations used by the tests."""

import math
import random
from collections import Counter

import pytrec_eval

from ptkbcir.data import Document, Qrels, Run
from ptkbcir.evaluation import MetricConfig, evaluate_run
from ptkbcir.retrieval import tokenize

TREC_MEASURES = {"mrr": "recip_rank", "ndcg@3": "ndcg_cut_3", "ndcg@5": "ndcg_cut_5", "map": "map"}


def random_fixture(rng: random.Random):
    n_turns = rng.randint(1, 20)
    n_docs = rng.randint(5, 100)
    docs = [f"doc{i}" for i in range(n_docs)]
    qrels, rankings = {}, {}
    for t in range(1, n_turns + 1):
        turn = f"{t}-1-1"
        judged = rng.sample(docs, rng.randint(1, min(15, n_docs)))
        qrels[turn] = {d: rng.choice([0, 0, 1, 2, 3]) for d in judged}
        ranked = rng.sample(docs, rng.randint(1, n_docs))
        # strictly decreasing scores so trec_eval's tie order does not matter
        rankings[turn] = [(d, float(len(ranked) - i)) for i, d in enumerate(ranked)]
    return qrels, rankings


def compare_with_reference(qrels: dict, rankings: dict) -> float:
    """Largest absolute per-turn difference between our metrics and trec_eval's."""
    ours = evaluate_run(Run("x", rankings), Qrels(qrels), MetricConfig())
    evaluator = pytrec_eval.RelevanceEvaluator(qrels, set(TREC_MEASURES.values()))
    ref = evaluator.evaluate({t: dict(r) for t, r in rankings.items()})
    worst = 0.0
    for turn, values in ours.per_turn.items():
        for metric, value in values.items():
            worst = max(worst, abs(value - ref[turn][TREC_MEASURES[metric]]))
    return worst


def metric_oracle_gap(n_fixtures: int = 50, seed: int = 0) -> float:
    rng = random.Random(seed)
    return max(compare_with_reference(*random_fixture(rng)) for _ in range(n_fixtures))


def brute_force_bm25(docs, query, k, k1=0.9, b=0.4):
    """Score every document straight from the formula, no inverted index."""
    toks = {d.doc_id: Counter(tokenize(d.text, stem=True)) for d in docs}
    lengths = {d: sum(c.values()) for d, c in toks.items()}
    n = len(docs)
    avgdl = sum(lengths.values()) / n
    df = Counter(term for c in toks.values() for term in c)
    q = tokenize(query, stem=True)
    scored = []
    for doc_id, counts in toks.items():
        s = 0.0
        for term in q:
            tf = counts[term]
            if tf == 0:
                continue
            w = math.log(1 + (n - df[term] + 0.5) / (df[term] + 0.5))
            s += w * tf / (tf + k1 * (1 - b + b * lengths[doc_id] / avgdl))
        if s > 0:
            scored.append((doc_id, s))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:k]


def random_corpus(rng, n, vocab=60):
    words = [f"w{i}" for i in range(vocab)]
    return [Document(f"doc{i:04d}", " ".join(rng.choices(words, k=rng.randint(1, 30)))) for i in range(n)]
