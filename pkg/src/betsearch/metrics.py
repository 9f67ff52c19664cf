"""Full-ranking Recall@k / NDCG@k, their ensemble, and the fitness ratio."""

from dataclasses import dataclass

import numpy as np

DEFAULT_KS = (5, 10, 20)


class EvaluationError(ValueError):
    pass


def rank_items(scores, exclude=()):
    """Item indices sorted by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if len(exclude):
        keep = np.ones(len(scores), dtype=bool)
        keep[np.asarray(list(exclude), dtype=np.int64)] = False
        order = order[keep[order]]
    return order


def _check_k(k):
    if k <= 0:
        raise EvaluationError(f"k must be positive, got {k}")


def recall_at_k(ranking, relevant, k):
    _check_k(k)
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise EvaluationError("empty relevant set")
    hits = sum(1 for item in list(ranking)[:k] if int(item) in relevant)
    return hits / len(relevant)


def _idcg(n):
    return float(np.sum(1.0 / np.log2(np.arange(2, n + 2))))


def ndcg_at_k(ranking, relevant, k):
    _check_k(k)
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise EvaluationError("empty relevant set")
    dcg = sum(1.0 / np.log2(i + 2) for i, item in enumerate(list(ranking)[:k])
              if int(item) in relevant)
    return float(dcg / _idcg(min(k, len(relevant))))


@dataclass
class EvalResult:
    recall: dict
    ndcg: dict
    ensemble: float
    num_users: int

    def to_dict(self):
        return {"recall": {str(k): v for k, v in self.recall.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()},
                "ensemble": self.ensemble, "num_users": self.num_users}


def _top_k_rows(scores, k):
    """Top-k item indices per row with the (score desc, index asc) order.

    Rows whose k-th score is tied with items beyond the cut fall back to a
    full stable sort so the tie rule holds exactly.
    """
    n_rows, n_items = scores.shape
    k = min(k, n_items)
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1]
    ge = scores >= kth[:, None]
    counts = ge.sum(axis=1)
    out = np.empty((n_rows, k), dtype=np.int64)
    simple = counts == k
    if simple.any():
        rows, cols = np.nonzero(ge[simple])
        cols = cols.reshape(-1, k)
        vals = np.take_along_axis(scores[simple], cols, axis=1)
        order = np.argsort(-vals, axis=1, kind="stable")
        out[simple] = np.take_along_axis(cols, order, axis=1)
    for r in np.flatnonzero(~simple):
        out[r] = np.argsort(-scores[r], kind="stable")[:k]
    return out


def evaluate_scores(score_fn, ds, split="val", ks=DEFAULT_KS, chunk=1024):
    """Evaluate a ``score_fn(users) -> (len(users), num_items)`` scorer.

    Train items are excluded from each user's candidates; only users with
    a nonempty ``split`` set are averaged.
    """
    ks = tuple(int(k) for k in ks)
    for k in ks:
        _check_k(k)
    relevant = ds.relevant_by_user(split)
    if not relevant:
        raise EvaluationError(f"no user has {split} interactions")
    users = np.array(sorted(relevant), dtype=np.int64)
    n_rel = np.array([len(relevant[u]) for u in users], dtype=np.int64)
    rel_codes = np.sort(np.concatenate([u * ds.num_items + relevant[u] for u in users]))
    indptr, train_items = ds.train_items_by_user()
    kmax = max(ks)
    disc = 1.0 / np.log2(np.arange(2, kmax + 2))
    idcg_cum = np.cumsum(disc)

    recall = {k: np.zeros(len(users)) for k in ks}
    ndcg = {k: np.zeros(len(users)) for k in ks}
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = np.array(score_fn(batch), dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise EvaluationError("non-finite scores")
        for row, u in enumerate(batch):
            scores[row, train_items[indptr[u]:indptr[u + 1]]] = -np.inf
        top = _top_k_rows(scores, kmax)
        codes = batch[:, None] * ds.num_items + top
        pos = np.minimum(np.searchsorted(rel_codes, codes), len(rel_codes) - 1)
        hit = rel_codes[pos] == codes
        # excluded (train) items are never relevant, so -inf slots cannot hit
        nr = n_rel[start:start + chunk]
        for k in ks:
            h = hit[:, :k]
            recall[k][start:start + len(batch)] = h.sum(axis=1) / nr
            dcg = (h * disc[:h.shape[1]]).sum(axis=1)
            ndcg[k][start:start + len(batch)] = dcg / idcg_cum[np.minimum(k, nr) - 1]
    per_user = sum(recall[k] + ndcg[k] for k in ks)
    ensemble = float(per_user.sum() / (2 * len(ks) * len(users)))
    return EvalResult({k: float(recall[k].mean()) for k in ks},
                      {k: float(ndcg[k].mean()) for k in ks}, ensemble, len(users))


def eval_ensemble(model, ds, split="val", ks=DEFAULT_KS):
    return evaluate_scores(model.score_matrix, ds, split, ks)


def fitness_ratio(model, denominator, ds, split="val", ks=DEFAULT_KS):
    """Quality of ``model`` relative to the full pretrained model.

    ``denominator`` is either the pretrained model's ensemble value
    (cached once per run) or the pretrained model itself.
    """
    if not isinstance(denominator, (int, float)):
        denominator = eval_ensemble(denominator, ds, split, ks).ensemble
    if denominator == 0:
        raise EvaluationError("pretrained model scores zero; fitness ratio undefined")
    return eval_ensemble(model, ds, split, ks).ensemble / denominator
