"""The search loop: sample candidates, pick one, finetune, learn the surrogate."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Backbone, finetune, train
from .embedding import apply_action
from .metrics import DEFAULT_KS, eval_ensemble, fitness_ratio
from .predictor import FitnessPredictor, Population, train_predictor
from .sampler import check_action, generate_action, sr_action, su_action

logger = logging.getLogger(__name__)

STRATEGIES = ("I", "II", "III")

# spawn-key streams so every random decision has its own reproducible generator
STREAM_CANDIDATE = 1
STREAM_SELECT = 2
STREAM_FINETUNE = 3
STREAM_PREDICTOR = 4
STREAM_RETRAIN = 5
STREAM_INIT = 6
STREAM_PRETRAIN = 7
STREAM_BASELINE = 8


def derived_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def derived_seed(seed, *key):
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


@dataclass
class SearchConfig:
    T: int = 10
    m: int = 100
    c: float = 0.9
    d_max: int = 128
    n_updates: int = 2
    retrain_top_k: int = 5
    predictor_lr: float = 1e-3
    seed: int = 0

    def validate(self):
        for name in ("T", "m", "n_updates", "retrain_top_k", "d_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"search.{name} must be >= 1")
        if not 0 < self.c < 1:
            raise ValueError("search.c must lie in (0, 1)")
        if not self.predictor_lr > 0:
            raise ValueError("search.predictor_lr must be positive")


@dataclass
class IterationRecord:
    t: int
    strategy: str
    action: dict
    fitness: float
    predicted: float
    predictor_losses: list
    predictor_loss: float
    wall_time: float

    def to_dict(self):
        return asdict(self)


@dataclass
class SearchResult:
    population: Population
    records: list
    predictor: FitnessPredictor
    finetunes: int = 0
    denominator: float = 0.0


@dataclass
class RetrainResult:
    action: object
    model: Backbone
    val_ensembles: list = field(default_factory=list)
    best_index: int = 0

    @property
    def val_ensemble(self):
        return self.val_ensembles[self.best_index]


def strategy_for(t):
    if t < 1:
        raise ValueError("iterations are numbered from 1")
    r = t % 5
    if r <= 2:
        return "I"
    return "II" if r == 3 else "III"


def select_action(strategy, candidates, predictor, population, rng):
    """Index of the chosen candidate under ``strategy``."""
    if not candidates:
        raise ValueError("no candidate actions")
    if strategy == "III" and not len(population):
        strategy = "II"
    if strategy == "I":
        scores = predictor.predict_many(candidates)
        return int(np.argmax(scores))  # first maximum on ties
    if strategy == "II":
        return int(rng.integers(len(candidates)))
    if strategy == "III":
        embs = predictor.embed_many([population.best()] + list(candidates))
        dist = np.linalg.norm(embs[1:] - embs[0], axis=1)
        return int(np.argmin(dist))
    raise ValueError(f"unknown strategy {strategy!r}")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_population(population, path):
    _write_json(path, population.to_json())


def sample_candidates(ds, cfg, t):
    return [generate_action(ds.user_freq, ds.item_freq, cfg.c, cfg.d_max,
                            derived_rng(cfg.seed, STREAM_CANDIDATE, t, i))
            for i in range(cfg.m)]


def run_search(ds, pretrained, cfg, train_cfg, denominator=None, ks=DEFAULT_KS, out_dir=None,
               log=None):
    """Run the T-iteration search starting from a converged full-size backbone.

    Every iteration finetunes a fresh copy of ``pretrained``. When
    ``out_dir`` is given, ``population.json`` and ``iterations.jsonl`` are
    kept up to date after each iteration (so an abort leaves them behind).
    """
    cfg.validate()
    if pretrained.d_max != cfg.d_max:
        raise ValueError(f"pretrained table has d_max={pretrained.d_max}, config says {cfg.d_max}")
    if denominator is None:
        denominator = eval_ensemble(pretrained, ds, "val", ks).ensemble
    predictor = FitnessPredictor(ds.user_freq, ds.item_freq, cfg.d_max,
                                 seed=derived_seed(cfg.seed, STREAM_INIT))
    population = Population()
    records = []
    result = SearchResult(population, records, predictor, 0, denominator)
    jsonl = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        jsonl = open(os.path.join(out_dir, "iterations.jsonl"), "w")
    try:
        for t in range(1, cfg.T + 1):
            start = time.perf_counter()
            candidates = sample_candidates(ds, cfg, t)
            strategy = strategy_for(t)
            idx = select_action(strategy, candidates, predictor, population,
                                derived_rng(cfg.seed, STREAM_SELECT, t))
            action = candidates[idx]
            check_action(action, ds.num_users, ds.num_items)
            predicted = predictor.predict_fitness(action)

            model = pretrained.copy()
            finetune(model, ds, action, train_cfg.finetune_epochs, train_cfg,
                     derived_rng(cfg.seed, STREAM_FINETUNE, t))
            result.finetunes += 1
            fitness = fitness_ratio(model, denominator, ds, "val", ks)
            population.add(action, fitness)

            rng = derived_rng(cfg.seed, STREAM_PREDICTOR, t)
            losses = [train_predictor(predictor, population, 1, rng, cfg.predictor_lr)
                      for _ in range(cfg.n_updates)]
            rec = IterationRecord(t, strategy, action.summary(), fitness, predicted, losses,
                                  float(np.mean(losses)), time.perf_counter() - start)
            records.append(rec)
            logger.info("t=%d strategy=%s fitness=%.4f predicted=%.4f loss=%.4g",
                        t, strategy, fitness, predicted, rec.predictor_loss)
            if log is not None:
                log(rec)
            if jsonl is not None:
                jsonl.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
                jsonl.flush()
                write_population(population, os.path.join(out_dir, "population.json"))
    finally:
        if jsonl is not None:
            jsonl.close()
            write_population(population, os.path.join(out_dir, "population.json"))
    return result


def train_under_action(ds, action, d_max, scorer, layers, train_cfg, seed, ks=DEFAULT_KS):
    """Train a freshly initialised backbone from scratch with ``action`` applied."""
    model = Backbone.for_dataset(ds, d_max, scorer, layers, train_cfg.init_scale, seed)
    if action is not None:
        apply_action(model.table, action)
    report = train(model, ds, train_cfg, derived_rng(seed, STREAM_PRETRAIN),
                   evaluate=lambda mdl: eval_ensemble(mdl, ds, "val", ks).ensemble)
    return model, report


def pretrain(ds, d_max, scorer, layers, train_cfg, seed, ks=DEFAULT_KS):
    return train_under_action(ds, None, d_max, scorer, layers, train_cfg,
                              derived_seed(seed, STREAM_PRETRAIN), ks)


def selective_retrain(population, ds, cfg, train_cfg, scorer="mf", layers=0, ks=DEFAULT_KS):
    """Retrain the top actions from scratch and keep the best on validation."""
    if not len(population):
        raise ValueError("empty population")
    top = population.top(cfg.retrain_top_k)
    best = None
    vals, failures = [], []
    for i, (action, _) in enumerate(top):
        check_action(action)
        try:
            model, _ = train_under_action(ds, action, cfg.d_max, scorer, layers, train_cfg,
                                          derived_seed(cfg.seed, STREAM_RETRAIN, i), ks)
        except (ArithmeticError, RuntimeError) as exc:
            failures.append(f"action {i}: {exc}")
            vals.append(float("-inf"))
            continue
        val = eval_ensemble(model, ds, "val", ks).ensemble
        vals.append(val)
        if best is None or val > vals[best[0]]:
            best = (i, model, action)
    if best is None:
        raise RuntimeError("all retrains failed: " + "; ".join(failures))
    return RetrainResult(best[2], best[1], vals, best[0])


def baseline_action(kind, ds, cfg):
    """SU (equal sizes) or SR (uniform draws) action at the search budget."""
    if kind == "su":
        return su_action(cfg.c, cfg.d_max, ds.num_users, ds.num_items)
    if kind == "sr":
        return sr_action(cfg.c, cfg.d_max, ds.user_freq, ds.item_freq,
                         derived_rng(cfg.seed, STREAM_BASELINE, 1))
    raise ValueError(f"unknown baseline {kind!r}")


def run_baseline(kind, ds, cfg, train_cfg, scorer="mf", layers=0, ks=DEFAULT_KS):
    action = baseline_action(kind, ds, cfg)
    model, report = train_under_action(ds, action, cfg.d_max, scorer, layers, train_cfg,
                                       derived_seed(cfg.seed, STREAM_BASELINE, 2), ks)
    return action, model, report
