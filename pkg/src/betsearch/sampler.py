"""Table-level embedding size actions that never exceed the parameter budget.

An action is generated in one shot: draw a distribution for users and one
for items, sample one positive number per entity, normalise each field to
fractions, scale by the field's share of the budget, floor, clamp to
``[1, d_max]``, hand the largest sizes to the most frequent entities, and
finally shave sizes off the least frequent entities until the total fits.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import ndtr, ndtri

KINDS = ("power_law", "truncated_exponential", "truncated_normal", "log_normal")
BETA_MAX = {"power_law": 20.0, "truncated_exponential": 5.0,
            "truncated_normal": 20.0, "log_normal": 0.5}
BETA_FLOOR = 0.01
MAX_RESAMPLE = 100
EPS = 1e-12


class BudgetInfeasible(ValueError):
    def __init__(self, budget, num_entities):
        super().__init__(f"budget infeasible: B={budget} parameters cannot give "
                         f"{num_entities} users+items at least one dimension each")
        self.budget = budget
        self.num_entities = num_entities


def compute_budget(num_entities, d_max, c):
    """floor((1 - c) * num_entities * d_max), computed exactly.

    ``c`` is read through its shortest decimal repr so that, e.g., c=0.9
    with 2000 full parameters yields 200 and not 199.
    """
    if not 0 < c < 1:
        raise ValueError(f"sparsity c must lie in (0, 1), got {c}")
    frac = Fraction(repr(float(c)))
    return int((1 - frac) * num_entities * d_max // 1)


@dataclass(frozen=True)
class DistributionSpec:
    kind: str
    beta: float

    def __post_init__(self):
        if self.kind not in BETA_MAX and self.kind != "uniform":
            raise ValueError(f"unknown distribution {self.kind!r}")
        if self.kind != "uniform" and not BETA_FLOOR <= self.beta <= BETA_MAX[self.kind]:
            raise ValueError(f"beta={self.beta} outside [{BETA_FLOOR}, {BETA_MAX[self.kind]}]")


UNIFORM = DistributionSpec("uniform", 1.0)


def draw_distribution(rng):
    kind = KINDS[int(rng.integers(len(KINDS)))]
    hi = BETA_MAX[kind]
    # 1 - U lies in (0, 1], so beta lies in (floor, hi]
    beta = BETA_FLOOR + (hi - BETA_FLOOR) * (1.0 - rng.random())
    return DistributionSpec(kind, float(beta))


def _inverse_cdf(spec, u, rng):
    if spec.kind == "uniform":
        return u
    b = spec.beta
    if spec.kind == "power_law":
        return u ** (1.0 / b)
    if spec.kind == "truncated_exponential":
        return -np.log1p(-u * -np.expm1(-b))
    if spec.kind == "truncated_normal":
        lo = ndtr(0.0)
        return ndtri(lo + u * (ndtr(b) - lo))
    return np.exp(b * rng.standard_normal(len(u)))


def draw_probabilities(spec, count, rng):
    """``count`` strictly positive draws from ``spec`` by inverse CDF."""
    if count < 1:
        raise ValueError("count must be >= 1")
    x = _inverse_cdf(spec, rng.random(count), rng)
    for _ in range(MAX_RESAMPLE):
        zero = np.flatnonzero(x <= 0)
        if not len(zero):
            break
        x[zero] = _inverse_cdf(spec, rng.random(len(zero)), rng)
    x[x <= 0] = EPS
    return x


def normalize(p):
    p = np.asarray(p, dtype=np.float64)
    if len(p) == 0 or np.any(~(p > 0)):
        raise ValueError("probabilities must be positive")
    return p / p.sum()


@dataclass
class SizeAction:
    user_sizes: np.ndarray
    item_sizes: np.ndarray
    budget: int
    d_max: int
    provenance: dict = field(default_factory=dict)
    fitness: float | None = None

    def __post_init__(self):
        self.user_sizes = np.asarray(self.user_sizes, dtype=np.int64)
        self.item_sizes = np.asarray(self.item_sizes, dtype=np.int64)

    @property
    def num_users(self):
        return len(self.user_sizes)

    @property
    def sizes(self):
        return np.concatenate([self.user_sizes, self.item_sizes])

    @property
    def total(self):
        return int(self.user_sizes.sum() + self.item_sizes.sum())

    def sparsity(self):
        return 1.0 - self.total / (len(self.sizes) * self.d_max)

    def summary(self):
        s = self.sizes
        return {"total": self.total, "budget": self.budget, "sparsity": self.sparsity(),
                "mean_size": float(s.mean()), "max_size": int(s.max()),
                "min_size": int(s.min()), **self.provenance}

    def to_json(self):
        out = {"budget": self.budget, "d_max": self.d_max, "num_users": self.num_users}
        for key in ("w", "dist_u", "beta_u", "dist_v", "beta_v"):
            out[key] = self.provenance.get(key)
        out["sizes"] = [int(x) for x in self.sizes]
        if self.fitness is not None:
            out["fitness"] = self.fitness
        return out

    @classmethod
    def from_json(cls, obj):
        sizes = np.asarray(obj["sizes"], dtype=np.int64)
        nu = obj["num_users"]
        prov = {k: obj[k] for k in ("w", "dist_u", "beta_u", "dist_v", "beta_v")
                if obj.get(k) is not None}
        return cls(sizes[:nu], sizes[nu:], obj["budget"], obj["d_max"], prov, obj.get("fitness"))


def frequency_order(freq):
    """Entity indices by descending frequency, ties by ascending id."""
    freq = np.asarray(freq)
    return np.lexsort((np.arange(len(freq)), -freq))


def _allocate(raw_sizes, freq):
    out = np.empty_like(raw_sizes)
    out[frequency_order(freq)] = np.sort(raw_sizes)[::-1]
    return out


def repair(user_sizes, item_sizes, user_freq, item_freq, budget):
    """Decrement sizes from the least frequent entities until the total fits.

    Entities are swept in ascending global frequency (within a field, the
    reverse of the allocation order; users before items on exact ties).
    Each sweep lowers every size above 1 by one, stopping as soon as the
    total reaches ``budget``. Works in place.
    """
    nu = len(user_sizes)
    sizes = np.concatenate([user_sizes, item_sizes])
    freq = np.concatenate([user_freq, item_freq])
    rank = np.empty(len(sizes), dtype=np.int64)
    rank[frequency_order(user_freq)] = np.arange(nu)
    rank[nu + frequency_order(item_freq)] = np.arange(len(item_sizes))
    field_id = np.concatenate([np.zeros(nu, np.int64), np.ones(len(item_sizes), np.int64)])
    sweep = np.lexsort((field_id, -rank, freq))
    excess = int(sizes.sum()) - budget
    while excess > 0:
        eligible = sweep[sizes[sweep] > 1]
        if not len(eligible):
            raise BudgetInfeasible(budget, len(sizes))
        take = eligible[:excess]
        sizes[take] -= 1
        excess -= len(take)
    user_sizes[:] = sizes[:nu]
    item_sizes[:] = sizes[nu:]


def _build(p_users, p_items, w, user_freq, item_freq, budget, d_max):
    du = np.floor(normalize(p_users) * w * budget).astype(np.int64)
    dv = np.floor(normalize(p_items) * (1.0 - w) * budget).astype(np.int64)
    du = _allocate(np.clip(du, 1, d_max), user_freq)
    dv = _allocate(np.clip(dv, 1, d_max), item_freq)
    repair(du, dv, user_freq, item_freq, budget)
    return du, dv


def _feasible_budget(user_freq, item_freq, c, d_max):
    n = len(user_freq) + len(item_freq)
    budget = compute_budget(n, d_max, c)
    if budget < n:
        raise BudgetInfeasible(budget, n)
    return budget


def generate_action(user_freq, item_freq, c, d_max, rng, user_spec=None, item_spec=None, w=None):
    budget = _feasible_budget(user_freq, item_freq, c, d_max)
    user_spec = user_spec or draw_distribution(rng)
    item_spec = item_spec or draw_distribution(rng)
    w = float(rng.random()) if w is None else float(w)
    pu = draw_probabilities(user_spec, len(user_freq), rng)
    pv = draw_probabilities(item_spec, len(item_freq), rng)
    du, dv = _build(pu, pv, w, user_freq, item_freq, budget, d_max)
    prov = {"w": w, "dist_u": user_spec.kind, "beta_u": user_spec.beta,
            "dist_v": item_spec.kind, "beta_v": item_spec.beta}
    return SizeAction(du, dv, budget, d_max, prov)


def su_action(c, d_max, num_users, num_items):
    """Every entity gets the same size ``floor(B / N)``."""
    n = num_users + num_items
    budget = compute_budget(n, d_max, c)
    if budget < n:
        raise BudgetInfeasible(budget, n)
    size = min(max(1, budget // n), d_max)
    return SizeAction(np.full(num_users, size), np.full(num_items, size), budget, d_max,
                      {"dist_u": "su", "dist_v": "su"})


def sr_action(c, d_max, user_freq, item_freq, rng):
    """Uniform(0, 1) draws pushed through the normal size pipeline."""
    return generate_action(user_freq, item_freq, c, d_max, rng, UNIFORM, UNIFORM)


def action_as_sets(action):
    """Sets ``S_d`` for d = 1..d_max as sorted arrays of global entity ids."""
    sizes = action.sizes
    order = np.argsort(sizes, kind="stable")
    bounds = np.searchsorted(sizes[order], np.arange(1, action.d_max + 2))
    return [order[bounds[d]:bounds[d + 1]] for d in range(action.d_max)]


def check_action(action, num_users=None, num_items=None):
    """Raise ValueError unless ``action`` meets the budget and size range."""
    sizes = action.sizes
    if num_users is not None and len(action.user_sizes) != num_users:
        raise ValueError("action does not cover every user")
    if num_items is not None and len(action.item_sizes) != num_items:
        raise ValueError("action does not cover every item")
    if sizes.min() < 1 or sizes.max() > action.d_max:
        raise ValueError("size outside [1, d_max]")
    if int(sizes.sum()) > action.budget:
        raise ValueError(f"action uses {int(sizes.sum())} parameters, budget {action.budget}")
