"""DeepSets surrogate that predicts an action's fitness from its size sets.

Each entity is encoded from its normalised train frequency (separate user
and item encoders). For every size ``d`` the members of ``S_d`` are
mean-pooled, the scalar ``d / d_max`` is appended, and the result goes
through the size encoder. The action embedding is the average over all
``d_max`` sizes (an empty set pools to the zero vector) and the decoder
maps it to a scalar.

Set members are pooled in a canonical order (users before items, then by
frequency, then by id). Entities with equal frequency have identical
encodings, so the pooled sum does not depend on how ids are assigned.
"""

import struct

import numpy as np

from .sampler import SizeAction

LEAKY_SLOPE = 0.01
ENTITY_DIM = 16
SET_DIM = 64
PARTS = ("rho_u", "rho_v", "mu", "pi")
TAGS = {"rho_u": b"RHOU", "rho_v": b"RHOV", "mu": b"MU\0\0", "pi": b"PI\0\0"}
MAGIC = b"BETP"
VERSION = 1


class PredictorError(RuntimeError):
    pass


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


class MLP:
    """Two linear layers with a LeakyReLU in between; linear output."""

    def __init__(self, n_in, n_hidden, n_out, rng=None):
        self.shapes = {"W1": (n_in, n_hidden), "b1": (n_hidden,),
                       "W2": (n_hidden, n_out), "b2": (n_out,)}
        self.params = {k: np.zeros(s) for k, s in self.shapes.items()}
        if rng is not None:
            for w, (fi, fo) in (("W1", (n_in, n_hidden)), ("W2", (n_hidden, n_out))):
                bound = np.sqrt(6.0 / (fi + fo))
                self.params[w] = rng.uniform(-bound, bound, size=(fi, fo))

    def forward(self, x):
        p = self.params
        pre = x @ p["W1"] + p["b1"]
        hid = leaky_relu(pre)
        return hid @ p["W2"] + p["b2"], (x, pre, hid)

    def backward(self, cache, grad_out):
        x, pre, hid = cache
        p = self.params
        grads = {"W2": hid.T @ grad_out, "b2": grad_out.sum(axis=0)}
        g_hid = grad_out @ p["W2"].T
        g_pre = g_hid * np.where(pre > 0, 1.0, LEAKY_SLOPE)
        grads["W1"] = x.T @ g_pre
        grads["b1"] = g_pre.sum(axis=0)
        return grads, g_pre @ p["W1"].T


class FitnessPredictor:
    def __init__(self, user_freq, item_freq, d_max, seed=0, hidden_entity=16, hidden_set=64,
                 hidden_decoder=64):
        user_freq = np.asarray(user_freq, dtype=np.float64)
        item_freq = np.asarray(item_freq, dtype=np.float64)
        if np.any(user_freq < 0) or np.any(item_freq < 0):
            raise PredictorError("frequencies must be nonnegative")
        if user_freq.max(initial=0) <= 0 or item_freq.max(initial=0) <= 0:
            raise PredictorError("maximum frequency is zero; cannot normalise")
        self.num_users = len(user_freq)
        self.num_items = len(item_freq)
        self.d_max = int(d_max)
        self.user_freq = user_freq
        self.item_freq = item_freq
        self.user_input = user_freq / user_freq.max()
        self.item_input = item_freq / item_freq.max()
        rng = np.random.default_rng(seed)
        self.nets = {
            "rho_u": MLP(1, hidden_entity, ENTITY_DIM, rng),
            "rho_v": MLP(1, hidden_entity, ENTITY_DIM, rng),
            "mu": MLP(ENTITY_DIM + 1, hidden_set, SET_DIM, rng),
            "pi": MLP(SET_DIM, hidden_decoder, 1, rng),
        }
        # canonical pooling order: users first, then by frequency, then id
        ids = np.arange(self.num_users + self.num_items)
        field_id = (ids >= self.num_users).astype(np.int64)
        freq = np.concatenate([user_freq, item_freq])
        self._canon = np.lexsort((ids, freq, field_id))
        self._canon_rank = np.empty_like(self._canon)
        self._canon_rank[self._canon] = np.arange(len(self._canon))

    def parameters(self):
        """Flat view {"net.param": array} of every weight and bias."""
        return {f"{n}.{k}": v for n, net in self.nets.items() for k, v in net.params.items()}

    # -- forward ------------------------------------------------------------

    def encode_entities(self):
        qu, cu = self.nets["rho_u"].forward(self.user_input[:, None])
        qv, cv = self.nets["rho_v"].forward(self.item_input[:, None])
        return np.vstack([qu, qv]), (cu, cv)

    def encode_entity(self, n):
        """16-dim encoding of global entity ``n`` (users first, then items)."""
        if n < self.num_users:
            return self.nets["rho_u"].forward(np.array([[self.user_input[n]]]))[0][0]
        x = np.array([[self.item_input[n - self.num_users]]])
        return self.nets["rho_v"].forward(x)[0][0]

    def _pool(self, sizes, q):
        """Per-size mean of member encodings (zero rows for empty sizes) and set sizes."""
        sizes = np.asarray(sizes, dtype=np.int64)
        if len(sizes) != self.num_users + self.num_items:
            raise PredictorError("action does not cover every entity")
        if sizes.min() < 1 or sizes.max() > self.d_max:
            raise PredictorError("size outside [1, d_max]")
        order = self._canon[np.argsort(sizes[self._canon], kind="stable")]
        sorted_sizes = sizes[order]
        counts = np.bincount(sizes - 1, minlength=self.d_max)
        means = np.zeros((self.d_max, ENTITY_DIM))
        nonempty = np.flatnonzero(counts)
        starts = np.searchsorted(sorted_sizes, nonempty + 1)
        sums = np.add.reduceat(q[order], starts, axis=0)
        means[nonempty] = sums / counts[nonempty, None]
        return means, counts

    def encode_set(self, members, d, q=None):
        """Set embedding ``s_d`` for the given member ids and size ``d``."""
        if not 1 <= d <= self.d_max:
            raise PredictorError(f"size {d} outside [1, {self.d_max}]")
        if q is None:
            q = self.encode_entities()[0]
        members = np.asarray(members, dtype=np.int64)
        pooled = np.zeros(ENTITY_DIM)
        if len(members):
            members = members[np.argsort(self._canon_rank[members], kind="stable")]
            pooled = np.add.reduce(q[members], axis=0) / len(members)
        x = np.concatenate([pooled, [d / self.d_max]])[None, :]
        return self.nets["mu"].forward(x)[0][0]

    def _forward(self, sizes, q):
        means, counts = self._pool(sizes, q)
        frac = (np.arange(1, self.d_max + 1) / self.d_max)[:, None]
        x = np.hstack([means, frac])
        s, mu_cache = self.nets["mu"].forward(x)
        h = s.mean(axis=0)
        out, pi_cache = self.nets["pi"].forward(h[None, :])
        r = float(out[0, 0])
        if not np.isfinite(r):
            raise PredictorError("non-finite prediction")
        return r, h, (counts, mu_cache, pi_cache)

    @staticmethod
    def _sizes(action):
        return action.sizes if isinstance(action, SizeAction) else np.asarray(action)

    def embed_action(self, action, q=None):
        if q is None:
            q = self.encode_entities()[0]
        return self._forward(self._sizes(action), q)[1]

    def predict_fitness(self, action, q=None):
        if q is None:
            q = self.encode_entities()[0]
        return self._forward(self._sizes(action), q)[0]

    def predict_many(self, actions):
        q = self.encode_entities()[0]
        return np.array([self.predict_fitness(a, q) for a in actions])

    def embed_many(self, actions):
        q = self.encode_entities()[0]
        return np.vstack([self.embed_action(a, q) for a in actions])

    # -- training -----------------------------------------------------------

    def loss_and_grad(self, action, target):
        """Squared error ``(target - r_hat)^2`` and its gradient w.r.t. every parameter."""
        sizes = self._sizes(action)
        q, (cu, cv) = self.encode_entities()
        r, _, (counts, mu_cache, pi_cache) = self._forward(sizes, q)
        loss = (target - r) ** 2
        g_r = np.array([[2.0 * (r - target)]])
        grads = {}
        g_pi, g_h = self.nets["pi"].backward(pi_cache, g_r)
        grads["pi"] = g_pi
        g_s = np.repeat(g_h / self.d_max, self.d_max, axis=0)
        g_mu, g_x = self.nets["mu"].backward(mu_cache, g_s)
        grads["mu"] = g_mu
        g_mean = g_x[:, :ENTITY_DIM]
        safe = np.maximum(counts, 1)
        g_q = (g_mean / safe[:, None])[np.asarray(sizes, dtype=np.int64) - 1]
        grads["rho_u"] = self.nets["rho_u"].backward(cu, g_q[:self.num_users])[0]
        grads["rho_v"] = self.nets["rho_v"].backward(cv, g_q[self.num_users:])[0]
        flat = {f"{n}.{k}": v for n, g in grads.items() for k, v in g.items()}
        return float(loss), flat

    def step(self, grads, lr):
        params = self.parameters()
        for k, g in grads.items():
            params[k] -= lr * g

    # -- persistence --------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIII", MAGIC, VERSION, self.d_max, len(PARTS)))
            for name in PARTS:
                fh.write(TAGS[name])
                for key in ("W1", "b1", "W2", "b2"):
                    arr = np.atleast_2d(self.nets[name].params[key])
                    fh.write(struct.pack("<II", *arr.shape))
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def load_parameters(self, path):
        with open(path, "rb") as fh:
            data = fh.read()
        magic, version, d_max, parts = struct.unpack_from("<4sIII", data)
        if magic != MAGIC or version != VERSION:
            raise PredictorError(f"{path}: not a predictor file")
        if d_max != self.d_max or parts != len(PARTS):
            raise PredictorError(f"{path}: shape mismatch")
        off = 16
        for name in PARTS:
            if data[off:off + 4] != TAGS[name]:
                raise PredictorError(f"{path}: expected section {TAGS[name]!r}")
            off += 4
            for key in ("W1", "b1", "W2", "b2"):
                rows, cols = struct.unpack_from("<II", data, off)
                off += 8
                arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
                off += 8 * rows * cols
                target = self.nets[name].params[key]
                if arr.size != target.size:
                    raise PredictorError(f"{path}: {name}.{key} has wrong size")
                target[...] = arr.reshape(target.shape)


class Population:
    """Ordered archive of (action, measured fitness) pairs."""

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, action, fitness):
        fitness = float(fitness)
        if not np.isfinite(fitness) or fitness < 0:
            raise ValueError(f"fitness must be finite and >= 0, got {fitness}")
        action.fitness = fitness
        self.entries.append((action, fitness))

    def best(self):
        if not self.entries:
            raise ValueError("empty population")
        return self.top(1)[0][0]

    def top(self, k):
        """Up to ``k`` entries by fitness descending (earlier entries win ties)."""
        idx = sorted(range(len(self.entries)), key=lambda i: (-self.entries[i][1], i))
        return [self.entries[i] for i in idx[:k]]

    def sample(self, rng):
        return self.entries[int(rng.integers(len(self.entries)))]

    def to_json(self):
        return [{"index": i, "fitness": f, "action": a.to_json()}
                for i, (a, f) in enumerate(self.entries)]

    @classmethod
    def from_json(cls, rows):
        pop = cls()
        for row in rows:
            pop.add(SizeAction.from_json(row["action"]), row["fitness"])
        return pop


def train_predictor(predictor, population, n_updates, rng, lr=1e-3):
    """Run ``n_updates`` single-sample MSE steps; return the mean pre-update loss."""
    if not len(population):
        raise PredictorError("empty population")
    if n_updates < 1:
        raise PredictorError("n_updates must be >= 1")
    losses = []
    for _ in range(n_updates):
        action, fitness = population.sample(rng)
        loss, grads = predictor.loss_and_grad(action, fitness)
        if not np.isfinite(loss):
            raise PredictorError(f"non-finite predictor loss {loss}")
        predictor.step(grads, lr)
        losses.append(loss)
    return float(np.mean(losses))
