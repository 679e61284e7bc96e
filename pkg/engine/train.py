import logging
import threading
from itertools import zip_longest

import numpy as np
from scipy.special import expit, log_expit, logsumexp
from tqdm import tqdm

from engine.graph import prior_from_graph
from engine.ingest import read_text
from engine.sampling import (
    MAX_REDRAWS,
    conditional_noise,
    edge_sampler,
    make_rng,
    reject_positives,
    sample,
    unigram_noise,
)
from models import (
    EmbeddingStore,
    LossSample,
    NodeKind,
    TrainingDiverged,
    ValidationError,
    Variant,
)

logger = logging.getLogger(__name__)

SCORE_CLIP = 30.0


def init_embeddings(counts, d, seed):
    """Uniform init on [-0.5/d, 0.5/d], one matrix per node kind."""
    if d < 1:
        raise ValidationError("Embedding dimension must be positive")
    rng = make_rng(seed)
    bound = 0.5 / d
    matrices = {
        kind: rng.uniform(-bound, bound, size=(counts[kind], d)) for kind in NodeKind
    }
    return EmbeddingStore(d, matrices)


def edge_loss(z_i, z_j, negatives=()):
    """Negative-sampling loss of one edge: -log s(zi.zj) - sum log s(-zn.zj)."""
    score = np.clip(np.dot(z_i, z_j), -SCORE_CLIP, SCORE_CLIP)
    loss = -log_expit(score)
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.size:
        neg_scores = np.clip(negatives @ z_j, -SCORE_CLIP, SCORE_CLIP)
        loss -= log_expit(-neg_scores).sum()
    return float(loss)


def edge_gradients(z_i, z_j, negatives=()):
    """Analytic gradients of edge_loss w.r.t. z_i, z_j and each negative row."""
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, len(z_j))
    g = 1.0 - expit(np.dot(z_i, z_j))
    g_neg = expit(negatives @ z_j)
    grad_i = -g * z_j
    grad_j = -g * z_i + g_neg @ negatives
    grad_neg = g_neg[:, None] * z_j
    return grad_i, grad_j, grad_neg


def sgd_update(store, g, i, j, negatives, lr):
    """
    One SGD step on edge (i, j) of graph g, in place.

    The target row's update is accumulated and applied once at the end.
    Returns the edge loss measured before the step.
    """
    contexts = store.matrix(g.context_kind)
    targets = store.matrix(g.target_kind)
    negatives = np.asarray(negatives, dtype=np.int64)
    negatives = negatives[negatives >= 0]

    z_j = targets[j].copy()
    z_i = contexts[i].copy()
    score = z_i @ z_j
    coef = lr * (1.0 - expit(score))
    accum = coef * z_i
    contexts[i] += coef * z_j
    loss = -log_expit(np.clip(score, -SCORE_CLIP, SCORE_CLIP))

    if len(negatives):
        z_neg = contexts[negatives]
        neg_scores = z_neg @ z_j
        neg_coef = -lr * expit(neg_scores)
        accum += neg_coef @ z_neg
        np.add.at(contexts, negatives, neg_coef[:, None] * z_j)
        loss -= log_expit(-np.clip(neg_scores, -SCORE_CLIP, SCORE_CLIP)).sum()

    targets[j] += accum
    return float(loss)


def draw_negatives(noise, i, j, m, rng):
    """m negatives from q(.|j), redrawing any that equal the positive context."""
    negatives = noise.draw(j, m, rng)
    for _ in range(MAX_REDRAWS):
        clash = negatives == i
        if not clash.any():
            return negatives
        negatives[clash] = noise.draw(j, int(clash.sum()), rng)
    return negatives[negatives != i]


def train_bipartite(store, g, noise, m, lr, rng, edge_table=None):
    """Sample one edge and m negatives, then apply sgd_update."""
    table = edge_table if edge_table is not None else edge_sampler(g)
    e = sample(table, rng)
    i, j = int(g.context[e]), int(g.target[e])
    negatives = draw_negatives(noise, i, j, m, rng) if m else np.empty(0, np.int64)
    return sgd_update(store, g, i, j, negatives, lr)


def training_views(graph, variant):
    """The bipartite graphs a variant trains on, in round-robin order."""
    variant = Variant(variant)
    views = [graph.g_bu, graph.g_bt, graph.g_ba]
    if variant == Variant.EDHG_POI:
        if graph.g_bb is None:
            raise ValidationError("Variant edhg-poi needs POI-POI edges in the graph")
        views.append(graph.g_bb)
    kept = [g for g in views if g.n_edges > 0]
    for g in views:
        if g.n_edges == 0:
            logger.warning(f"Skipping empty graph {g.name}")
    if not kept:
        raise ValidationError("Nothing to train: every bipartite graph is empty")
    return kept


def build_noise(graph, g, variant):
    if Variant(variant) == Variant.EDHG_NS:
        return unigram_noise(g)
    return conditional_noise(g, prior_from_graph(graph), graph.category_of(g.context_kind))


class _Buffer:
    """Pre-drawn edges and negatives for one bipartite graph."""

    def __init__(self, g, table, noise, m, size):
        self.g, self.table, self.noise, self.m, self.size = g, table, noise, m, size
        self.pos = size
        self.i = self.j = self.negatives = None

    def next(self, rng):
        if self.pos >= self.size:
            edges = self.table.draw(rng, self.size)
            self.i = self.g.context[edges]
            self.j = self.g.target[edges]
            if self.m:
                drawn = self.noise.draw_many(self.j, self.m, rng)
                self.negatives = reject_positives(self.noise, drawn, self.i, self.j, rng)
            else:
                self.negatives = np.empty((self.size, 0), dtype=np.int64)
            self.pos = 0
        k = self.pos
        self.pos += 1
        return int(self.i[k]), int(self.j[k]), self.negatives[k]


class JointTrainer:
    """Round-robin training over the bipartite views of a heterogeneous graph."""

    def __init__(self, graph, config, store=None):
        self.graph = graph
        self.config = config.validate()
        self.views = training_views(graph, config.variant)
        self.noises = [build_noise(graph, g, config.variant) for g in self.views]
        self.edge_tables = [edge_sampler(g) for g in self.views]
        self.store = store if store is not None else init_embeddings(graph.counts, config.dim, config.seed)
        self.history = []

    def _worker(self, thread_id, steps, out):
        config = self.config
        rng = make_rng(config.seed + thread_id)
        buffers = [
            _Buffer(g, table, noise, config.negatives, config.block_size)
            for g, table, noise in zip(self.views, self.edge_tables, self.noises)
        ]
        n_views = len(buffers)
        every = max(1, steps // config.checkpoints)
        window_loss, window_steps = 0.0, 0

        progress = tqdm(
            range(steps),
            disable=not config.progress or thread_id != 0,
            desc="train",
            unit="step",
        )
        for step in progress:
            buffer = buffers[step % n_views]
            i, j, negatives = buffer.next(rng)
            lr = config.learning_rate(step, steps)
            window_loss += sgd_update(self.store, buffer.g, i, j, negatives, lr)
            window_steps += 1

            done = step + 1
            if done % config.nan_check_every == 0 and not self.store.is_finite():
                raise TrainingDiverged(done)
            if done % every == 0 or done == steps:
                out.append(LossSample(done, window_loss / window_steps))
                if thread_id == 0:
                    logger.info(f"step {done}/{steps} lr={lr:.6f} loss={window_loss / window_steps:.4f}")
                window_loss, window_steps = 0.0, 0

    def run(self):
        config = self.config
        logger.info(
            f"Training {config.variant.value} on {[g.name for g in self.views]}: "
            f"N={config.iterations} m={config.negatives} d={config.dim} threads={config.threads}"
        )
        if config.threads == 1:
            history = []
            self._worker(0, config.iterations, history)
            self.history = history
        else:
            self.history = self._run_threads()

        if not self.store.is_finite():
            raise TrainingDiverged(config.iterations)
        return self.store

    def _run_threads(self):
        config = self.config
        share, extra = divmod(config.iterations, config.threads)
        outputs = [[] for _ in range(config.threads)]
        errors = []

        def target(thread_id):
            try:
                self._worker(thread_id, share + (extra if thread_id == 0 else 0), outputs[thread_id])
            except Exception as e:
                errors.append(e)

        # workers share the store without locks; lost updates are tolerated
        workers = [
            threading.Thread(target=target, args=(t,), name=f"train-{t}")
            for t in range(config.threads)
        ]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
        if errors:
            raise errors[0]

        # threads may log different checkpoint counts; a finished thread adds its final step
        merged = []
        for samples in zip_longest(*outputs):
            present = [s for s in samples if s is not None]
            step = sum(
                s.step if s is not None else (out[-1].step if out else 0)
                for s, out in zip(samples, outputs)
            )
            merged.append(LossSample(step, float(np.mean([s.estimate for s in present]))))
        return merged


def joint_train(graph, config, store=None):
    return JointTrainer(graph, config, store).run()


def exact_objective(store, g):
    """-sum w_ij log softmax_i(z_i . z_j) over all edges; small graphs only."""
    contexts = store.matrix(g.context_kind)
    targets = store.matrix(g.target_kind)
    scores = contexts @ targets.T
    log_norm = logsumexp(scores, axis=0)
    log_p = scores[g.context, g.target] - log_norm[g.target]
    return float(-(g.weight * log_p).sum())


# --- Persistence ---


def save_embeddings(store, path):
    rows = []
    for kind in NodeKind:
        for index, vector in enumerate(store.matrix(kind)):
            rows.append(f"{kind.value}:{index} " + " ".join(format(v, ".9g") for v in vector.tolist()))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{len(rows)} {store.d}\n")
        f.write("\n".join(rows) + "\n")


def load_embeddings(path):
    lines = read_text(path).splitlines()
    try:
        node_count, d = (int(x) for x in lines[0].split())
    except (IndexError, ValueError):
        raise ValidationError(f"{path}: first line must be '<node_count> <dim>'")

    vectors = {kind: {} for kind in NodeKind}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        try:
            kind, index = fields[0].split(":")
            values = np.array(fields[1:], dtype=np.float64)
            vectors[NodeKind(kind)][int(index)] = values
        except ValueError as e:
            raise ValidationError(f"{path}:{line_no}: {e}")
        if len(values) != d:
            raise ValidationError(f"{path}:{line_no}: expected {d} values, got {len(values)}")

    if sum(len(v) for v in vectors.values()) != node_count:
        raise ValidationError(f"{path}: node count does not match header {node_count}")
    matrices = {}
    for kind, rows in vectors.items():
        if sorted(rows) != list(range(len(rows))):
            raise ValidationError(f"{path}: {kind.value} indices are not dense")
        matrices[kind] = (
            np.vstack([rows[i] for i in range(len(rows))]) if rows else np.empty((0, d))
        )
    return EmbeddingStore(d, matrices)
