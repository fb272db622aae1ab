"""Retrieval and classification evaluation.

Scoring covers every objective: triangle areas (optionally minus
alpha * cos(text, video), the downstream regularizer), mean pairwise
cosine for the anchor baseline, Gram volumes, and multilinear inner
products. A query side is either a text embedding matrix or a (video,
audio) pair; exactly one side must be text.

Ranks are 1-based and ties break toward the lowest candidate index, making
every metric deterministic. ``recall_at_k`` takes one true column per
query row (a permutation for self-retrieval, class labels for
classification); ``first_relevant_ranks`` handles queries with several
correct candidates, e.g. a class-text query against all test pairs.

``compare_convergence`` reruns training per objective per seed on shared
data seeds and reports median recall curves plus the median step at which
each objective first crosses the threshold.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

import numpy as np

from . import config as config_mod
from . import geometry
from . import train as train_mod
from .data import TriModalDataset
from .losses import LossConfig, Objective
from .nn import EncoderStack


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict
    ranks: np.ndarray
    objective: str = ""
    alpha: float = 0.0

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "ranks": [int(r) for r in self.ranks],
            "objective": self.objective,
            "alpha": self.alpha,
        }


@dataclass
class AreaStats:
    mean: float
    counts: np.ndarray
    bin_edges: np.ndarray


@dataclass
class ZeroShotResult:
    predictions: np.ndarray
    accuracy: float
    recall_at: dict


def _split_sides(queries, candidates):
    """Classify the two sides into (text matrix, (video, audio) pair)."""

    def kind(side):
        if isinstance(side, tuple) and len(side) == 2:
            v = np.asarray(side[0], dtype=np.float64)
            a = np.asarray(side[1], dtype=np.float64)
            if v.shape != a.shape:
                raise ValueError(f"video/audio shape mismatch: {v.shape} vs {a.shape}")
            return "data", (v, a)
        return "text", np.asarray(side, dtype=np.float64)

    q_kind, q = kind(queries)
    c_kind, c = kind(candidates)
    if q_kind == c_kind:
        raise ValueError("exactly one of queries/candidates must be the text side")
    return q_kind, q, c


def score_all(queries, candidates, objective, alpha: float = 0.0) -> geometry.ScoreMatrix:
    """Score every query row against every candidate under an objective.

    One side is a text embedding matrix, the other a (video, audio) tuple.
    alpha only applies to the triangle objective, where the score becomes
    area(t, v, a) - alpha * cos(t, v); any other objective requires
    alpha == 0.
    """
    objective = Objective(objective)
    if objective is not Objective.TRIANGLE and alpha != 0.0:
        raise ValueError(f"alpha is only defined for the triangle objective, got "
                         f"alpha={alpha} with {objective.value}")
    q_kind, q, c = _split_sides(queries, candidates)
    if q_kind == "text":
        text, (video, audio) = q, c
    else:
        text, (video, audio) = c, q

    # All batched kernels produce (text rows, data rows); transpose when the
    # queries are the data side.
    if objective is Objective.TRIANGLE:
        values = geometry.area_matrix(text, video, audio)
        if alpha != 0.0:
            values = values - alpha * geometry.cosine_matrix(text, video)
        orientation = geometry.Orientation.LOWER_IS_BETTER
    elif objective is Objective.COSINE_ANCHOR:
        values = 0.5 * (geometry.cosine_matrix(text, video)
                        + geometry.cosine_matrix(text, audio))
        orientation = geometry.Orientation.HIGHER_IS_BETTER
    elif objective is Objective.GRAM_VOLUME:
        values = geometry.volume_matrix(text, video, audio)
        orientation = geometry.Orientation.LOWER_IS_BETTER
    else:
        values = geometry.mip_matrix(text, video, audio)
        orientation = geometry.Orientation.HIGHER_IS_BETTER

    if q_kind == "data":
        values = values.T
        semantics = "row i = data pair query vs candidate texts"
    else:
        semantics = "row i = text query vs candidate (video, audio) pairs"
    return geometry.ScoreMatrix(values, orientation, row_semantics=semantics)


def _oriented_keys(matrix: geometry.ScoreMatrix) -> np.ndarray:
    """Keys where smaller always means better."""
    if matrix.orientation is geometry.Orientation.LOWER_IS_BETTER:
        return matrix.values
    return -matrix.values


def ranks_of_truth(matrix: geometry.ScoreMatrix, truth) -> np.ndarray:
    """1-based rank of each row's true column; ties favor lower indices."""
    keys = _oriented_keys(matrix)
    b, k = keys.shape
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != (b,):
        raise ValueError(f"truth must have one entry per row, got shape {truth.shape}")
    if np.any(truth < 0) or np.any(truth >= k):
        raise ValueError(f"truth columns out of range [0, {k})")
    rows = np.arange(b)
    key_t = keys[rows, truth][:, None]
    better = (keys < key_t).sum(axis=1)
    cols = np.arange(k)[None, :]
    tied_before = ((keys == key_t) & (cols < truth[:, None])).sum(axis=1)
    return better + tied_before + 1


def recall_at_k(matrix: geometry.ScoreMatrix, truth, ks, direction: str = "",
                objective: str = "", alpha: float = 0.0) -> RetrievalReport:
    """Fraction of queries whose true candidate ranks within the top k."""
    ranks = ranks_of_truth(matrix, truth)
    recall = {int(k): float(np.mean(ranks <= k)) for k in ks}
    return RetrievalReport(direction=direction, recall_at=recall, ranks=ranks,
                           objective=objective, alpha=alpha)


def first_relevant_ranks(matrix: geometry.ScoreMatrix, relevant) -> np.ndarray:
    """Per row, the best (1-based) rank among that row's relevant columns.

    relevant is a boolean (rows, cols) mask with at least one True per row.
    """
    keys = _oriented_keys(matrix)
    relevant = np.asarray(relevant, dtype=bool)
    if relevant.shape != keys.shape:
        raise ValueError(f"relevance mask shape {relevant.shape} does not match "
                         f"matrix {keys.shape}")
    if not np.all(relevant.any(axis=1)):
        raise ValueError("every query row needs at least one relevant candidate")
    order = np.argsort(keys, axis=1, kind="stable")
    rank_of_col = np.empty_like(order)
    b, k = keys.shape
    rows = np.arange(b)[:, None]
    rank_of_col[rows, order] = np.arange(1, k + 1)[None, :]
    masked = np.where(relevant, rank_of_col, k + 1)
    return masked.min(axis=1)


def classify_zero_shot(video_emb, audio_emb, class_text_emb, labels, objective,
                       alpha: float = 0.0, ks=(1,)) -> ZeroShotResult:
    """Score each (v, a) pair against all class texts; predict the best.

    Accuracy equals recall@1 of the same score matrix with the labels as
    truth, by construction (identical tie-breaking).
    """
    matrix = score_all((video_emb, audio_emb), class_text_emb, objective, alpha)
    keys = _oriented_keys(matrix)
    predictions = np.argmin(keys, axis=1)  # first minimum = lowest index on ties
    labels = np.asarray(labels, dtype=np.int64)
    accuracy = float(np.mean(predictions == labels))
    report = recall_at_k(matrix, labels, ks, direction="d2t",
                         objective=str(objective), alpha=alpha)
    return ZeroShotResult(predictions=predictions, accuracy=accuracy,
                          recall_at=report.recall_at)


def positive_area_stats(text_emb, video_emb, audio_emb, bins: int = 20,
                        value_range=(0.0, 1.5)) -> AreaStats:
    """Mean and fixed-bin histogram of matched-triple triangle areas."""
    areas = geometry.triangle_area_rows(text_emb, video_emb, audio_emb)
    counts, edges = np.histogram(areas, bins=bins, range=value_range)
    return AreaStats(mean=float(np.mean(areas)), counts=counts, bin_edges=edges)


def track_positive_area(stack: EncoderStack, dataset: TriModalDataset,
                        bins: int = 20) -> AreaStats:
    """Embed a dataset and summarize its positive-pair areas."""
    if dataset.size < 1:
        raise ValueError("dataset is empty")
    t, v, a, _ = stack.embed(dataset.text_inputs, dataset.video_inputs,
                             dataset.audio_inputs)
    return positive_area_stats(t, v, a, bins=bins)


def evaluate_stack(stack: EncoderStack, dataset: TriModalDataset, loss_cfg: LossConfig,
                   ks=(1, 5, 10)) -> dict:
    """Both-direction class retrieval metrics plus the mean positive area.

    d2t: each test (v, a) pair queries the class-text embeddings (truth =
    its label). t2d: each class text queries all test pairs; a query
    counts at k if any same-class pair ranks within the top k. "r{k}" keys
    average the two directions; alpha weights follow the config for the
    triangle objective and are 0 for every other objective.
    """
    t, v, a, _ = stack.embed(dataset.text_inputs, dataset.video_inputs,
                             dataset.audio_inputs)
    class_t, _ = stack.text.forward(dataset.class_text_inputs)
    objective = loss_cfg.objective
    alpha_t2d = loss_cfg.alpha if objective is Objective.TRIANGLE else 0.0
    alpha_d2t = loss_cfg.alpha_d2t if objective is Objective.TRIANGLE else 0.0

    d2t_matrix = score_all((v, a), class_t, objective, alpha_d2t)
    d2t_ranks = ranks_of_truth(d2t_matrix, dataset.labels)

    t2d_matrix = score_all(class_t, (v, a), objective, alpha_t2d)
    relevant = dataset.labels[None, :] == np.arange(dataset.num_classes)[:, None]
    t2d_ranks = first_relevant_ranks(t2d_matrix, relevant)

    metrics = {}
    for k in ks:
        r_d2t = float(np.mean(d2t_ranks <= k))
        r_t2d = float(np.mean(t2d_ranks <= k))
        metrics[f"r{k}_d2t"] = r_d2t
        metrics[f"r{k}_t2d"] = r_t2d
        metrics[f"r{k}"] = 0.5 * (r_d2t + r_t2d)
    metrics["mean_area"] = positive_area_stats(t, v, a).mean
    return metrics


def make_eval_fn(dataset: TriModalDataset, loss_cfg: LossConfig, ks=(1, 5, 10)):
    """Bind a test set and loss config into the train-loop eval hook."""

    def eval_fn(stack: EncoderStack) -> dict:
        return evaluate_stack(stack, dataset, loss_cfg, ks=ks)

    return eval_fn


# ---------------------------------------------------------------------------
# Convergence comparison
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    """Median recall curves and threshold-crossing steps per objective."""

    threshold: float
    objectives: list
    seeds: list
    runs: list              # (objective, seed, [(step, r1), ...]) per training run
    median_curve: dict      # objective -> [(step, r1), ...]
    steps_to_threshold: dict  # objective -> int | None
    final_r1: dict          # objective -> median final r1

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "objectives": list(self.objectives),
            "seeds": list(self.seeds),
            "median_curve": {obj: [[s, r] for s, r in curve]
                             for obj, curve in self.median_curve.items()},
            "steps_to_threshold": dict(self.steps_to_threshold),
            "final_r1": dict(self.final_r1),
        }

    def curve_rows(self) -> list:
        """CSV-shaped rows: (step, objective, seed, metric, value)."""
        rows = []
        for obj, seed, curve in self.runs:
            for step, r1 in curve:
                rows.append((step, obj, seed, "r1", r1))
        return rows


def steps_to_threshold(curve, threshold: float):
    """First eval step at which r1 >= threshold, or None."""
    for step, r1 in curve:
        if r1 >= threshold:
            return step
    return None


def _median_steps(values):
    """Median crossing step; None when the median run never crosses."""
    as_numbers = [float("inf") if v is None else v for v in values]
    med = statistics.median(as_numbers)
    return None if med == float("inf") else int(med)


def compare_convergence(objectives, cfg, seeds, threshold: float = 0.9) -> ConvergenceReport:
    """Train each objective on each seed with shared data; compare medians.

    Data comes from the config's data section once (identical across
    objectives and seeds); per-seed model/optimizer seeds are derived from
    the config seeds and the seed index, so listing the same objective
    twice with the same seed reproduces the identical curve.
    """
    if len(objectives) < 1:
        raise ValueError("need at least one objective")
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    train_ds, test_ds = cfg.data.build()
    runs = []
    for objective in objectives:
        objective = Objective(objective)
        loss_cfg = replace(cfg.loss, objective=objective)
        for seed in seeds:
            model_cfg = replace(cfg.model,
                                init_seed=config_mod._child_seed(cfg.model.init_seed, seed))
            optim_cfg = replace(cfg.optim,
                                rng_seed=config_mod._child_seed(cfg.optim.rng_seed, seed))
            run_cfg = replace(cfg, model=model_cfg, loss=loss_cfg, optim=optim_cfg)
            stack, matcher = config_mod.build_model(run_cfg, train_ds)
            result = train_mod.train(stack, matcher, train_ds, loss_cfg, optim_cfg,
                                     eval_fn=make_eval_fn(test_ds, loss_cfg))
            curve = [(rec["step"], rec["r1"]) for rec in result.log.evals()]
            runs.append((objective.value, seed, curve))

    median_curve = {}
    crossing = {}
    final_r1 = {}
    for obj in dict.fromkeys(Objective(o).value for o in objectives):
        seed_curves = [curve for o, _, curve in runs if o == obj]
        steps = [s for s, _ in seed_curves[0]]
        median_curve[obj] = [
            (step, float(np.median([curve[i][1] for curve in seed_curves])))
            for i, step in enumerate(steps)
        ]
        crossing[obj] = _median_steps(
            [steps_to_threshold(curve, threshold) for curve in seed_curves])
        final_r1[obj] = float(np.median([curve[-1][1] for curve in seed_curves]))
    return ConvergenceReport(
        threshold=threshold,
        objectives=[Objective(o).value for o in objectives],
        seeds=list(seeds),
        runs=runs,
        median_curve=median_curve,
        steps_to_threshold=crossing,
        final_r1=final_r1,
    )
