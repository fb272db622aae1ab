"""Training objectives with value + embedding-gradient contracts.

Every loss takes the three embedding matrices (B, n) and returns a
``LossOutput`` holding the scalar value, named per-direction components,
and gradients w.r.t. every text/video/audio embedding in the batch.
Softmax cross-entropies are computed in shifted (log-sum-exp) form, so a
batch with identical scores everywhere yields exactly ln B per direction.

Contrastive objectives:

* triangle:      0.5 * (L_D2T + L_T2D) over negated triangle areas / tau
* cosine_anchor: sum over the two non-anchor modalities of the symmetric
                 CLIP-style pair loss against the anchor (cosine / tau)
* gram_volume:   triangle shape with parallelotope volumes as the score
* symile_mip:    triangle shape with multilinear inner products (sign
                 flipped: higher product = better match)

The matching (DTM) auxiliary is a binary classifier on concatenated
embeddings: label 1 for matched triples, 0 for in-batch caption swaps.
``total_loss`` adds it with weight ``dtm_weight`` to whichever contrastive
objective is selected; at weight 0 the contrastive output is returned
untouched and the matcher is never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import geometry
from .nn import Mlp


class Objective(str, Enum):
    TRIANGLE = "triangle"
    COSINE_ANCHOR = "cosine_anchor"
    GRAM_VOLUME = "gram_volume"
    SYMILE_MIP = "symile_mip"


ANCHOR_LETTER = {"text": "t", "video": "v", "audio": "a"}


@dataclass
class LossConfig:
    """Objective selection and weights.

    alpha weights the cosine regularizer in downstream text->data scoring
    (alpha_d2t covers the other direction); neither enters the training
    loss. dtm_weight is the matching-loss weight ("lambda"); 0 disables the
    matcher entirely.
    """

    objective: Objective = Objective.TRIANGLE
    tau: float = 0.07
    alpha: float = 1.0
    alpha_d2t: float = 0.0
    dtm_weight: float = 0.1
    anchor: str = "text"
    area_eps: float = 1e-12

    def __post_init__(self):
        self.objective = Objective(self.objective)
        if not (np.isfinite(self.tau) and self.tau > 0.0):
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name in ("alpha", "alpha_d2t", "dtm_weight"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.anchor not in ANCHOR_LETTER:
            raise ValueError(f"anchor must be one of {sorted(ANCHOR_LETTER)}, got {self.anchor!r}")
        if self.area_eps < 0.0:
            raise ValueError(f"area_eps must be >= 0, got {self.area_eps}")


@dataclass
class LossOutput:
    value: float
    components: dict
    d_text: np.ndarray
    d_video: np.ndarray
    d_audio: np.ndarray
    matcher_grads: list | None = None
    warning: str | None = None


def _check_batch(text_emb, video_emb, audio_emb):
    t = np.asarray(text_emb, dtype=np.float64)
    v = np.asarray(video_emb, dtype=np.float64)
    a = np.asarray(audio_emb, dtype=np.float64)
    if t.ndim != 2 or v.ndim != 2 or a.ndim != 2:
        raise ValueError("embeddings must be 2-D (batch, dim)")
    if not (t.shape == v.shape == a.shape):
        raise ValueError(f"embedding shape mismatch: {t.shape}, {v.shape}, {a.shape}")
    if t.shape[0] < 1:
        raise ValueError("batch must be non-empty")
    return t, v, a


def _check_tau(tau: float):
    if not (np.isfinite(tau) and tau > 0.0):
        raise ValueError(f"tau must be > 0, got {tau}")


def softmax_ce_diag(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of each row against its diagonal entry.

    Log-sum-exp is computed in max-shifted form. Returns the scalar loss
    and d(loss)/d(logits) = (softmax - I) / B.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ValueError(f"diagonal-target cross-entropy needs a square matrix, got {logits.shape}")
    b = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    exp_z = np.exp(z)
    sums = exp_z.sum(axis=1)
    loss = float(np.mean(np.log(sums) - np.diagonal(z)))
    dlogits = (exp_z / sums[:, None] - np.eye(b)) / b
    return loss, dlogits


def _both_directions(scores: np.ndarray, sign: float, tau: float):
    """Diagonal cross-entropy over a vary-data score matrix, both ways.

    Rows of ``scores`` are captions, columns data pairs; entry (i, j) is
    score(t_i, (v_j, a_j)). ``sign`` maps scores to logits (+1 when higher
    scores are better, -1 when lower is better). Returns the two direction
    losses and d(0.5 * (L_d2t + L_t2d)) / d(scores).
    """
    logits_t2d = (sign / tau) * scores
    l_t2d, d_t2d = softmax_ce_diag(logits_t2d)
    l_d2t, d_d2t = softmax_ce_diag(logits_t2d.T)
    d_scores = (0.5 * sign / tau) * (d_t2d + d_d2t.T)
    return l_d2t, l_t2d, d_scores


def triangle_contrastive(text_emb, video_emb, audio_emb, tau: float = 0.07,
                         area_eps: float = 1e-12) -> LossOutput:
    """Contrastive loss on negated triangle areas, both directions."""
    t, v, a = _check_batch(text_emb, video_emb, audio_emb)
    _check_tau(tau)
    areas = geometry.area_matrix(t, v, a, eps=area_eps)
    l_d2t, l_t2d, d_scores = _both_directions(areas, sign=-1.0, tau=tau)
    d_t, d_v, d_a = geometry.area_matrix_backward(t, v, a, d_scores, eps=area_eps)
    return LossOutput(
        value=0.5 * (l_d2t + l_t2d),
        components={"d2t": l_d2t, "t2d": l_t2d},
        d_text=d_t, d_video=d_v, d_audio=d_a,
    )


def gram_contrastive(text_emb, video_emb, audio_emb, tau: float = 0.07) -> LossOutput:
    """Contrastive loss on negated parallelotope volumes, both directions."""
    t, v, a = _check_batch(text_emb, video_emb, audio_emb)
    _check_tau(tau)
    vols = geometry.volume_matrix(t, v, a)
    l_d2t, l_t2d, d_scores = _both_directions(vols, sign=-1.0, tau=tau)
    d_t, d_v, d_a = geometry.volume_matrix_backward(t, v, a, d_scores)
    return LossOutput(
        value=0.5 * (l_d2t + l_t2d),
        components={"d2t": l_d2t, "t2d": l_t2d},
        d_text=d_t, d_video=d_v, d_audio=d_a,
    )


def symile_contrastive(text_emb, video_emb, audio_emb, tau: float = 0.07) -> LossOutput:
    """Contrastive loss on multilinear inner products, both directions."""
    t, v, a = _check_batch(text_emb, video_emb, audio_emb)
    _check_tau(tau)
    scores = geometry.mip_matrix(t, v, a)
    l_d2t, l_t2d, d_scores = _both_directions(scores, sign=+1.0, tau=tau)
    d_t, d_v, d_a = geometry.mip_matrix_backward(t, v, a, d_scores)
    return LossOutput(
        value=0.5 * (l_d2t + l_t2d),
        components={"d2t": l_d2t, "t2d": l_t2d},
        d_text=d_t, d_video=d_v, d_audio=d_a,
    )


def pairwise_anchor_loss(text_emb, video_emb, audio_emb, tau: float = 0.07,
                         anchor: str = "text") -> LossOutput:
    """Sum of the two symmetric pairwise cosine cross-entropies vs the anchor.

    Each non-anchor modality contributes 0.5 * (anchor->m + m->anchor) on
    cosine scores divided by tau; components are keyed per direction, e.g.
    "t2v" / "v2t" with a text anchor.
    """
    t, v, a = _check_batch(text_emb, video_emb, audio_emb)
    _check_tau(tau)
    if anchor not in ANCHOR_LETTER:
        raise ValueError(f"anchor must be one of {sorted(ANCHOR_LETTER)}, got {anchor!r}")
    embs = {"text": t, "video": v, "audio": a}
    grads = {name: np.zeros_like(emb) for name, emb in embs.items()}
    anchor_emb = embs[anchor]
    anchor_letter = ANCHOR_LETTER[anchor]
    value = 0.0
    components = {}
    for name in ("text", "video", "audio"):
        if name == anchor:
            continue
        other = embs[name]
        letter = ANCHOR_LETTER[name]
        scores = geometry.cosine_matrix(anchor_emb, other)
        logits = scores / tau
        l_fwd, d_fwd = softmax_ce_diag(logits)
        l_bwd, d_bwd = softmax_ce_diag(logits.T)
        components[f"{anchor_letter}2{letter}"] = l_fwd
        components[f"{letter}2{anchor_letter}"] = l_bwd
        value += 0.5 * (l_fwd + l_bwd)
        d_scores = (0.5 / tau) * (d_fwd + d_bwd.T)
        d_anchor, d_other = geometry.cosine_matrix_backward(anchor_emb, other, d_scores)
        grads[anchor] = grads[anchor] + d_anchor
        grads[name] = grads[name] + d_other
    return LossOutput(
        value=value,
        components=components,
        d_text=grads["text"], d_video=grads["video"], d_audio=grads["audio"],
    )


# ---------------------------------------------------------------------------
# Matching (DTM) loss
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy from raw logits; returns (loss, dlogits).

    Computed as y*softplus(-z) + (1-y)*softplus(z), which never evaluates
    log of a saturated sigmoid. dlogits already includes the 1/N factor.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits/labels shape mismatch: {z.shape} vs {y.shape}")
    per_row = y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    loss = float(np.mean(per_row))
    dlogits = (_sigmoid(z) - y) / z.size
    return loss, dlogits


def sample_negative_captions(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """One in-batch caption swap per row: returns j != i for each i."""
    if batch_size < 2:
        raise ValueError("need a batch of >= 2 to sample in-batch negatives")
    offsets = rng.integers(1, batch_size, size=batch_size)
    return (np.arange(batch_size) + offsets) % batch_size


def dtm_loss(text_emb, video_emb, audio_emb, matcher: Mlp,
             negative_rows=None) -> LossOutput:
    """Binary matching loss over positives plus swapped-caption negatives.

    ``negative_rows[i]`` names the caption row paired with data row i as a
    negative; required for batches of >= 2. A singleton batch has no
    negative available, so the loss covers positives only and the output
    carries a warning.
    """
    t, v, a = _check_batch(text_emb, video_emb, audio_emb)
    b, n = t.shape
    if matcher.in_dim != 3 * n:
        raise ValueError(f"matcher expects input dim {matcher.in_dim}, embeddings give {3 * n}")
    warning = None
    if b < 2:
        inputs = np.concatenate([t, v, a], axis=1)
        labels = np.ones(b)
        plan = None
        warning = "batch of size 1: no in-batch negative available, positives only"
    else:
        if negative_rows is None:
            raise ValueError("negative_rows pairing plan is required for batches of >= 2")
        plan = np.asarray(negative_rows, dtype=np.int64)
        if plan.shape != (b,):
            raise ValueError(f"negative_rows must have shape ({b},), got {plan.shape}")
        if np.any(plan < 0) or np.any(plan >= b):
            raise ValueError("negative_rows out of range")
        if np.any(plan == np.arange(b)):
            raise ValueError("negative_rows must differ from their own row")
        inputs = np.concatenate([
            np.concatenate([t, v, a], axis=1),
            np.concatenate([t[plan], v, a], axis=1),
        ], axis=0)
        labels = np.concatenate([np.ones(b), np.zeros(b)])
    out, tape = matcher.forward(inputs)
    loss, dlogits = bce_with_logits(out[:, 0], labels)
    d_inputs, matcher_grads = matcher.backward(tape, dlogits[:, None])
    d_t = d_inputs[:b, :n].copy()
    d_v = d_inputs[:b, n:2 * n].copy()
    d_a = d_inputs[:b, 2 * n:].copy()
    if plan is not None:
        np.add.at(d_t, plan, d_inputs[b:, :n])
        d_v += d_inputs[b:, n:2 * n]
        d_a += d_inputs[b:, 2 * n:]
    return LossOutput(
        value=loss,
        components={"dtm": loss},
        d_text=d_t, d_video=d_v, d_audio=d_a,
        matcher_grads=matcher_grads,
        warning=warning,
    )


def contrastive_loss(text_emb, video_emb, audio_emb, cfg: LossConfig) -> LossOutput:
    """The configured contrastive objective, without the matching term."""
    if cfg.objective is Objective.TRIANGLE:
        return triangle_contrastive(text_emb, video_emb, audio_emb,
                                    tau=cfg.tau, area_eps=cfg.area_eps)
    if cfg.objective is Objective.COSINE_ANCHOR:
        return pairwise_anchor_loss(text_emb, video_emb, audio_emb,
                                    tau=cfg.tau, anchor=cfg.anchor)
    if cfg.objective is Objective.GRAM_VOLUME:
        return gram_contrastive(text_emb, video_emb, audio_emb, tau=cfg.tau)
    return symile_contrastive(text_emb, video_emb, audio_emb, tau=cfg.tau)


def total_loss(text_emb, video_emb, audio_emb, cfg: LossConfig,
               matcher: Mlp | None = None, negative_rows=None) -> LossOutput:
    """Configured contrastive loss plus dtm_weight * matching loss.

    With dtm_weight == 0 the contrastive output is returned as-is (bitwise)
    and the matcher is never touched.
    """
    base = contrastive_loss(text_emb, video_emb, audio_emb, cfg)
    if cfg.dtm_weight == 0.0:
        return base
    if matcher is None:
        raise ValueError("dtm_weight > 0 requires a matcher")
    dtm = dtm_loss(text_emb, video_emb, audio_emb, matcher, negative_rows)
    lam = cfg.dtm_weight
    return LossOutput(
        value=base.value + lam * dtm.value,
        components={**base.components, "contrastive": base.value, "dtm": dtm.value},
        d_text=base.d_text + lam * dtm.d_text,
        d_video=base.d_video + lam * dtm.d_video,
        d_audio=base.d_audio + lam * dtm.d_audio,
        matcher_grads=[(lam * dw, lam * db) for dw, db in dtm.matcher_grads],
        warning=dtm.warning,
    )
