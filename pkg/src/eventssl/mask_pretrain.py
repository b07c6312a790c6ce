"""Mask-prediction pretraining of the contextualizer.

Contiguous spans of event tokens are replaced by the learned mask token and
the model is trained to reproduce the masked tokens from context, either by
discriminating each target against a FIFO queue of past targets with a
temperature-scaled softmax, or by a plain squared-distance loss. Span
positions come from a uniform sampler or from a max-discrepancy sampler
that prefers tokens whose removal changes the output most.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import ContextualizerConfig, ParamSet, backbone_encode, contextualize, init_contextualizer
from .optim import MomentumSGD, TrainingDiverged

UNIT_NORM_TOL = 1e-3

SAMPLERS = ("uniform", "max_discrepancy")
LOSSES = ("contrastive", "l2")


@dataclass(frozen=True)
class MaskPlan:
    """A contiguous mask of `size` tokens starting at 1-based position `start`."""

    size: int
    start: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"mask size must be >= 1, got {self.size}")
        if self.start < 1:
            raise ValueError(f"mask start is 1-based and must be >= 1, got {self.start}")

    @property
    def masked_positions(self) -> tuple[int, ...]:
        """1-based masked positions."""
        return tuple(range(self.start, self.start + self.size))

    def index_array(self) -> np.ndarray:
        """0-based indices into the token window."""
        return np.arange(self.start - 1, self.start - 1 + self.size)

    def validate(self, seq_len: int) -> None:
        if self.start + self.size - 1 > seq_len:
            raise ValueError(f"mask {self} does not fit a window of {seq_len} tokens")


@dataclass
class MaskPretrainConfig:
    max_mask_ratio: float = 0.6
    temperature: float = 0.1
    queue_capacity: int = 512
    sampler: str = "uniform"
    loss: str = "contrastive"
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.max_mask_ratio <= 1.0:
            raise ValueError(f"max_mask_ratio must be in (0, 1], got {self.max_mask_ratio}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.queue_capacity < 0:
            raise ValueError(f"queue_capacity must be >= 0, got {self.queue_capacity}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError(f"bad steps/batch_size: {self.steps}/{self.batch_size}")


class DistractorQueue:
    """Bounded FIFO of unit-norm target vectors used as negatives.

    Pushed vectors must already be unit norm (within 1e-3); they are
    re-normalized in float64 before storage so every held vector is unit
    within 1e-6 regardless of input dtype. Push order is preserved and
    eviction is strictly first-in-first-out.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError(f"queue capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self._buf: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, targets) -> None:
        if isinstance(targets, np.ndarray) and targets.ndim == 2:
            targets = list(targets)
        for vec in targets:
            arr = np.asarray(vec.data if isinstance(vec, Tensor) else vec, dtype=np.float64)
            norm = float(np.linalg.norm(arr))
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                raise ValueError(f"queue_push expects unit-norm vectors, got norm {norm:.6f}")
            if self.capacity > 0:
                self._buf.append(arr / norm)

    def as_matrix(self) -> np.ndarray | None:
        if not self._buf:
            return None
        return np.stack(self._buf)

    def snapshot(self) -> list[np.ndarray]:
        return [v.copy() for v in self._buf]


def sample_mask_uniform(seq_len: int, max_mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Size uniform over {1..max(1, floor(ratio * seq_len))}, then start
    uniform over the positions where the span fits."""
    if seq_len < 2:
        raise ValueError(f"need at least 2 tokens to mask, got {seq_len}")
    if max_mask_ratio <= 0.0:
        raise ValueError(f"max_mask_ratio must be positive, got {max_mask_ratio}")
    biggest = max(1, math.floor(max_mask_ratio * seq_len))
    size = int(rng.integers(1, biggest + 1))
    start = int(rng.integers(1, seq_len - size + 2))
    return MaskPlan(size=size, start=start)


def discrepancy(tokens: Tensor, params: ParamSet, position: int) -> float:
    """How much masking one token changes the output at that token.

    Computes 1 - cos between the unmasked output and the output with only
    `position` (1-based) masked, both L2-normalized in float64. Zero means
    masking that token changed nothing.
    """
    seq_len = params.config.seq_len
    if not 1 <= position <= seq_len:
        raise ValueError(f"position must be in [1, {seq_len}], got {position}")
    plain = contextualize(tokens, params).data[position - 1].astype(np.float64)
    masked = contextualize(tokens, params, MaskPlan(1, position)).data[position - 1].astype(np.float64)
    plain /= np.linalg.norm(plain)
    masked /= np.linalg.norm(masked)
    return float(1.0 - plain @ masked)


def all_discrepancies(tokens: Tensor, params: ParamSet) -> np.ndarray:
    """Per-position discrepancies for one (N x d_model) window."""
    seq_len = params.config.seq_len
    plain = contextualize(tokens, params).data.astype(np.float64)
    plain /= np.linalg.norm(plain, axis=1, keepdims=True)
    out = np.zeros(seq_len)
    for i in range(seq_len):
        masked = contextualize(tokens, params, MaskPlan(1, i + 1)).data[i].astype(np.float64)
        masked /= np.linalg.norm(masked)
        out[i] = 1.0 - plain[i] @ masked
    return out


def batch_discrepancies(tokens: Tensor, params: ParamSet) -> np.ndarray:
    """Per-position discrepancies for a (B x N x d_model) batch, shape (B, N)."""
    seq_len = params.config.seq_len
    plain = contextualize(tokens, params).data.astype(np.float64)
    plain /= np.linalg.norm(plain, axis=-1, keepdims=True)
    out = np.zeros((tokens.shape[0], seq_len))
    for i in range(seq_len):
        masked = contextualize(tokens, params, MaskPlan(1, i + 1)).data[:, i].astype(np.float64)
        masked /= np.linalg.norm(masked, axis=-1, keepdims=True)
        out[:, i] = 1.0 - np.einsum("bd,bd->b", plain[:, i], masked)
    return out


def best_mask_start(discrepancies: np.ndarray, size: int) -> int:
    """1-based start of the size-length window with the largest discrepancy
    sum. Ties break toward the smallest start."""
    disc = np.asarray(discrepancies, dtype=np.float64)
    n = disc.shape[0]
    if not 1 <= size <= n:
        raise ValueError(f"window size {size} does not fit {n} positions")
    sums = np.array([disc[s : s + size].sum() for s in range(n - size + 1)])
    return int(np.argmax(sums)) + 1


def sample_mask_max_discrepancy(
    tokens: Tensor, params: ParamSet, max_mask_ratio: float, rng: np.random.Generator
) -> MaskPlan:
    """Mask size sampled as in the uniform sampler; start placed on the
    window whose summed per-token discrepancy is largest."""
    seq_len = params.config.seq_len
    if tokens.shape[-2] != seq_len:
        raise ShapeError(f"tokens have {tokens.shape[-2]} positions, config says {seq_len}")
    if max_mask_ratio <= 0.0:
        raise ValueError(f"max_mask_ratio must be positive, got {max_mask_ratio}")
    biggest = max(1, math.floor(max_mask_ratio * seq_len))
    size = int(rng.integers(1, biggest + 1))
    disc = all_discrepancies(tokens, params)
    return MaskPlan(size=size, start=best_mask_start(disc, size))


def _stack_unit_rows(vectors, what: str) -> Tensor:
    """Stack a list of (d,) tensors (or one (M, d) tensor) into (M, d),
    checking every row is unit norm within the loss tolerance."""
    if isinstance(vectors, Tensor):
        mat = vectors if vectors.ndim == 2 else ag.reshape(vectors, (1, -1))
    else:
        vectors = list(vectors)
        if not vectors:
            raise ShapeError(f"no {what} vectors given")
        mat = ag.concat([ag.reshape(v, (1, -1)) for v in vectors], axis=0)
    norms = np.linalg.norm(mat.data.astype(np.float64), axis=1)
    bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(f"{what}[{i}] is not unit norm: {norms[i]:.6f}")
    return mat


def mask_prediction_loss(
    predicted, targets, queue: DistractorQueue, temperature: float
) -> Tensor:
    """Mean over masked positions of the temperature-scaled discrimination
    loss: each predicted token must identify its target against the queue.

    Inputs are unit-norm vectors, one predicted/target pair per masked
    position; differentiable with respect to both sides. With an empty
    queue the loss is exactly -log(1) = 0 at perfect alignment.
    """
    pred = _stack_unit_rows(predicted, "predicted")
    targ = _stack_unit_rows(targets, "target")
    if pred.shape != targ.shape:
        raise ShapeError(f"predicted {pred.shape} and target {targ.shape} counts differ")
    pos = ag.tsum(ag.mul(pred, targ), axis=1) * (1.0 / temperature)
    pos_col = ag.reshape(pos, (-1, 1))
    negatives = queue.as_matrix()
    if negatives is None:
        logits = pos_col
    else:
        neg = ag.matmul(pred, Tensor(np.ascontiguousarray(negatives.T), dtype=pred.dtype)) * (
            1.0 / temperature
        )
        logits = ag.concat([pos_col, neg], axis=1)
    return ag.tmean(ag.logsumexp(logits, axis=1) - pos)


def mask_prediction_l2_loss(predicted, targets) -> Tensor:
    """Mean squared Euclidean distance over masked positions."""
    pred = _stack_unit_rows(predicted, "predicted")
    targ = _stack_unit_rows(targets, "target")
    if pred.shape != targ.shape:
        raise ShapeError(f"predicted {pred.shape} and target {targ.shape} counts differ")
    diff = pred - targ
    return ag.tmean(ag.tsum(ag.mul(diff, diff), axis=1))


def encode_corpus_events(corpus, backbone: ParamSet) -> np.ndarray:
    """Unit-norm backbone vectors for every event in the corpus, in global
    event order. The backbone is frozen here, so this is pure inference."""
    clips = corpus.all_clips()
    out = backbone_encode(Tensor(clips), backbone).data
    norms = np.linalg.norm(out.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("backbone produced a zero event vector; cannot normalize targets")
    return (out / norms).astype(out.dtype)


def pretrain_contextualizer(
    corpus,
    backbone: ParamSet,
    config: MaskPretrainConfig,
    ctx_config: ContextualizerConfig,
    sink=None,
) -> tuple[ParamSet, list[dict]]:
    """Train the contextualizer with mask prediction over corpus windows.

    The backbone stays frozen and targets are constants, so only the
    contextualizer learns. The distractor queue receives each step's
    targets after the loss is computed, never before. Deterministic for a
    fixed config and seed.
    """
    seq_len = ctx_config.seq_len
    window_starts = corpus.window_starts(seq_len)
    if len(window_starts) == 0:
        raise ValueError(f"corpus has no windows of {seq_len} events")

    rng = np.random.default_rng(config.seed)
    params = init_contextualizer(ctx_config, seed=config.seed)
    tokens_table = encode_corpus_events(corpus, backbone)
    queue = DistractorQueue(config.queue_capacity)
    optimizer = MomentumSGD(config.learning_rate, config.momentum)
    metrics: list[dict] = []

    for step in range(config.steps):
        starts = rng.choice(window_starts, size=config.batch_size, replace=True)
        batch = np.stack([tokens_table[s : s + seq_len] for s in starts])
        batch_tokens = Tensor(batch)

        if config.sampler == "uniform":
            plans = [sample_mask_uniform(seq_len, config.max_mask_ratio, rng) for _ in starts]
        else:
            disc = batch_discrepancies(batch_tokens, params)
            plans = []
            biggest = max(1, math.floor(config.max_mask_ratio * seq_len))
            for b in range(len(starts)):
                size = int(rng.integers(1, biggest + 1))
                plans.append(MaskPlan(size=size, start=best_mask_start(disc[b], size)))

        flat_masked = np.concatenate(
            [b * seq_len + plan.index_array() for b, plan in enumerate(plans)]
        )
        target_rows = np.concatenate([starts[b] + plans[b].index_array() for b in range(len(plans))])
        targets = Tensor(tokens_table[target_rows])

        with ag.Tape() as tape:
            out = contextualize(batch_tokens, params, plans)
            flat = ag.reshape(out, (len(plans) * seq_len, ctx_config.d_model))
            predicted = ag.l2_normalize(ag.take_rows(flat, flat_masked), axis=1)
            if config.loss == "contrastive":
                loss = mask_prediction_loss(predicted, targets, queue, config.temperature)
            else:
                loss = mask_prediction_l2_loss(predicted, targets)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(f"mask pretraining diverged at step {step}: loss={loss_value}")
        grads = ag.backward(loss, tape)
        params = optimizer.step(params, grads)
        queue.push(tokens_table[target_rows])

        sizes = [plan.size for plan in plans]
        record = {
            "step": step,
            "loss": loss_value,
            "queue_fill": len(queue),
            "mask_size_hist": {str(s): sizes.count(s) for s in sorted(set(sizes))},
        }
        metrics.append(record)
        if sink is not None:
            sink(record)

    return params, metrics
