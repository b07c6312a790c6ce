"""Model blocks: a small clip-feature backbone and a transformer contextualizer.

The backbone maps one raw clip-feature window (T x d_in) to a single event
vector. The contextualizer runs bidirectional multi-head self-attention over
a window of event tokens, with learned per-position embeddings added to the
inputs and a learned mask token substituted at masked positions.

Parameters live in flat name->Tensor tables so checkpointing and optimizer
code stay trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


@dataclass
class ContextualizerConfig:
    """Architecture of the event contextualizer."""

    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    seq_len: int = 5
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError(f"n_layers/n_heads must be positive, got {self.n_layers}/{self.n_heads}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2, got {self.seq_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class BackboneConfig:
    """Architecture of the clip-feature encoder."""

    d_in: int = 32
    window: int = 8
    d_hidden: int = 128
    d_model: int = 64

    def __post_init__(self):
        if min(self.d_in, self.window, self.d_hidden, self.d_model) < 1:
            raise ValueError(f"all backbone dims must be positive: {self}")


@dataclass
class ParamSet:
    """A named tensor table plus the config that shaped it."""

    config: object
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def replace(self, arrays: dict[str, np.ndarray]) -> "ParamSet":
        if set(arrays) != set(self.tensors):
            missing = set(self.tensors) ^ set(arrays)
            raise KeyError(f"parameter names do not match, difference: {sorted(missing)}")
        out = {}
        for k, t in self.tensors.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"param {k}: expected {t.shape}, got {arrays[k].shape}")
            out[k] = Tensor(arrays[k].astype(t.dtype), requires_grad=True)
        return ParamSet(config=self.config, tensors=out)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_contextualizer(config: ContextualizerConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Deterministic init: glorot-uniform weights, zero biases, small normal
    position embeddings and mask token, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    t: dict[str, np.ndarray] = {}
    t["pos_embed"] = (rng.normal(0.0, 0.02, size=(config.seq_len, d))).astype(dtype)
    t["mask_token"] = (rng.normal(0.0, 0.02, size=(d,))).astype(dtype)
    t["in_proj.w"] = _glorot(rng, d, d, dtype)
    t["in_proj.b"] = np.zeros(d, dtype=dtype)
    for i in range(config.n_layers):
        p = f"layers.{i}"
        for name in ("wq", "wk", "wv", "wo"):
            t[f"{p}.attn.{name}"] = _glorot(rng, d, d, dtype)
        for name in ("bq", "bk", "bv", "bo"):
            t[f"{p}.attn.{name}"] = np.zeros(d, dtype=dtype)
        t[f"{p}.ln1.g"] = np.ones(d, dtype=dtype)
        t[f"{p}.ln1.b"] = np.zeros(d, dtype=dtype)
        t[f"{p}.ffn.w1"] = _glorot(rng, d, f, dtype)
        t[f"{p}.ffn.b1"] = np.zeros(f, dtype=dtype)
        t[f"{p}.ffn.w2"] = _glorot(rng, f, d, dtype)
        t[f"{p}.ffn.b2"] = np.zeros(d, dtype=dtype)
        t[f"{p}.ln2.g"] = np.ones(d, dtype=dtype)
        t[f"{p}.ln2.b"] = np.zeros(d, dtype=dtype)
    t["out_proj.w"] = _glorot(rng, d, d, dtype)
    t["out_proj.b"] = np.zeros(d, dtype=dtype)
    return ParamSet(config=config, tensors={k: Tensor(v, requires_grad=True) for k, v in t.items()})


def init_backbone(config: BackboneConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng(seed)
    flat = config.window * config.d_in
    t = {
        "enc.w1": _glorot(rng, flat, config.d_hidden, dtype),
        "enc.b1": np.zeros(config.d_hidden, dtype=dtype),
        "enc.w2": _glorot(rng, config.d_hidden, config.d_model, dtype),
        "enc.b2": np.zeros(config.d_model, dtype=dtype),
    }
    return ParamSet(config=config, tensors={k: Tensor(v, requires_grad=True) for k, v in t.items()})


def backbone_encode(clip: Tensor, params: ParamSet) -> Tensor:
    """Encode clip windows into event vectors.

    Accepts a single (T x d_in) window or a stack (B x T x d_in); returns
    (d_model,) or (B x d_model) accordingly.
    """
    cfg: BackboneConfig = params.config
    single = clip.ndim == 2
    if clip.shape[-2] != cfg.window or clip.shape[-1] != cfg.d_in:
        raise ShapeError(f"backbone expects (..., {cfg.window}, {cfg.d_in}), got {clip.shape}")
    batch = 1 if single else clip.shape[0]
    x = ag.reshape(clip, (batch, cfg.window * cfg.d_in))
    h = ag.relu(ag.matmul(x, params["enc.w1"]) + params["enc.b1"])
    out = ag.matmul(h, params["enc.w2"]) + params["enc.b2"]
    if single:
        out = ag.reshape(out, (cfg.d_model,))
    return out


def mhsa_forward(x: Tensor, layer: dict[str, Tensor], n_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention with a residual add.

    `x` is (N x d_model) or (B x N x d_model); attention is bidirectional.
    `layer` maps {wq,wk,wv,wo,bq,bk,bv,bo} to tensors.
    """
    d_model = x.shape[-1]
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
    if layer["wq"].shape != (d_model, d_model):
        raise ShapeError(f"attention weights {layer['wq'].shape} do not match input {x.shape}")
    d_head = d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)

    q = ag.matmul(x, layer["wq"]) + layer["bq"]
    k = ag.matmul(x, layer["wk"]) + layer["bk"]
    v = ag.matmul(x, layer["wv"]) + layer["bv"]

    heads = []
    for h in range(n_heads):
        qh = ag.narrow(q, -1, h * d_head, d_head)
        kh = ag.narrow(k, -1, h * d_head, d_head)
        vh = ag.narrow(v, -1, h * d_head, d_head)
        scores = ag.matmul(qh, ag.transpose(kh)) * scale
        weights = ag.softmax(scores, axis=-1)
        heads.append(ag.matmul(weights, vh))
    merged = heads[0] if n_heads == 1 else ag.concat(heads, axis=-1)
    return x + (ag.matmul(merged, layer["wo"]) + layer["bo"])


def attention_weights(x: Tensor, layer: dict[str, Tensor], n_heads: int) -> np.ndarray:
    """Per-head attention matrices, (n_heads x ... x N x N). Inference only."""
    d_model = x.shape[-1]
    d_head = d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)
    q = ag.matmul(x, layer["wq"]) + layer["bq"]
    k = ag.matmul(x, layer["wk"]) + layer["bk"]
    out = []
    for h in range(n_heads):
        qh = ag.narrow(q, -1, h * d_head, d_head)
        kh = ag.narrow(k, -1, h * d_head, d_head)
        out.append(ag.softmax(ag.matmul(qh, ag.transpose(kh)) * scale, axis=-1).data)
    return np.stack(out)


def _layer_params(params: ParamSet, i: int) -> dict[str, Tensor]:
    p = f"layers.{i}.attn"
    return {name: params[f"{p}.{name}"] for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}


def _apply_mask(tokens: Tensor, mask_token: Tensor, masked_rows: np.ndarray) -> Tensor:
    """Replace the given rows of (..., N, d) tokens with the mask token.

    Uses multiply-by-zero plus an indicator outer product, so the output is
    bitwise independent of the original content at masked rows and the mask
    token still receives gradients.
    """
    n = tokens.shape[-2]
    keep = np.ones((n, 1), dtype=tokens.data.dtype)
    keep[masked_rows] = 0.0
    indicator = 1.0 - keep
    masked = tokens * Tensor(keep) + ag.matmul(Tensor(indicator), ag.reshape(mask_token, (1, -1)))
    return masked


def contextualize(
    tokens: Tensor,
    params: ParamSet,
    mask_plan=None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the contextualizer over one (N x d_model) window or a (B x N x d_model) batch.

    If `mask_plan` is given, its positions are replaced by the learned mask
    token before position embeddings are added, so the model sees where the
    mask is but nothing of what was there. With a batch, `mask_plan` may be a
    single plan (shared) or a list of per-window plans. Self-attention is
    bidirectional. `dropout_rng` enables dropout at the configured rate;
    leave it None for deterministic inference.
    """
    cfg: ContextualizerConfig = params.config
    single = tokens.ndim == 2
    if tokens.shape[-2] != cfg.seq_len or tokens.shape[-1] != cfg.d_model:
        raise ShapeError(
            f"contextualizer expects (..., {cfg.seq_len}, {cfg.d_model}), got {tokens.shape}"
        )

    x = tokens
    if mask_plan is not None:
        plans = [mask_plan] if not isinstance(mask_plan, (list, tuple)) else list(mask_plan)
        for plan in plans:
            plan.validate(cfg.seq_len)
        if single or len(plans) == 1:
            x = _apply_mask(x, params["mask_token"], plans[0].index_array())
        else:
            if len(plans) != tokens.shape[0]:
                raise ShapeError(f"{len(plans)} mask plans for batch of {tokens.shape[0]}")
            keep = np.ones((len(plans), cfg.seq_len, 1), dtype=tokens.data.dtype)
            for b, plan in enumerate(plans):
                keep[b, plan.index_array()] = 0.0
            indicator = 1.0 - keep
            x = x * Tensor(keep) + Tensor(indicator) * ag.reshape(params["mask_token"], (1, 1, -1))

    x = ag.matmul(x, params["in_proj.w"]) + params["in_proj.b"]
    x = x + params["pos_embed"]
    use_dropout = dropout_rng is not None and cfg.dropout > 0.0
    for i in range(cfg.n_layers):
        x = mhsa_forward(x, _layer_params(params, i), cfg.n_heads)
        if use_dropout:
            x = ag.dropout(x, cfg.dropout, dropout_rng)
        x = ag.layer_norm(x, params[f"layers.{i}.ln1.g"], params[f"layers.{i}.ln1.b"])
        h = ag.relu(ag.matmul(x, params[f"layers.{i}.ffn.w1"]) + params[f"layers.{i}.ffn.b1"])
        if use_dropout:
            h = ag.dropout(h, cfg.dropout, dropout_rng)
        x = x + (ag.matmul(h, params[f"layers.{i}.ffn.w2"]) + params[f"layers.{i}.ffn.b2"])
        x = ag.layer_norm(x, params[f"layers.{i}.ln2.g"], params[f"layers.{i}.ln2.b"])
    return ag.matmul(x, params["out_proj.w"]) + params["out_proj.b"]
