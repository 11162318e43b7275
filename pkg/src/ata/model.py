"""Temporal-modeling variants assembled into a small video classifier.

Block order is temporal op -> spatial attention -> MLP with pre-norm
residuals. Classification uses global mean pooling over all tokens (no
class token). For the aligned variant, permutations are recomputed each
forward pass from the current detached features; gradients never flow
into the matching itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .alignment import FeatureVolume, compute_alignment_maps
from .numerics import Tensor

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "TrainConfig",
    "FlopCount",
    "init_params",
    "patch_embed",
    "temporal_attention",
    "spatial_attention",
    "joint_attention",
    "averaging_temporal",
    "ata_block_temporal",
    "forward_classifier",
    "train",
    "count_flops",
]

VARIANTS = ("averaging", "temporal", "joint", "ata")

_JOINT_TOKEN_LIMIT = 16384


@dataclass
class ModelConfig:
    t_len: int
    h: int
    w: int
    c_in: int
    d: int = 64
    heads: int = 4
    depth: int = 2
    variant: str = "ata"
    classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def n_patches(self):
        return self.h * self.w


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 10
    batch: int = 16
    seed: int = 0
    momentum: float = 0.9


def _weight(rng, shape):
    # fan-in scaling keeps activation magnitude roughly constant at the
    # small widths used here; a fixed tiny scale stalls optimization
    fan_in = shape[0]
    return Tensor(rng.normal(scale=fan_in ** -0.5, size=shape), requires_grad=True)


def _ln_pair(params, name, d):
    params[name + ".gamma"] = Tensor(np.ones(d), requires_grad=True)
    params[name + ".beta"] = Tensor(np.zeros(d), requires_grad=True)


def _attn_params(params, rng, prefix, d):
    _ln_pair(params, prefix + ".ln", d)
    for nme in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{nme}"] = _weight(rng, (d, d))
    params[prefix + ".bo"] = Tensor(np.zeros(d), requires_grad=True)


def init_params(config):
    rng = np.random.default_rng(config.seed)
    d = config.d
    params = {}
    params["embed.w"] = _weight(rng, (config.c_in, d))
    params["embed.b"] = Tensor(np.zeros(d), requires_grad=True)
    # positional embeddings start at token scale so position-dependent
    # structure is visible to attention from the first step
    params["pos_spatial"] = Tensor(rng.normal(size=(config.n_patches, d)), requires_grad=True)
    params["pos_temporal"] = Tensor(rng.normal(size=(config.t_len, d)), requires_grad=True)
    for i in range(config.depth):
        blk = f"block{i}"
        if config.variant in ("temporal", "ata"):
            _attn_params(params, rng, blk + ".t", d)
        elif config.variant == "joint":
            _attn_params(params, rng, blk + ".j", d)
        _attn_params(params, rng, blk + ".s", d)
        _ln_pair(params, blk + ".m.ln", d)
        params[blk + ".m.w1"] = _weight(rng, (d, 4 * d))
        params[blk + ".m.b1"] = Tensor(np.zeros(4 * d), requires_grad=True)
        params[blk + ".m.w2"] = _weight(rng, (4 * d, d))
        params[blk + ".m.b2"] = Tensor(np.zeros(d), requires_grad=True)
    _ln_pair(params, "final.ln", d)
    params["head.w"] = _weight(rng, (d, config.classes))
    params["head.b"] = Tensor(np.zeros(config.classes), requires_grad=True)
    return params


def patch_embed(clip, params, config):
    """[T, H, W, c_in] -> [T, HW, d] tokens with separable positions added."""
    if isinstance(clip, FeatureVolume):
        values = clip.values
    else:
        values = np.asarray(clip, dtype=np.float64)
    t, h, w, c = values.shape
    if (t, h, w, c) != (config.t_len, config.h, config.w, config.c_in):
        raise ValueError(f"patch_embed: clip shape {values.shape} does not match config")
    x = Tensor(values.reshape(t, h * w, c))
    x = nm.matmul(x, params["embed.w"])
    x = nm.add_bias(x, params["embed.b"])
    x = nm.add_broadcast(x, params["pos_spatial"], axis=0)
    x = nm.add_broadcast(x, params["pos_temporal"], axis=1)
    return x


def _mha(x, params, prefix, heads):
    """Multi-head scaled dot-product attention over the middle axis of [B, n, d]."""
    b, n, d = x.shape
    dh = d // heads
    q = nm.matmul(x, params[prefix + ".wq"])
    k = nm.matmul(x, params[prefix + ".wk"])
    v = nm.matmul(x, params[prefix + ".wv"])
    split = lambda z: nm.transpose(nm.reshape(z, (b, n, heads, dh)), (0, 2, 1, 3))
    out = nm.sdp_attention(split(q), split(k), split(v))
    out = nm.reshape(nm.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return nm.add_bias(nm.matmul(out, params[prefix + ".wo"]), params[prefix + ".bo"])


def _prenorm(x, params, prefix):
    return nm.layer_norm(x, params[prefix + ".ln.gamma"], params[prefix + ".ln.beta"])


def temporal_attention(x, params, prefix, heads):
    """Attention across the T tokens at each spatial location; pre-norm, residual."""
    y = _prenorm(x, params, prefix)
    y = nm.transpose(y, (1, 0, 2))  # [HW, T, d]
    a = _mha(y, params, prefix, heads)
    return nm.add(x, nm.transpose(a, (1, 0, 2)))


def spatial_attention(x, params, prefix, heads):
    """Per-frame attention over the HW tokens; pre-norm, residual."""
    y = _prenorm(x, params, prefix)
    return nm.add(x, _mha(y, params, prefix, heads))


def joint_attention(x, params, prefix, heads):
    """Attention over all T*HW tokens jointly; pre-norm, residual."""
    t, n, d = x.shape
    if t * n > _JOINT_TOKEN_LIMIT:
        raise ValueError(f"joint_attention: {t * n} tokens exceed limit {_JOINT_TOKEN_LIMIT}")
    y = _prenorm(x, params, prefix)
    a = _mha(nm.reshape(y, (1, t * n, d)), params, prefix, heads)
    return nm.add(x, nm.reshape(a, (t, n, d)))


def averaging_temporal(x):
    """Replace every frame by the temporal mean at each location."""
    return nm.expand_axis(nm.mean_axis(x, 0), 0, x.shape[0])


def _inverse_maps(maps):
    t, n = maps.shape
    inv = np.empty_like(maps)
    inv[np.arange(t)[:, None], maps] = np.arange(n)[None, :]
    return inv


def ata_block_temporal(x, params, prefix, heads, frozen_maps=None, temporal_op=None):
    """Alignment, temporal attention on the aligned route, de-alignment.

    Permutations are solved on the detached current features unless
    `frozen_maps` pins them (gradient-check hook). `temporal_op`
    replaces the attention stage in structure tests.
    """
    maps = compute_alignment_maps(x.data) if frozen_maps is None else np.asarray(frozen_maps)
    aligned = nm.gather_tokens(x, maps)
    if temporal_op is None:
        out = temporal_attention(aligned, params, prefix, heads)
    else:
        out = temporal_op(aligned)
    return nm.gather_tokens(out, _inverse_maps(maps))


def _mlp(x, params, blk):
    y = _prenorm(x, params, blk + ".m")
    y = nm.gelu(nm.add_bias(nm.matmul(y, params[blk + ".m.w1"]), params[blk + ".m.b1"]))
    y = nm.add_bias(nm.matmul(y, params[blk + ".m.w2"]), params[blk + ".m.b2"])
    return nm.add(x, y)


def forward_classifier(clip, params, config, frozen_plans=None, capture_plans=None):
    """Logits [classes] for one clip; deterministic given inputs.

    `frozen_plans`, when given, is one gather-map array per block for the
    aligned variant; `capture_plans` collects the maps actually used.
    """
    x = patch_embed(clip, params, config)
    for i in range(config.depth):
        blk = f"block{i}"
        if config.variant == "averaging":
            x = averaging_temporal(x)
        elif config.variant == "temporal":
            x = temporal_attention(x, params, blk + ".t", config.heads)
        elif config.variant == "joint":
            x = joint_attention(x, params, blk + ".j", config.heads)
        else:
            maps = None if frozen_plans is None else frozen_plans[i]
            if maps is None:
                maps = compute_alignment_maps(x.data)
            if capture_plans is not None:
                capture_plans.append(maps)
            x = ata_block_temporal(x, params, blk + ".t", config.heads, frozen_maps=maps)
        x = spatial_attention(x, params, blk + ".s", config.heads)
        x = _mlp(x, params, blk)
    y = nm.layer_norm(x, params["final.ln.gamma"], params["final.ln.beta"])
    pooled = nm.mean_axis(nm.reshape(y, (config.t_len * config.n_patches, config.d)), 0)
    logits = nm.add_bias(nm.matmul(nm.reshape(pooled, (1, config.d)), params["head.w"]),
                         params["head.b"])
    return nm.reshape(logits, (config.classes,))


def _accuracy(logits_list, labels):
    hits = sum(1 for lg, lab in zip(logits_list, labels) if int(np.argmax(lg)) == lab)
    return hits / len(labels)


def train(dataset, config, hyper):
    """SGD with momentum on cross-entropy; returns per-epoch metrics."""
    train_clips = dataset.train
    val_clips = dataset.val
    if not train_clips:
        raise ValueError("train: empty dataset")
    params = init_params(config)
    names = sorted(params)
    velocity = {k: np.zeros(params[k].shape) for k in names}
    rng = np.random.default_rng(hyper.seed)
    metrics = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train_clips))
        losses = []
        train_logits = []
        train_labels = []
        for start in range(0, len(order), hyper.batch):
            idxs = order[start:start + hyper.batch]
            for k in names:
                params[k].zero_grad()
            for i in idxs:
                clip = train_clips[i]
                logits = forward_classifier(clip.volume, params, config)
                loss = nm.cross_entropy_logits(logits, [clip.label])
                nm.backward(nm.scale(loss, 1.0 / len(idxs)))
                losses.append(loss.item())
                train_logits.append(logits.data.copy())
                train_labels.append(clip.label)
            for k in names:
                g = params[k].grad
                if g is None:
                    continue
                velocity[k] = hyper.momentum * velocity[k] + g
                params[k].data -= hyper.lr * velocity[k]
        val_acc = evaluate(val_clips, params, config) if val_clips else float("nan")
        metrics.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": _accuracy(train_logits, train_labels),
            "val_acc": val_acc,
        })
    return params, metrics


def evaluate(clips, params, config):
    logits = [forward_classifier(c.volume, params, config).data for c in clips]
    return _accuracy(logits, [c.label for c in clips])


@dataclass
class FlopCount:
    """Multiply-accumulate counts per encoder block.

    `attention` covers q·kᵀ scores and attention-weighted value sums of
    every attention sublayer; `projections` covers the q/k/v/out linear
    maps; `assignment` is the matching cost in T*(HW)^3 units, kept
    separate because it adds no attention-path MACs.
    """

    attention: int
    projections: int
    assignment: int


def count_flops(config, variant=None):
    variant = variant or config.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    t, n, d = config.t_len, config.n_patches, config.d
    spatial_attn = 2 * t * n * n * d
    temporal_attn = 2 * n * t * t * d
    joint_attn = 2 * (t * n) ** 2 * d
    proj_one = 4 * t * n * d * d  # q, k, v, out for one attention sublayer
    if variant == "averaging":
        return FlopCount(spatial_attn, proj_one, 0)
    if variant == "temporal":
        return FlopCount(spatial_attn + temporal_attn, 2 * proj_one, 0)
    if variant == "joint":
        return FlopCount(spatial_attn + joint_attn, 2 * proj_one, 0)
    return FlopCount(spatial_attn + temporal_attn, 2 * proj_one, t * n ** 3)
