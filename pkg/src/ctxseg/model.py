"""Text-gated U-Net and its text-free baseline.

The encoder is a standard double-conv stack with max-pool downsampling. On
the way up, each level's upsampled features are gated by single-head
cross-attention against the report's token embeddings: every pixel row
attends over the tokens, the token-value mix is squashed through tanh, and
the result multiplies the pixel features elementwise before the encoder skip
is concatenated. The baseline swaps the gate for identity and shares every
other parameter shape, so ablation deltas isolate the attention path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DiffTensor
from .errors import ShapeError
from .textenc import ReportEmbedding
from .util import fnv1a_str, rng_from


@dataclass
class ModelConfig:
    image_size: int = 64
    depth: int = 3
    channels: list = field(default_factory=lambda: [8, 16, 32])
    bottleneck: int = 64
    d_e: int = 32
    max_tokens: int = 32
    attend_padding: bool = True
    init_seed: int = 0
    embed_seed: int = 7001

    def __post_init__(self):
        if len(self.channels) != self.depth:
            raise ValueError(
                f"channels has {len(self.channels)} entries for depth {self.depth}")
        ladder = list(self.channels) + [self.bottleneck]
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError(f"channel ladder must be strictly increasing: {ladder}")
        if self.image_size % (2 ** self.depth):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.depth}")
        if self.d_e < 1 or self.max_tokens < 1:
            raise ValueError("d_e and max_tokens must be at least 1")

    def level_channels(self, i: int) -> int:
        """Channel count at level i, where level depth+1 is the bottleneck."""
        return self.bottleneck if i == self.depth + 1 else self.channels[i - 1]


@dataclass
class CrossAttnParams:
    tproj_w: DiffTensor
    tproj_b: DiffTensor
    wq_w: DiffTensor
    wq_b: DiffTensor
    wk_w: DiffTensor
    wk_b: DiffTensor
    wv_w: DiffTensor
    wv_b: DiffTensor

    @classmethod
    def from_weights(cls, weights: dict, level: int) -> "CrossAttnParams":
        p = f"xattn{level}"
        return cls(*(weights[f"{p}.{part}.{wb}"]
                     for part in ("tproj", "wq", "wk", "wv")
                     for wb in ("w", "b")))


# ---------------------------------------------------------------------------
# initialization

def _kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_weights(cfg: ModelConfig, with_attention: bool = True) -> dict:
    """Deterministic weights keyed per tensor name, so the two model variants
    share identical values for every name they have in common."""
    w: dict = {}

    def draw(name, shape, fan_in):
        rng = rng_from(cfg.init_seed, fnv1a_str(name))
        w[name] = DiffTensor(_kaiming_uniform(rng, shape, fan_in), requires_grad=True)

    def zeros(name, shape, trainable=True):
        w[name] = DiffTensor(np.zeros(shape), requires_grad=trainable)

    def _bn(prefix, c):
        w[prefix + ".gamma"] = DiffTensor(np.ones(c), requires_grad=True)
        zeros(prefix + ".beta", (c,))
        zeros(prefix + ".mean", (c,), trainable=False)
        w[prefix + ".var"] = DiffTensor(np.ones(c), requires_grad=False)

    def conv_block(prefix, cin, cout):
        draw(f"{prefix}.conv1.w", (cout, cin, 3, 3), cin * 9)
        zeros(f"{prefix}.conv1.b", (cout,))
        _bn(f"{prefix}.bn1", cout)
        draw(f"{prefix}.conv2.w", (cout, cout, 3, 3), cout * 9)
        zeros(f"{prefix}.conv2.b", (cout,))
        _bn(f"{prefix}.bn2", cout)

    d = cfg.depth
    cin = 1
    for i in range(1, d + 2):
        cout = cfg.level_channels(i)
        conv_block(f"enc{i}", cin, cout)
        cin = cout
    for i in range(d, 0, -1):
        c = cfg.channels[i - 1]
        c_above = cfg.level_channels(i + 1)
        draw(f"up{i}.w", (c_above, c, 2, 2), c_above * 4)
        zeros(f"up{i}.b", (c,))
        if with_attention:
            draw(f"xattn{i}.tproj.w", (cfg.d_e, c), cfg.d_e)
            zeros(f"xattn{i}.tproj.b", (c,))
            for part in ("wq", "wk", "wv"):
                draw(f"xattn{i}.{part}.w", (c, c), c)
                zeros(f"xattn{i}.{part}.b", (c,))
        conv_block(f"dec{i}", 2 * c, c)
    draw("head.w", (1, cfg.channels[0], 1, 1), cfg.channels[0])
    zeros("head.b", (1,))
    return w


def param_count(weights: dict) -> int:
    return sum(p.data.size for p in weights.values() if p.requires_grad)


# ---------------------------------------------------------------------------
# forward passes

def _double_conv(x, weights, prefix, train):
    for j in (1, 2):
        x = dc.conv2d(x, weights[f"{prefix}.conv{j}.w"],
                      weights[f"{prefix}.conv{j}.b"], stride=1, padding=1)
        x = dc.batchnorm2d(x, weights[f"{prefix}.bn{j}.gamma"],
                           weights[f"{prefix}.bn{j}.beta"],
                           weights[f"{prefix}.bn{j}.mean"],
                           weights[f"{prefix}.bn{j}.var"], train=train)
        x = dc.relu(x)
    return x


def encoder_layer(x, weights, prefix, train=False):
    """Two (conv3x3 -> batchnorm -> relu) sublayers; spatial size preserved."""
    return _double_conv(x, weights, prefix, train)


def cross_attention(q_feat: DiffTensor, embs, params: CrossAttnParams,
                    attend_padding: bool = True, capture: dict | None = None
                    ) -> DiffTensor:
    """Gate pixel features by attention over report tokens.

    For each batch item with features Q (c,h,w) and token matrix E (l,d_e):
    the tokens are projected to K = V in R^{l x c}, every flattened pixel row
    attends over them (scaled dot product, softmax across the l tokens), and
    the value mix passes through tanh before multiplying Q elementwise. With
    attend_padding off, positions past valid_len are masked out pre-softmax
    (position 0 always stays attendable so all-pad reports remain defined).
    """
    n, c, h, w = q_feat.data.shape
    if isinstance(embs, ReportEmbedding):
        embs = [embs] * n
    if len(embs) != n:
        raise ShapeError(f"{len(embs)} embeddings for batch of {n}")
    l, d_e = embs[0].matrix.shape
    if l == 0:
        raise ShapeError("cross_attention needs at least one token position")
    if params.tproj_w.data.shape != (d_e, c):
        raise ShapeError(
            f"text projection is {params.tproj_w.data.shape}, needs ({d_e}, {c})")

    inv_sqrt_c = 1.0 / math.sqrt(c)
    items = []
    for i in range(n):
        q = dc.batch_item(q_feat, i)                      # (c, h, w)
        qbar = dc.transpose2(dc.reshape(q, (c, h * w)))   # (h*w, c)
        e = DiffTensor(embs[i].matrix)                    # frozen: no grad path
        k = dc.add_rowvec(dc.matmul(e, params.tproj_w), params.tproj_b)
        qp = dc.add_rowvec(dc.matmul(qbar, params.wq_w), params.wq_b)
        kp = dc.add_rowvec(dc.matmul(k, params.wk_w), params.wk_b)
        vp = dc.add_rowvec(dc.matmul(k, params.wv_w), params.wv_b)
        logits = dc.scale(dc.matmul(qp, dc.transpose2(kp)), inv_sqrt_c)
        if not attend_padding:
            valid = max(embs[i].valid_len, 1)
            if valid < l:
                row = np.zeros((1, l), dtype=logits.data.dtype)
                row[0, valid:] = -1e30
                logits = dc.add_const(logits, row)
        dc.check_finite(logits, "cross-attention logits")
        attn = dc.matmul(dc.rowsoftmax(logits), vp)       # (h*w, c)
        gate = dc.tanh(attn)
        gated = dc.mul(gate, qbar)
        items.append(dc.reshape(dc.transpose2(gated), (c, h, w)))
        if capture is not None and i == 0:
            capture["q"] = q.data.copy()
            capture["tanh_a"] = gate.data.T.reshape(c, h, w).copy()
            capture["qstar"] = items[-1].data.copy()
    return dc.stack_batch(items)


def _prepare_image(image, cfg: ModelConfig) -> DiffTensor:
    x = image if isinstance(image, DiffTensor) else DiffTensor(image)
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise ShapeError(f"expected N x 1 x S x S input, got {x.data.shape}")
    if x.data.shape[2] != cfg.image_size or x.data.shape[3] != cfg.image_size:
        raise ShapeError(f"input is {x.data.shape[2]}x{x.data.shape[3]}, "
                         f"model expects {cfg.image_size}x{cfg.image_size}")
    return x


def _updown(image, embs, weights, cfg, train, capture, use_attention):
    x = _prepare_image(image, cfg)
    skips = []
    for i in range(1, cfg.depth + 1):
        x = _double_conv(x, weights, f"enc{i}", train)
        skips.append(x)
        x = dc.maxpool2(x)
    x = _double_conv(x, weights, f"enc{cfg.depth + 1}", train)
    for i in range(cfg.depth, 0, -1):
        u = dc.upconv2(x, weights[f"up{i}.w"], weights[f"up{i}.b"])
        if use_attention:
            cap_i = {} if capture is not None else None
            g = cross_attention(u, embs, CrossAttnParams.from_weights(weights, i),
                                attend_padding=cfg.attend_padding, capture=cap_i)
            if capture is not None:
                capture[i] = cap_i
        else:
            g = u
        x = _double_conv(dc.concat_channels(g, skips[i - 1]), weights,
                         f"dec{i}", train)
    return dc.conv2d(x, weights["head.w"], weights["head.b"], stride=1, padding=0)


def text_gated_forward(image, embs, weights: dict, cfg: ModelConfig,
                       train: bool = False, capture: dict | None = None
                       ) -> DiffTensor:
    """Full forward pass: encoder, bottleneck, gated decoder, 1x1 logit head."""
    return _updown(image, embs, weights, cfg, train, capture, use_attention=True)


def unet_forward(image, weights: dict, cfg: ModelConfig,
                 train: bool = False) -> DiffTensor:
    """Baseline without a text path: the attention gate becomes identity."""
    return _updown(image, None, weights, cfg, train, None, use_attention=False)


def predict_mask(logits, threshold: float = 0.5) -> np.ndarray:
    """Binarize logits: sigmoid(z) strictly above threshold."""
    z = logits.data if isinstance(logits, DiffTensor) else np.asarray(logits)
    return (dc.sigmoid_np(z) > threshold).astype(np.uint8)
