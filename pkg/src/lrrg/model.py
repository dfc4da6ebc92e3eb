"""Longitudinal visual encoder: twin multi-stage backbones with per-stage
text alignment on the prior branch and difference-aware residual fusion into
the current branch, plus the two disease classifier heads.

Batches put the ``P`` samples that have a prior exam first; the prior branch
only ever sees those samples, so a sample without a prior never touches any
prior-branch, alignment or difference parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .params import ParameterStore
from .synth import ATTRIBUTES, FINDINGS
from .tensor import ShapeError, Tensor

N_DISEASES = len(FINDINGS)
N_ATTRIBUTES = len(ATTRIBUTES)
ATTRIBUTE_INDEX = {a: i for i, a in enumerate(ATTRIBUTES)}
PROMPT_FOR = {"blank": "[BLA]", "positive": "[POS]", "negative": "[NEG]", "uncertain": "[UNC]"}
ATTRIBUTE_FOR = {v: k for k, v in PROMPT_FOR.items()}


class PriorInputError(ValueError):
    """Prior image and prior report must be supplied together."""


def labels_to_prompt(labels) -> tuple[str, ...]:
    if len(labels) != N_DISEASES:
        raise ValueError(f"expected {N_DISEASES} labels, got {len(labels)}")
    return tuple(PROMPT_FOR[a] for a in labels)


def prompt_to_labels(prompt) -> tuple[str, ...]:
    if len(prompt) != N_DISEASES:
        raise ValueError(f"expected {N_DISEASES} prompt tokens, got {len(prompt)}")
    return tuple(ATTRIBUTE_FOR[t] for t in prompt)


def labels_from_logits(logits: np.ndarray) -> list[tuple[str, ...]]:
    """Per-disease argmax of ``(N, 14, 4)`` logits."""
    idx = np.asarray(logits).argmax(axis=-1)
    return [tuple(ATTRIBUTES[i] for i in row) for row in idx]


def classification_loss(logits: Tensor, gold: np.ndarray) -> Tensor:
    """Per-sample mean over diseases of attribute cross-entropy; ``(N,)``.

    ``gold`` holds attribute indices of shape ``(N, 14)``.
    """
    gold = np.asarray(gold)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, gold[..., None], 1.0, axis=-1)
    nll = T.neg(T.sum(T.mul(T.log_softmax(logits, -1), Tensor(onehot)), axis=-1))
    return T.mean(nll, axis=-1)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class Conv1x1:
    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int, zero: bool = False,
                 bias: bool = True):
        self.weight = store.create(f"{name}.weight", (c_out, c_in), "zeros" if zero else "he", fan_in=c_in)
        self.bias = store.create(f"{name}.bias", (c_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1x1(x, self.weight, self.bias)


class Linear:
    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int, init: str = "xavier",
                 bias: bool = True):
        self.weight = store.create(f"{name}.weight", (c_out, c_in), init, fan_in=c_in)
        self.bias = store.create(f"{name}.bias", (c_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class InstanceNorm:
    def __init__(self, store: ParameterStore, name: str, channels: int):
        self.weight = store.create(f"{name}.weight", (channels,), "ones")
        self.bias = store.create(f"{name}.bias", (channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.weight, self.bias)


class StageBlock:
    """3x3 conv -> IN -> ReLU -> stride-2 3x3 conv -> IN -> ReLU."""

    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int):
        self.w1 = store.create(f"{name}.conv1.weight", (c_out, c_in, 3, 3), "he")
        self.b1 = store.create(f"{name}.conv1.bias", (c_out,))
        self.n1 = InstanceNorm(store, f"{name}.norm1", c_out)
        self.w2 = store.create(f"{name}.conv2.weight", (c_out, c_out, 3, 3), "he")
        self.b2 = store.create(f"{name}.conv2.bias", (c_out,))
        self.n2 = InstanceNorm(store, f"{name}.norm2", c_out)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.relu(self.n1(T.conv2d(x, self.w1, self.b1, stride=1, padding=1)))
        return T.relu(self.n2(T.conv2d(x, self.w2, self.b2, stride=2, padding=1)))


class Gate:
    """1x1 conv + ReLU, then zero-initialised 1x1 conv + Tanh."""

    def __init__(self, store: ParameterStore, name: str, channels: int):
        self.first = Conv1x1(store, f"{name}.b1", channels, channels)
        self.second = Conv1x1(store, f"{name}.b2", channels, channels, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.tanh(self.second(T.relu(self.first(x))))


# ---------------------------------------------------------------------------
# prior-side text alignment
# ---------------------------------------------------------------------------

class FeatureAlignment:
    """Cross-attention from prior image pixels to prior-report tokens, then gated fusion."""

    def __init__(self, store: ParameterStore, name: str, channels: int, text_dim: int,
                 align: bool = True, dynamic: bool = True):
        self.channels = channels
        self.align_enabled = align
        self.dynamic = dynamic
        if align:
            self.q = Conv1x1(store, f"{name}.q", channels, channels)
            self.q_norm = InstanceNorm(store, f"{name}.q_norm", channels)
            self.k = Linear(store, f"{name}.k", text_dim, channels)
            self.v = Linear(store, f"{name}.v", text_dim, channels)
            self.t = Conv1x1(store, f"{name}.t", channels, channels)
            self.t_norm = InstanceNorm(store, f"{name}.t_norm", channels)
            self.a = Conv1x1(store, f"{name}.a", channels, channels)
            self.f = Conv1x1(store, f"{name}.f", channels, channels)
        if dynamic:
            self.gate = Gate(store, f"{name}.gate", channels)

    def attention(self, feat: Tensor, text: Tensor, text_mask: np.ndarray | None = None
                  ) -> tuple[Tensor, np.ndarray]:
        """Return the attended feature ``(P, C, H, W)`` and weights ``(P, H*W, L)``.

        ``text`` is ``(P, L, C_txt)``; ``text_mask`` marks real (non-pad) tokens.
        """
        if text.shape[1] == 0:
            raise ValueError("missing prior text: attention needs at least one token")
        if text.shape[0] != feat.shape[0]:
            raise ShapeError(f"attention: image batch {feat.shape} and text batch {text.shape}")
        p, c, h, w = feat.shape
        q = self.q_norm(self.q(feat))
        q = T.transpose(T.reshape(q, (p, c, h * w)), (0, 2, 1))
        k = self.k(text)
        v = self.v(text)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c))
        if text_mask is not None:
            scores = T.masked_fill(scores, ~np.asarray(text_mask, dtype=bool)[:, None, :], -1e9)
        weights = T.softmax(scores, axis=-1)
        att = T.matmul(weights, v)
        att = T.reshape(T.transpose(att, (0, 2, 1)), (p, c, h, w))
        return self.t_norm(self.t(att)), weights.data

    def fuse(self, feat: Tensor, attended: Tensor) -> Tensor:
        fused = T.relu(self.f(T.mul(T.relu(self.a(feat)), attended)))
        return self.gated(fused)

    def gated(self, fused: Tensor) -> Tensor:
        if not self.dynamic:
            return fused
        return T.mul(self.gate(fused), fused)

    def __call__(self, feat: Tensor, text: Tensor, text_mask: np.ndarray | None = None) -> Tensor:
        """Aligned feature; the caller adds it to ``feat`` as a residual."""
        if not self.align_enabled:
            return self.gated(feat)
        attended, _ = self.attention(feat, text, text_mask)
        return self.fuse(feat, attended)


# ---------------------------------------------------------------------------
# current-side difference awareness
# ---------------------------------------------------------------------------

class LDConv:
    """3x3 conv plus a per-output-channel weighted central-difference branch.

    ``y = conv(x, W) + theta * conv(x_cd, W) + b`` where ``x_cd`` replaces
    each 3x3 patch value by (value - patch centre). The difference branch is
    evaluated as ``conv(x, W) - conv1x1(x, sum_k W)``.
    """

    def __init__(self, store: ParameterStore, name: str, channels: int, theta: float = 0.1):
        self.weight = store.create(f"{name}.weight", (channels, channels, 3, 3), "he")
        self.theta = store.create(f"{name}.theta", (channels,), "constant", value=theta)
        self.bias = store.create(f"{name}.bias", (channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return ldconv(x, self.weight, self.theta, self.bias)


def ldconv(x: Tensor, weight: Tensor, theta: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.shape[2:] != (3, 3) or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"ldconv: incompatible shapes {x.shape} and {weight.shape}")
    vanilla = T.conv2d(x, weight, None, stride=1, padding=1)
    centre = T.conv1x1(x, T.sum(weight, axis=(2, 3)))
    out = T.add(vanilla, T.mul(T.reshape(theta, (1, -1, 1, 1)), T.sub(vanilla, centre)))
    if bias is not None:
        out = T.add(out, T.reshape(bias, (1, -1, 1, 1)))
    return out


def pixel_difference(enc: Tensor, enp: Tensor) -> Tensor:
    """Sigmoid of the channel-mean difference: a ``(N, 1, H, W)`` saliency map."""
    if enc.shape != enp.shape:
        raise ShapeError(f"pixel_difference: incompatible shapes {enc.shape} and {enp.shape}")
    return T.sigmoid(T.channel_mean(T.sub(enc, enp)))


class DifferenceAware:
    """Enhance both features, weight them by their pixel difference, project, gate."""

    def __init__(self, store: ParameterStore, name: str, channels: int,
                 difference: bool = True, dynamic: bool = True):
        self.channels = channels
        self.difference_enabled = difference
        self.dynamic = dynamic
        if difference:
            self.ldc_cur = LDConv(store, f"{name}.ldc_cur", channels)
            self.ldc_prior = LDConv(store, f"{name}.ldc_prior", channels)
            self.proj = Conv1x1(store, f"{name}.pd", 2 * channels, channels)
        if dynamic:
            self.gate = Gate(store, f"{name}.gate", channels)

    def amplify(self, enc: Tensor, enp: Tensor, saliency: Tensor) -> Tensor:
        both = T.concat([T.mul(enc, saliency), T.mul(enp, saliency)], axis=1)
        return T.relu(self.proj(both))

    def difference_feature(self, cur: Tensor, prior: Tensor) -> tuple[Tensor, Tensor | None]:
        if not self.difference_enabled:
            return prior, None
        enc = self.ldc_cur(cur)
        enp = self.ldc_prior(prior)
        saliency = pixel_difference(enc, enp)
        return self.amplify(enc, enp, saliency), saliency

    def __call__(self, cur: Tensor, prior: Tensor | None, has_prior: bool = True) -> Tensor:
        """Difference-enhanced current feature (residual already added)."""
        if not has_prior:
            return cur
        if prior is None:
            raise ValueError("has_prior is set but no prior feature was given")
        if prior.shape != cur.shape:
            raise ShapeError(f"difference module: incompatible shapes {cur.shape} and {prior.shape}")
        da, _ = self.difference_feature(cur, prior)
        if self.dynamic:
            da = T.mul(self.gate(da), da)
        return T.add(cur, da)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    current: Tensor
    current_logits: Tensor
    prior: Tensor | None = None
    prior_logits: Tensor | None = None
    trace: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @property
    def predicted_labels(self) -> list[tuple[str, ...]]:
        return labels_from_logits(self.current_logits.data)


class LongitudinalEncoder:
    def __init__(self, store: ParameterStore, cfg: RunConfig):
        self.cfg = cfg
        widths = list(cfg.stage_channels)
        if len(widths) < 2:
            raise ValueError("need at least two backbone stages")
        if any(w <= 0 for w in widths):
            raise ValueError("stage widths must be positive")
        if cfg.image_size >> len(widths) < 1:
            raise ValueError(f"{len(widths)} stages leave no spatial extent for {cfg.image_size}px input")
        self.widths = widths
        self.n_stages = len(widths)
        self.geometry = []
        size, c_in = cfg.image_size, cfg.in_channels
        for w in widths:
            self.geometry.append(((c_in, size, size), (w, size // 2, size // 2)))
            size //= 2
            c_in = w
        ins = [cfg.in_channels] + widths[:-1]
        self.current = [StageBlock(store, f"current.stage{m + 1}", ins[m], widths[m]) for m in range(self.n_stages)]
        self.use_prior = cfg.use_prior
        if cfg.use_prior:
            if cfg.share_backbone:
                self.prior = self.current
            else:
                self.prior = [StageBlock(store, f"prior.stage{m + 1}", ins[m], widths[m])
                              for m in range(self.n_stages)]
            last = self.n_stages - 1
            self.fusion_stages = set(range(self.n_stages)) if cfg.multi_stage_fusion else {last}
            self.align = {m: FeatureAlignment(store, f"align.stage{m + 1}", widths[m], cfg.text_dim,
                                              align=cfg.dfam_enabled, dynamic=cfg.dynamic_fusion_enabled)
                          for m in sorted(self.fusion_stages)}
            self.diff = {m: DifferenceAware(store, f"diff.stage{m + 1}", widths[m],
                                            difference=cfg.ddam_enabled, dynamic=cfg.dynamic_fusion_enabled)
                         for m in sorted(self.fusion_stages)}
        c_final = widths[-1]
        self.head_current = Linear(store, "head_current", c_final, N_DISEASES * N_ATTRIBUTES)
        self.head_prior = Linear(store, "head_prior", c_final, N_DISEASES * N_ATTRIBUTES) if cfg.use_prior else None

    @property
    def final_geometry(self) -> tuple[int, int, int]:
        return self.geometry[-1][1]

    def stage_forward(self, branch: str, m: int, x: Tensor) -> Tensor:
        """Run stage ``m`` (1-based) of the ``"prior"`` or ``"current"`` backbone."""
        if branch not in ("prior", "current"):
            raise ValueError(f"unknown branch {branch!r}")
        if not 1 <= m <= self.n_stages:
            raise ValueError(f"stage {m} outside 1..{self.n_stages}")
        expected = self.geometry[m - 1][0]
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"{branch} stage {m}: expected input (N, {', '.join(map(str, expected))}), "
                             f"got {x.shape}")
        blocks = self.current if branch == "current" else self.prior
        return blocks[m - 1](x)

    def classify(self, feature: Tensor, head: str = "current") -> Tensor:
        """Global-average-pool a final-stage feature and map it to ``(N, 14, 4)`` logits."""
        if feature.ndim != 4 or tuple(feature.shape[1:]) != self.final_geometry:
            raise ShapeError(f"classify: expected a final-stage feature (N, {self.final_geometry}), "
                             f"got {feature.shape}")
        layer = self.head_current if head == "current" else self.head_prior
        if layer is None:
            raise ValueError("this encoder has no prior head")
        logits = layer(T.global_avg_pool(feature))
        return T.reshape(logits, (feature.shape[0], N_DISEASES, N_ATTRIBUTES))

    def forward(self, current: Tensor, prior: Tensor | None = None, text: Tensor | None = None,
                text_mask: np.ndarray | None = None, trace: bool = False) -> EncoderOutput:
        """Encode a batch whose first ``P = len(prior)`` samples carry a prior exam."""
        if (prior is None) != (text is None):
            raise PriorInputError("prior image and prior report must be given together")
        n = current.shape[0]
        p = 0 if prior is None or not self.use_prior else prior.shape[0]
        if p > n:
            raise ShapeError(f"{p} prior samples for a batch of {n}")
        record: dict[str, list[np.ndarray]] = {"current": [], "prior": [], "prior_raw": []}
        cur, pri = current, prior if p else None
        for m in range(self.n_stages):
            cur = self.stage_forward("current", m + 1, cur)
            if pri is not None:
                pri = self.stage_forward("prior", m + 1, pri)
                if trace:
                    record["prior_raw"].append(pri.data)
                if m in self.fusion_stages:
                    pri = T.add(pri, self.align[m](pri, text, text_mask))
                    if p == n:
                        cur = self.diff[m](cur, pri)
                    else:
                        head = self.diff[m](T.take(cur, np.arange(p), 0), pri)
                        cur = T.concat([head, T.take(cur, np.arange(p, n), 0)], axis=0)
            if trace:
                record["current"].append(cur.data)
                if pri is not None:
                    record["prior"].append(pri.data)
        out = EncoderOutput(current=cur, current_logits=self.classify(cur, "current"), trace=record)
        if pri is not None:
            out.prior = pri
            out.prior_logits = self.classify(pri, "prior")
        return out
