"""Feature extractors and the cooperative co-learner head.

A backbone owns a parameter *template* (names and shapes plus a deterministic
initializer) and pure forward functions. Parameters are passed in on every
call, which lets the optimization engine evaluate the same architecture at
the shared initialization or at task-adapted weights. Parameter names are
prefixed ``body.`` / ``head.`` so the adaptation masks used by ANIL and BOIL
are a simple prefix filter.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParameterSet, ShapeError, Tensor

STRATEGIES = ("S1", "S2", "S3", "S4")


class Conv4Backbone:
    """Four conv(3×3, pad 1) → ReLU → avg-pool(2×2, stride 2) blocks.

    At 32×32 input the feature map comes out at width×2×2. The classifier
    head is a single linear layer on the flattened features.
    """

    name = "conv4"

    def __init__(self, image_size: int, n_way: int, in_channels: int = 3,
                 width: int = 32, init: nn.InitPolicy | None = None):
        if image_size < 16:
            raise ValueError(f"conv4 requires image size >= 16, got {image_size}")
        self.image_size = image_size
        self.n_way = n_way
        self.in_channels = in_channels
        self.width = width
        self.init = init or nn.InitPolicy()
        self.feature_hw = image_size // 16
        self.feature_channels = width
        self._feat_dim = self.feature_channels * self.feature_hw**2

    def init_params(self) -> ParameterSet:
        rng = self.init.rng()
        p = ParameterSet()
        c_in = self.in_channels
        for i in range(1, 5):
            p[f"body.conv{i}.w"] = nn.he_conv(rng, self.width, c_in, 3, 3, self.init.conv_gain)
            p[f"body.conv{i}.b"] = nn.bias(self.width, self.init.bias_value)
            c_in = self.width
        p["head.fc.w"] = nn.xavier_linear(rng, self._feat_dim, self.n_way, self.init.linear_gain)
        p["head.fc.b"] = nn.bias(self.n_way, self.init.bias_value)
        return p

    def features(self, params: ParameterSet, x) -> Tensor:
        h = ad.astensor(x)
        for i in range(1, 5):
            h = nn.conv2d(h, params[f"body.conv{i}.w"], params[f"body.conv{i}.b"],
                          stride=1, padding=1)
            h = nn.relu(h)
            h = nn.avg_pool2d(h, 2, 2)
        return h

    def logits(self, params: ParameterSet, x) -> Tensor:
        return self.head_logits(params, self.features(params, x))

    def head_logits(self, params: ParameterSet, features) -> Tensor:
        return nn.linear(nn.flatten(features), params["head.fc.w"], params["head.fc.b"])

    def partition(self, params: ParameterSet):
        body = [n for n in params.names() if n.startswith("body.")]
        head = [n for n in params.names() if n.startswith("head.")]
        return body, head


class FusionBackbone:
    """Dual-branch extractor: a small conv stack and a patch transformer,
    fused by multi-head cross-attention.

    The conv branch is pooled into a single token; the transformer branch
    contributes patch tokens that attend to it (queries = patch tokens,
    keys/values = the conv token). With identity value/output projections
    the fused vector therefore equals the projected conv-branch features.
    The fused vector is exposed as a width×1×1 feature map.
    """

    name = "mini-fusion"

    def __init__(self, image_size: int, n_way: int, in_channels: int = 3,
                 width: int = 64, patch_size: int = 8, heads: int = 2,
                 conv_width: int = 16, init: nn.InitPolicy | None = None):
        if image_size % patch_size != 0:
            raise ValueError(
                f"mini-fusion: patch size {patch_size} does not divide image size {image_size}"
            )
        if width % heads != 0:
            raise ValueError(f"mini-fusion: width {width} not divisible by {heads} heads")
        self.image_size = image_size
        self.n_way = n_way
        self.in_channels = in_channels
        self.width = width
        self.patch_size = patch_size
        self.heads = heads
        self.conv_width = conv_width
        self.init = init or nn.InitPolicy()
        self.n_patches = (image_size // patch_size) ** 2
        self.feature_hw = 1
        self.feature_channels = width

    def init_params(self) -> ParameterSet:
        rng = self.init.rng()
        w, cw = self.width, self.conv_width
        patch_dim = self.in_channels * self.patch_size**2
        p = ParameterSet()
        # conv branch: two conv-relu-pool blocks, globally pooled, projected
        p["body.cnn.conv1.w"] = nn.he_conv(rng, cw, self.in_channels, 3, 3)
        p["body.cnn.conv1.b"] = nn.bias(cw)
        p["body.cnn.conv2.w"] = nn.he_conv(rng, cw, cw, 3, 3)
        p["body.cnn.conv2.b"] = nn.bias(cw)
        p["body.cnn.proj.w"] = nn.xavier_linear(rng, cw, w)
        p["body.cnn.proj.b"] = nn.bias(w)
        # transformer branch: patch embedding + pre-norm self-attention block
        p["body.vit.embed.w"] = nn.xavier_linear(rng, patch_dim, w)
        p["body.vit.embed.b"] = nn.bias(w)
        p["body.vit.pos"] = Tensor(0.02 * rng.standard_normal((1, self.n_patches, w)))
        p["body.vit.ln1.g"] = Tensor(np.ones(w))
        p["body.vit.ln1.b"] = nn.bias(w)
        for k, v in nn.attention_params(rng, w, prefix="body.vit.attn.").items():
            p[k] = v
        # fusion stage: cross-attention + pre-norm on queries + final projection
        p["body.fuse.ln.g"] = Tensor(np.ones(w))
        p["body.fuse.ln.b"] = nn.bias(w)
        for k, v in nn.attention_params(rng, w, prefix="body.fuse.attn.").items():
            p[k] = v
        p["body.fuse.out.w"] = nn.xavier_linear(rng, w, w)
        p["body.fuse.out.b"] = nn.bias(w)
        p["head.fc.w"] = nn.xavier_linear(rng, w, self.n_way)
        p["head.fc.b"] = nn.bias(self.n_way)
        return p

    def _cnn_token(self, params, x) -> Tensor:
        h = nn.conv2d(x, params["body.cnn.conv1.w"], params["body.cnn.conv1.b"], padding=1)
        h = nn.avg_pool2d(nn.relu(h), 2, 2)
        h = nn.conv2d(h, params["body.cnn.conv2.w"], params["body.cnn.conv2.b"], padding=1)
        h = nn.avg_pool2d(nn.relu(h), 2, 2)
        pooled = ad.reshape(nn.adaptive_avg_pool(h, 1, 1), (x.shape[0], self.conv_width))
        tok = nn.linear(pooled, params["body.cnn.proj.w"], params["body.cnn.proj.b"])
        return ad.reshape(tok, (x.shape[0], 1, self.width))

    def _vit_tokens(self, params, x) -> Tensor:
        n = x.shape[0]
        ps = self.patch_size
        grid = self.image_size // ps
        cols = ad.im2col(x, ps, ps, ps, ps)  # (N*grid*grid, C*ps*ps)
        tokens = nn.linear(cols, params["body.vit.embed.w"], params["body.vit.embed.b"])
        tokens = ad.reshape(tokens, (n, grid * grid, self.width))
        tokens = ad.add(tokens, params["body.vit.pos"])
        normed = nn.layer_norm(tokens, params["body.vit.ln1.g"], params["body.vit.ln1.b"])
        attended, _ = nn.multi_head_attention(
            normed, normed, normed, params, self.heads, prefix="body.vit.attn."
        )
        return ad.add(tokens, attended)

    def features(self, params: ParameterSet, x) -> Tensor:
        x = ad.astensor(x)
        cnn_tok = self._cnn_token(params, x)  # (N, 1, W) keys/values
        vit_tok = self._vit_tokens(params, x)  # (N, P, W) queries
        q = nn.layer_norm(vit_tok, params["body.fuse.ln.g"], params["body.fuse.ln.b"])
        fused, _ = nn.multi_head_attention(
            q, cnn_tok, cnn_tok, params, self.heads, prefix="body.fuse.attn."
        )
        vec = ad.tmean(fused, axis=1)  # (N, W)
        vec = nn.linear(vec, params["body.fuse.out.w"], params["body.fuse.out.b"])
        return ad.reshape(vec, (x.shape[0], self.width, 1, 1))

    def logits(self, params: ParameterSet, x) -> Tensor:
        return self.head_logits(params, self.features(params, x))

    def head_logits(self, params: ParameterSet, features) -> Tensor:
        return nn.linear(nn.flatten(features), params["head.fc.w"], params["head.fc.b"])

    def partition(self, params: ParameterSet):
        body = [n for n in params.names() if n.startswith("body.")]
        head = [n for n in params.names() if n.startswith("head.")]
        return body, head


class CoLearner:
    """Auxiliary head mapping backbone feature maps to task logits.

    The strategy decides which stages are present (S1 FC only, S2 pool+FC,
    S3 conv+FC, S4 conv+pool+FC). Convolutions are 3×3 stride-1 pad-1 at a
    fixed channel width so spatial size is preserved and the pool-free
    variants stay well-defined; the penultimate FC always projects to the
    compact hidden width.
    """

    def __init__(self, strategy: str, conv_layers: int, fc_layers: int,
                 feature_channels: int, n_way: int, hidden: int = 64,
                 conv_width: int = 64, feature_hw: int | None = None,
                 init: nn.InitPolicy | None = None):
        if strategy not in STRATEGIES:
            raise ValueError(f"co-learner strategy must be one of {STRATEGIES}, got {strategy!r}")
        uses_conv = strategy in ("S3", "S4")
        if not uses_conv and conv_layers > 0:
            raise ValueError(f"strategy {strategy} takes no conv layers, got conv_layers={conv_layers}")
        if uses_conv and conv_layers < 1:
            raise ValueError(f"strategy {strategy} needs conv_layers >= 1, got {conv_layers}")
        if fc_layers < 1:
            raise ValueError(f"co-learner needs fc_layers >= 1, got {fc_layers}")
        self.strategy = strategy
        self.conv_layers = conv_layers if uses_conv else 0
        self.fc_layers = fc_layers
        self.feature_channels = feature_channels
        self.n_way = n_way
        self.hidden = hidden
        self.conv_width = conv_width
        self.uses_pool = strategy in ("S2", "S4")
        # spatial extent of the incoming feature map; needed to size the
        # first FC when there is no pooling stage (S1/S3)
        self.feature_hw = feature_hw
        self.init = init or nn.InitPolicy()

    def _fc_input_dim(self) -> int:
        channels = self.conv_width if self.conv_layers > 0 else self.feature_channels
        if self.uses_pool:
            return channels
        if self.feature_hw is None:
            raise ValueError("co-learner without pooling needs feature_hw to size its first FC")
        return channels * self.feature_hw**2

    def layer_sequence(self) -> list[str]:
        seq = []
        for _ in range(self.conv_layers):
            seq += ["conv", "relu"]
        if self.uses_pool:
            seq.append("aap(1x1)")
        widths = [self.hidden] * (self.fc_layers - 1) + [self.n_way]
        seq += [f"fc(->{w})" for w in widths]
        return seq

    def init_params(self) -> ParameterSet:
        rng = self.init.rng()
        p = ParameterSet()
        c_in = self.feature_channels
        for i in range(1, self.conv_layers + 1):
            p[f"conv{i}.w"] = nn.he_conv(rng, self.conv_width, c_in, 3, 3)
            p[f"conv{i}.b"] = nn.bias(self.conv_width)
            c_in = self.conv_width
        d_in = self._fc_input_dim()
        widths = [self.hidden] * (self.fc_layers - 1) + [self.n_way]
        for i, d_out in enumerate(widths, start=1):
            p[f"fc{i}.w"] = nn.xavier_linear(rng, d_in, d_out)
            p[f"fc{i}.b"] = nn.bias(d_out)
            d_in = d_out
        return p

    def logits(self, psi: ParameterSet, features) -> Tensor:
        h = ad.astensor(features)
        if h.ndim != 4:
            raise ShapeError(f"co-learner expects N×C×H×W features, got {h.shape}")
        for i in range(1, self.conv_layers + 1):
            h = nn.relu(nn.conv2d(h, psi[f"conv{i}.w"], psi[f"conv{i}.b"], padding=1))
        if self.uses_pool:
            h = nn.adaptive_avg_pool(h, 1, 1)
        h = nn.flatten(h)
        for i in range(1, self.fc_layers + 1):
            h = nn.linear(h, psi[f"fc{i}.w"], psi[f"fc{i}.b"])
        return h


def build_backbone(spec: str, image_size: int, n_way: int, seed: int = 0,
                   in_channels: int = 3, **kwargs):
    """Backbone factory. Known specs: ``conv4`` and ``mini-fusion``."""
    init = nn.InitPolicy(seed=seed)
    if spec == "conv4":
        return Conv4Backbone(image_size, n_way, in_channels=in_channels, init=init, **kwargs)
    if spec == "mini-fusion":
        return FusionBackbone(image_size, n_way, in_channels=in_channels, init=init, **kwargs)
    raise ValueError(f"unknown backbone spec {spec!r} (expected 'conv4' or 'mini-fusion')")


def build_colearner(strategy: str, conv_layers: int, fc_layers: int,
                    feature_channels: int, n_way: int, hidden: int = 64,
                    seed: int = 0, **kwargs) -> CoLearner:
    return CoLearner(
        strategy, conv_layers, fc_layers, feature_channels, n_way,
        hidden=hidden, init=nn.InitPolicy(seed=seed), **kwargs,
    )


def param_checksum(params: ParameterSet) -> float:
    """Cheap deterministic fingerprint of a parameter set."""
    total = 0.0
    for name, t in params.items():
        total += float(np.sum(t.data * np.cos(np.arange(t.size).reshape(t.shape))))
    return total
