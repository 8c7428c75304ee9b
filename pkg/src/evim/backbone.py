"""Hierarchical vision backbone built around the hidden-state-mixer layer.

Layout: a 16x-reducing stem of four stride-2 3x3 convs, three stages of
mixer blocks separated by stride-2 downsampling, and a fusion head that
combines the classifier logits with logits derived from each stage's final
hidden state (softmax-weighted).

Each block is four residual branches with per-channel layer scales:
DWConv-BN, HSM-SSD, DWConv-BN, FFN (pointwise, expansion 4). Normalization
is LN only at the mixer entry; everything else uses BN. SiLU appears only
inside the mixer; all other activations are ReLU.

The downsampling layer is a "sandwich": residual DWConv-BN and a residual
expansion-2 FFN on each side of a stride-2 inverted-residual core (pointwise
expand x4, depthwise stride 2, pointwise project). Classifier and per-stage
fusion heads each hold two parallel linear projections whose outputs are
averaged, the distillation-ready head convention of this model family.

`count_params`/`count_flops` walk the same structural description the
forward pass implements; MACs count multiplies in conv/linear/mixer arithmetic
only (norms, activations, residuals and pooling are free).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import mixer as mx
from .ops import BN_EPS, ContractError, F32

FFN_RATIO = 4
DOWNSAMPLE_FFN_RATIO = 2
DOWNSAMPLE_EXPAND = 4
LAYER_SCALE_INIT = 1e-5
STEM_REDUCTION = 16


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    blocks_per_stage: tuple[int, int, int]
    channels: tuple[int, int, int]
    states: tuple[int, int, int]
    input_resolution: tuple[int, int] = (224, 224)
    num_classes: int = 1000
    variant_name: str = "custom"

    def __post_init__(self):
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        self.channels = tuple(self.channels)
        self.states = tuple(self.states)
        self.input_resolution = tuple(self.input_resolution)
        if len(self.blocks_per_stage) != 3 or len(self.channels) != 3 or len(self.states) != 3:
            raise ContractError("configs describe exactly three stages")
        if self.channels[0] % 8 != 0:
            raise ContractError(f"stage-1 width must be divisible by 8, got {self.channels[0]}")
        if any(b < 0 for b in self.blocks_per_stage) or self.num_classes < 1:
            raise ContractError(f"invalid config {self}")

    def stage_grids(self) -> list[tuple[int, int]]:
        """Spatial grid of each stage: stem/16 then ceil-halving."""
        h, w = self.input_resolution
        if h % STEM_REDUCTION or w % STEM_REDUCTION:
            raise ContractError(f"resolution {self.input_resolution} not divisible by 16")
        h, w = h // STEM_REDUCTION, w // STEM_REDUCTION
        grids = [(h, w)]
        for _ in range(2):
            h, w = (h + 1) // 2, (w + 1) // 2
            grids.append((h, w))
        return grids

    def stage_mixer_cfg(self, s: int) -> mx.MixerConfig:
        gh, gw = self.stage_grids()[s]
        return mx.MixerConfig(tokens=gh * gw, states=self.states[s], channels=self.channels[s])


PRESETS = {
    "M1": ModelConfig((2, 2, 2), (128, 192, 320), (49, 25, 9), (224, 224), 1000, "M1"),
    "M2": ModelConfig((2, 2, 2), (128, 256, 512), (49, 25, 9), (224, 224), 1000, "M2"),
    "M3": ModelConfig((2, 2, 2), (224, 320, 512), (49, 25, 9), (224, 224), 1000, "M3"),
    "M4": ModelConfig((3, 4, 2), (224, 320, 512), (64, 32, 16), (256, 256), 1000, "M4"),
}


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return ModelConfig(
        cfg.blocks_per_stage, cfg.channels, cfg.states,
        cfg.input_resolution, cfg.num_classes, cfg.variant_name,
    )


# ---------------------------------------------------------------------------
# weight containers


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass
class ConvBN:
    w: np.ndarray  # (3, 3, Cin, Cout)
    bn: BatchNorm


@dataclass
class DWConvBN:
    k: np.ndarray  # (3, 3, C)
    bn: BatchNorm


@dataclass
class PWConvBN:
    w: np.ndarray  # (Cin, Cout)
    bn: BatchNorm


@dataclass
class FFNWeights:
    expand: PWConvBN
    project: PWConvBN


@dataclass
class BlockWeights:
    dw1: DWConvBN
    ls1: np.ndarray
    mixer: mx.MixerParams  # its layer_scale is the second residual scale
    dw2: DWConvBN
    ls3: np.ndarray
    ffn: FFNWeights
    ls4: np.ndarray


@dataclass
class DownsampleWeights:
    dw_in: DWConvBN
    ffn_in: FFNWeights
    expand: PWConvBN
    dw_mid: DWConvBN  # stride 2
    project: PWConvBN
    dw_out: DWConvBN
    ffn_out: FFNWeights


@dataclass
class LogitHead:
    """LN then two parallel linear classifiers whose logits are averaged."""

    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_dist: np.ndarray
    b_dist: np.ndarray


@dataclass
class FusionHead:
    final: LogitHead
    stages: list[LogitHead]
    beta: np.ndarray  # (4,): weight logits for [final, stage1, stage2, stage3]


@dataclass
class StageHidden:
    """N_s x D_s hidden state captured at the last block of a stage."""

    h: np.ndarray


@dataclass
class ModelWeights:
    cfg: ModelConfig
    stem: list[ConvBN]
    stages: list[list[BlockWeights]]
    downs: list[DownsampleWeights]
    fusion: FusionHead


# ---------------------------------------------------------------------------
# initialization


def _init_bn(c: int, dtype) -> BatchNorm:
    return BatchNorm(
        gamma=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        mean=np.zeros(c, dtype=dtype),
        var=np.ones(c, dtype=dtype),
    )


def _init_conv(rng, cin: int, cout: int, dtype) -> ConvBN:
    scale = (2.0 / (9 * cin)) ** 0.5
    return ConvBN((rng.standard_normal((3, 3, cin, cout)) * scale).astype(dtype), _init_bn(cout, dtype))


def _init_dw(rng, c: int, dtype) -> DWConvBN:
    return DWConvBN((rng.standard_normal((3, 3, c)) / 3.0).astype(dtype), _init_bn(c, dtype))


def _init_pw(rng, cin: int, cout: int, dtype) -> PWConvBN:
    scale = cin**-0.5
    return PWConvBN((rng.standard_normal((cin, cout)) * scale).astype(dtype), _init_bn(cout, dtype))


def _init_ffn(rng, c: int, ratio: int, dtype) -> FFNWeights:
    hidden = ratio * c
    return FFNWeights(_init_pw(rng, c, hidden, dtype), _init_pw(rng, hidden, c, dtype))


def _init_head(rng, d: int, classes: int, dtype) -> LogitHead:
    scale = d**-0.5
    return LogitHead(
        ln_gamma=np.ones(d, dtype=dtype),
        ln_beta=np.zeros(d, dtype=dtype),
        w_cls=(rng.standard_normal((d, classes)) * scale).astype(dtype),
        b_cls=np.zeros(classes, dtype=dtype),
        w_dist=(rng.standard_normal((d, classes)) * scale).astype(dtype),
        b_dist=np.zeros(classes, dtype=dtype),
    )


def stem_widths(d1: int) -> list[int]:
    return [d1 // 8, d1 // 4, d1 // 2, d1]


def init_model(cfg: ModelConfig, rng: np.random.Generator, dtype=F32) -> ModelWeights:
    stem = []
    cin = 3
    for cout in stem_widths(cfg.channels[0]):
        stem.append(_init_conv(rng, cin, cout, dtype))
        cin = cout

    stages = []
    for s in range(3):
        d = cfg.channels[s]
        blocks = []
        for _ in range(cfg.blocks_per_stage[s]):
            blocks.append(
                BlockWeights(
                    dw1=_init_dw(rng, d, dtype),
                    ls1=np.full(d, LAYER_SCALE_INIT, dtype=dtype),
                    mixer=mx.init_mixer_params(
                        cfg.stage_mixer_cfg(s), rng, dtype=dtype,
                        layer_scale_init=LAYER_SCALE_INIT,
                    ),
                    dw2=_init_dw(rng, d, dtype),
                    ls3=np.full(d, LAYER_SCALE_INIT, dtype=dtype),
                    ffn=_init_ffn(rng, d, FFN_RATIO, dtype),
                    ls4=np.full(d, LAYER_SCALE_INIT, dtype=dtype),
                )
            )
        stages.append(blocks)

    downs = []
    for s in range(2):
        din, dout = cfg.channels[s], cfg.channels[s + 1]
        hidden = DOWNSAMPLE_EXPAND * din
        downs.append(
            DownsampleWeights(
                dw_in=_init_dw(rng, din, dtype),
                ffn_in=_init_ffn(rng, din, DOWNSAMPLE_FFN_RATIO, dtype),
                expand=_init_pw(rng, din, hidden, dtype),
                dw_mid=_init_dw(rng, hidden, dtype),
                project=_init_pw(rng, hidden, dout, dtype),
                dw_out=_init_dw(rng, dout, dtype),
                ffn_out=_init_ffn(rng, dout, DOWNSAMPLE_FFN_RATIO, dtype),
            )
        )

    fusion = FusionHead(
        final=_init_head(rng, cfg.channels[2], cfg.num_classes, dtype),
        stages=[_init_head(rng, cfg.channels[s], cfg.num_classes, dtype) for s in range(3)],
        beta=np.zeros(4, dtype=dtype),
    )
    return ModelWeights(cfg=cfg, stem=stem, stages=stages, downs=downs, fusion=fusion)


# ---------------------------------------------------------------------------
# forward passes


def apply_bn(x, bn: BatchNorm, training: bool = False, momentum: float = 0.1):
    """BN with frozen stats at inference; per-batch stats + running update in training."""
    if not training:
        return ad.batch_norm_infer(x, bn.mean, bn.var, bn.gamma, bn.beta)
    ndim = x.value.ndim if isinstance(x, ad.Var) else np.asarray(x).ndim
    axes = tuple(range(ndim - 1))
    mu = ad.mean(x, axis=axes, keepdims=True)
    xc = ad.add(x, ad.neg(mu))
    var = ad.mean(ad.mul(xc, xc), axis=axes, keepdims=True)
    inv = ad.power(ad.add(var, BN_EPS), -0.5)
    y = ad.add(ad.mul(ad.mul(xc, inv), bn.gamma), bn.beta)
    mu_v = (mu.value if isinstance(mu, ad.Var) else mu).reshape(-1)
    var_v = (var.value if isinstance(var, ad.Var) else var).reshape(-1)
    bn.mean += momentum * (mu_v.astype(bn.mean.dtype) - bn.mean)
    bn.var += momentum * (var_v.astype(bn.var.dtype) - bn.var)
    return y


def _dwbn(x, w: DWConvBN, training: bool, stride: int = 1):
    return apply_bn(ad.dwconv3x3(x, w.k, None, stride=stride), w.bn, training)


def ffn_forward(x, w: FFNWeights, training: bool = False):
    """Pointwise expand + BN + ReLU, pointwise project + BN."""
    y = ad.relu(apply_bn(ad.pwconv(x, w.expand.w), w.expand.bn, training))
    return apply_bn(ad.pwconv(y, w.project.w), w.project.bn, training)


def stem_forward(img, stem: list[ConvBN], training: bool = False):
    """Four stride-2 3x3 conv + BN + ReLU layers; (H, W, 3) -> (H/16, W/16, D1)."""
    shape = img.value.shape if isinstance(img, ad.Var) else np.asarray(img).shape
    if shape[-3] % STEM_REDUCTION or shape[-2] % STEM_REDUCTION:
        raise ContractError(f"stem input {shape} must be divisible by {STEM_REDUCTION}")
    x = img
    for conv in stem:
        x = ad.relu(apply_bn(ad.conv3x3(x, conv.w, None, stride=2), conv.bn, training))
    return x


def block_forward(x, w: BlockWeights, grid: tuple[int, int], training: bool = False):
    """One backbone block on a (..., H, W, D) map; returns (map, hidden state)."""
    h_, w_ = grid
    shape = x.value.shape if isinstance(x, ad.Var) else np.asarray(x).shape
    if shape[-3] != h_ or shape[-2] != w_:
        raise ContractError(f"block grid {grid} does not match input {shape}")
    d = shape[-1]
    x = ad.add(x, ad.mul(w.ls1, _dwbn(x, w.dw1, training)))
    tokens = ad.reshape(x, shape[:-3] + (h_ * w_, d))
    mixed, hidden = mx.hsm_ssd_layer(tokens, w.mixer, grid)
    tokens = ad.add(tokens, ad.mul(w.mixer.layer_scale, mixed))
    x = ad.reshape(tokens, shape)
    x = ad.add(x, ad.mul(w.ls3, _dwbn(x, w.dw2, training)))
    x = ad.add(x, ad.mul(w.ls4, ffn_forward(x, w.ffn, training)))
    return x, hidden


def downsample_forward(x, w: DownsampleWeights, training: bool = False):
    """Halve the grid (ceiling on odd extents) and move to the next stage width."""
    x = ad.add(x, _dwbn(x, w.dw_in, training))
    x = ad.add(x, ffn_forward(x, w.ffn_in, training))
    y = ad.relu(apply_bn(ad.pwconv(x, w.expand.w), w.expand.bn, training))
    y = _dwbn(y, w.dw_mid, training, stride=2)
    y = apply_bn(ad.pwconv(y, w.project.w), w.project.bn, training)
    y = ad.add(y, _dwbn(y, w.dw_out, training))
    return ad.add(y, ffn_forward(y, w.ffn_out, training))


def _head_logits(pooled, head: LogitHead):
    nrm = ad.layer_norm(pooled, head.ln_gamma, head.ln_beta)
    z_cls = ad.add(ad.matmul(nrm, head.w_cls), head.b_cls)
    z_dist = ad.add(ad.matmul(nrm, head.w_dist), head.b_dist)
    return ad.mul(ad.add(z_cls, z_dist), 0.5)


def msf_fuse(stage_hiddens, final_feature, fusion: FusionHead):
    """Fused logits: softmax(beta)-weighted sum of the final-stage head and
    one head per stage hidden state (each mean-pooled, normalized, projected)."""
    shape = (
        final_feature.value.shape
        if isinstance(final_feature, ad.Var)
        else np.asarray(final_feature).shape
    )
    tokens = ad.reshape(
        final_feature, shape[:-3] + (shape[-3] * shape[-2], shape[-1])
    )
    logits = [_head_logits(ad.mean(tokens, axis=-2), fusion.final)]
    for sh, head in zip(stage_hiddens, fusion.stages):
        h = sh.h if isinstance(sh, StageHidden) else sh
        logits.append(_head_logits(ad.mean(h, axis=-2), head))
    weights = ad.softmax(fusion.beta, axis=-1)
    fused = None
    for k, z in enumerate(logits):
        term = ad.mul(weights[k], z)
        fused = term if fused is None else ad.add(fused, term)
    return fused


def model_forward(img, weights: ModelWeights, training: bool = False, fuse: bool = True):
    """Full network: stem, three stages with downsampling, fusion head.

    Returns (logits, [StageHidden; 3]) where each hidden state comes from the
    last block of its stage. With fuse=False the logits are the final-stage
    head alone (fusion ablation).
    """
    cfg = weights.cfg
    x = stem_forward(img, weights.stem, training)
    grids = cfg.stage_grids()
    hiddens: list[StageHidden] = []
    for s in range(3):
        hidden = None
        for blk in weights.stages[s]:
            x, hidden = block_forward(x, blk, grids[s], training)
        if hidden is None:
            raise ContractError(f"stage {s + 1} has no blocks, no hidden state to fuse")
        hiddens.append(StageHidden(hidden))
        if s < 2:
            x = downsample_forward(x, weights.downs[s], training)
    if fuse:
        logits = msf_fuse(hiddens, x, weights.fusion)
    else:
        shape = x.value.shape if isinstance(x, ad.Var) else np.asarray(x).shape
        tokens = ad.reshape(x, shape[:-3] + (shape[-3] * shape[-2], shape[-1]))
        logits = _head_logits(ad.mean(tokens, axis=-2), weights.fusion.final)
    return logits, hiddens


# ---------------------------------------------------------------------------
# analytic cost model


@dataclass
class ReportRow:
    section: str
    name: str
    params: int
    macs: int
    act_bytes: int


def _ffn_rows(section: str, name: str, d: int, ratio: int, L: int, bytes_per: int):
    hidden = ratio * d
    params = d * hidden + 2 * hidden + hidden * d + 2 * d
    macs = 2 * L * d * hidden
    act = (L * d + L * hidden + L * d) * bytes_per
    return ReportRow(section, name, params, macs, act)


def _dw_rows(section: str, name: str, c: int, L_out: int, bytes_per: int, L_in=None):
    params = 9 * c + 2 * c
    macs = 9 * c * L_out
    act = ((L_in if L_in is not None else L_out) + L_out) * c * bytes_per
    return ReportRow(section, name, params, macs, act)


def architecture_report(
    cfg: ModelConfig,
    resolution: Optional[tuple[int, int]] = None,
    bytes_per: int = 4,
) -> list[ReportRow]:
    """Per-layer parameter/MAC/activation walk of the architecture.

    Parameter counts are learnable tensors only (BN running statistics are
    buffers). Activation bytes estimate the live tensors of each layer:
    input + output (+ the wider of any branch intermediates).
    """
    if resolution is not None:
        cfg = ModelConfig(
            cfg.blocks_per_stage, cfg.channels, cfg.states,
            resolution, cfg.num_classes, cfg.variant_name,
        )
    rows: list[ReportRow] = []
    h, w = cfg.input_resolution
    cin = 3
    for i, cout in enumerate(stem_widths(cfg.channels[0]), start=1):
        h, w = (h + 1) // 2, (w + 1) // 2
        rows.append(
            ReportRow(
                "stem", f"conv{i}",
                9 * cin * cout + 2 * cout,
                h * w * 9 * cin * cout,
                (4 * h * w * cin + h * w * cout) * bytes_per,
            )
        )
        cin = cout

    grids = cfg.stage_grids()
    for s in range(3):
        d, n = cfg.channels[s], cfg.states[s]
        gh, gw = grids[s]
        L = gh * gw
        section = f"stage{s + 1}"
        mcfg = cfg.stage_mixer_cfg(s)
        mixer_params = (
            2 * d                      # entry LN
            + d * 3 * n + n            # fused projection + step bias
            + n                        # decay parameters
            + 2 * (9 * n + n)          # depthwise kernels on B_hat, C
            + 3 * d * d                # w_in, w_z, w_out
            + d                        # mixer layer scale
        )
        mixer_macs = mx.flops_of_mixer(mcfg)
        mixer_act = max(
            L * d + L * 3 * n,         # projection
            L * d + 2 * L * n + n * d,  # state reduce
            3 * n * d,                 # hidden mixing
            L * n + n * d + L * d,     # out-projection
        ) * bytes_per
        for b in range(cfg.blocks_per_stage[s]):
            rows.append(_dw_rows(section, f"block{b}.dw1", d, L, bytes_per))
            rows.append(ReportRow(section, f"block{b}.mixer", mixer_params, mixer_macs, mixer_act))
            rows.append(_dw_rows(section, f"block{b}.dw2", d, L, bytes_per))
            rows.append(_ffn_rows(section, f"block{b}.ffn", d, FFN_RATIO, L, bytes_per))
            rows.append(ReportRow(section, f"block{b}.layer_scales", 3 * d, 0, 0))

    for s in range(2):
        din, dout = cfg.channels[s], cfg.channels[s + 1]
        hidden = DOWNSAMPLE_EXPAND * din
        (gh, gw), (oh, ow) = grids[s], grids[s + 1]
        L_in, L_out = gh * gw, oh * ow
        section = f"downsample{s + 1}"
        rows.append(_dw_rows(section, "dw_in", din, L_in, bytes_per))
        rows.append(_ffn_rows(section, "ffn_in", din, DOWNSAMPLE_FFN_RATIO, L_in, bytes_per))
        rows.append(
            ReportRow(section, "expand", din * hidden + 2 * hidden,
                      L_in * din * hidden, (L_in * din + L_in * hidden) * bytes_per)
        )
        rows.append(_dw_rows(section, "dw_mid", hidden, L_out, bytes_per, L_in=L_in))
        rows.append(
            ReportRow(section, "project", hidden * dout + 2 * dout,
                      L_out * hidden * dout, (L_out * hidden + L_out * dout) * bytes_per)
        )
        rows.append(_dw_rows(section, "dw_out", dout, L_out, bytes_per))
        rows.append(_ffn_rows(section, "ffn_out", dout, DOWNSAMPLE_FFN_RATIO, L_out, bytes_per))

    c = cfg.num_classes
    head_dims = [cfg.channels[2]] + list(cfg.channels)
    names = ["final", "stage1", "stage2", "stage3"]
    for name, d in zip(names, head_dims):
        rows.append(
            ReportRow("head", name, 2 * d + 2 * (d * c + c), 2 * d * c, (d + 2 * c) * bytes_per)
        )
    rows.append(ReportRow("head", "fusion_beta", 4, 0, 0))
    return rows


def count_params(cfg: ModelConfig) -> int:
    """Learnable parameter count (analytic walk; BN buffers excluded)."""
    return sum(r.params for r in architecture_report(cfg))


def count_flops(cfg: ModelConfig, resolution: Optional[int] = None) -> int:
    """Forward multiply-accumulates; 1 MAC = 1 FLOP-unit."""
    res = None if resolution is None else (resolution, resolution)
    return sum(r.macs for r in architecture_report(cfg, res))


def peak_activation_bytes(cfg: ModelConfig, resolution=None, bytes_per: int = 4) -> int:
    return max(r.act_bytes for r in architecture_report(cfg, resolution, bytes_per))


# ---------------------------------------------------------------------------
# weight traversal (serialization + training)


def _bn_items(prefix: str, bn: BatchNorm):
    yield f"{prefix}.bn.gamma", bn, "gamma"
    yield f"{prefix}.bn.beta", bn, "beta"
    yield f"{prefix}.bn.mean", bn, "mean"
    yield f"{prefix}.bn.var", bn, "var"


def _ffn_items(prefix: str, f: FFNWeights):
    yield f"{prefix}.expand.w", f.expand, "w"
    yield from _bn_items(f"{prefix}.expand", f.expand.bn)
    yield f"{prefix}.project.w", f.project, "w"
    yield from _bn_items(f"{prefix}.project", f.project.bn)


def _head_items(prefix: str, h: LogitHead):
    for attr in ("ln_gamma", "ln_beta", "w_cls", "b_cls", "w_dist", "b_dist"):
        yield f"{prefix}.{attr}", h, attr


def walk_weights(model: ModelWeights):
    """Yield (canonical name, owner object, attribute) for every tensor.

    Block tensors follow the `stage{S}.block{B}.{sublayer}.{param}` scheme
    with 1-based stages and 0-based blocks; names are unique.
    """
    for i, conv in enumerate(model.stem, start=1):
        yield f"stem.conv{i}.w", conv, "w"
        yield from _bn_items(f"stem.conv{i}", conv.bn)
    for s, blocks in enumerate(model.stages, start=1):
        for b, blk in enumerate(blocks):
            p = f"stage{s}.block{b}"
            yield f"{p}.dw1.k", blk.dw1, "k"
            yield from _bn_items(f"{p}.dw1", blk.dw1.bn)
            yield f"{p}.ls1", blk, "ls1"
            for name, _ in blk.mixer.named_arrays():
                yield f"{p}.mixer.{name}", blk.mixer, name
            yield f"{p}.dw2.k", blk.dw2, "k"
            yield from _bn_items(f"{p}.dw2", blk.dw2.bn)
            yield f"{p}.ls3", blk, "ls3"
            yield from _ffn_items(f"{p}.ffn", blk.ffn)
            yield f"{p}.ls4", blk, "ls4"
    for s, dw in enumerate(model.downs, start=1):
        p = f"down{s}"
        yield f"{p}.dw_in.k", dw.dw_in, "k"
        yield from _bn_items(f"{p}.dw_in", dw.dw_in.bn)
        yield from _ffn_items(f"{p}.ffn_in", dw.ffn_in)
        yield f"{p}.expand.w", dw.expand, "w"
        yield from _bn_items(f"{p}.expand", dw.expand.bn)
        yield f"{p}.dw_mid.k", dw.dw_mid, "k"
        yield from _bn_items(f"{p}.dw_mid", dw.dw_mid.bn)
        yield f"{p}.project.w", dw.project, "w"
        yield from _bn_items(f"{p}.project", dw.project.bn)
        yield f"{p}.dw_out.k", dw.dw_out, "k"
        yield from _bn_items(f"{p}.dw_out", dw.dw_out.bn)
        yield from _ffn_items(f"{p}.ffn_out", dw.ffn_out)
    yield from _head_items("fusion.final", model.fusion.final)
    for s, head in enumerate(model.fusion.stages, start=1):
        yield from _head_items(f"fusion.stage{s}", head)
    yield "fusion.beta", model.fusion, "beta"


def is_buffer(name: str) -> bool:
    """BN running statistics are buffers, not learnable parameters."""
    return name.endswith(".bn.mean") or name.endswith(".bn.var")


def named_arrays(model: ModelWeights) -> dict[str, np.ndarray]:
    return {name: getattr(obj, attr) for name, obj, attr in walk_weights(model)}


def assign_named(model: ModelWeights, arrays: dict[str, np.ndarray]) -> None:
    """Replace model tensors by canonical name, checking shapes."""
    seen = set()
    for name, obj, attr in walk_weights(model):
        if name not in arrays:
            raise ContractError(f"missing tensor {name!r}")
        new = np.asarray(arrays[name])
        cur = getattr(obj, attr)
        if new.shape != np.asarray(cur).shape:
            raise ContractError(f"tensor {name!r} has shape {new.shape}, expected {cur.shape}")
        setattr(obj, attr, new)
        seen.add(name)
    extra = set(arrays) - seen
    if extra:
        raise ContractError(f"unknown tensors in weight set: {sorted(extra)[:5]}")
