"""Four-stage LVT backbone: configuration, assembly, forward, accounting.

Stage 1 runs convolutional self-attention blocks, stages 2-4 run recursive
atrous self-attention blocks. Every stage opens with an overlapped patch
embedding (stride 4 for stage 1, stride 2 after that) and closes with a
channel layer norm. Blocks are pre-norm residual::

    x = x + attn(norm1(x))
    x = x + mix_ffn(norm2(x))
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .csa import CsaParams, csa_forward
from .nn import (
    LN_EPS,
    FfnParams,
    NormParams,
    ParamGroup,
    PatchEmbedParams,
    mix_ffn,
    overlapped_patch_embed,
    patch_embed_spec,
    trunc_normal,
)
from .rasa import DILATIONS, AsaParams, RasaConfig, rasa_forward
from .weights import ShapeMismatchError, WeightStore

SA_TYPES = ("CSA", "RASA")
REFERENCE_ENCODER_PARAMS = 3.4e6
REFERENCE_FLOPS = 0.9e9


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StageSpec:
    sa_type: str
    layer_num: int
    feature_dim: int
    heads: int
    mlp_ratio: int
    sr_ratio: int | None = None
    recursion_depth: int | None = None
    dilations: tuple = DILATIONS

    def __post_init__(self):
        if self.sa_type not in SA_TYPES:
            raise ValueError(f"sa_type must be one of {SA_TYPES}, got {self.sa_type!r}")
        if self.layer_num < 1:
            raise ValueError("layer_num must be >= 1")
        if self.heads < 1 or self.feature_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide feature_dim={self.feature_dim}")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.sa_type == "RASA" and (self.sr_ratio is None or self.sr_ratio < 1):
            raise ValueError("RASA stages need sr_ratio >= 1")
        if self.recursion_depth is not None and self.recursion_depth < 1:
            raise ValueError("recursion_depth must be >= 1")
        object.__setattr__(self, "dilations", tuple(self.dilations))


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple
    input_channels: int = 3
    num_classes: int = 1000
    recursion_depth: int = 2
    image_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not 1 <= len(self.stages) <= 4:
            raise ValueError("a model has 1 to 4 stages")
        if self.input_channels < 1 or self.num_classes < 0 or self.recursion_depth < 1:
            raise ValueError("invalid input_channels / num_classes / recursion_depth")

    @classmethod
    def default(cls) -> "ModelConfig":
        return cls(
            stages=(
                StageSpec("CSA", 2, 64, 2, 4),
                StageSpec("RASA", 2, 64, 2, 8, sr_ratio=4),
                StageSpec("RASA", 2, 160, 5, 4, sr_ratio=2),
                StageSpec("RASA", 2, 256, 8, 4, sr_ratio=1),
            )
        )

    def depth_of(self, stage_index: int) -> int:
        spec = self.stages[stage_index]
        return spec.recursion_depth if spec.recursion_depth is not None else self.recursion_depth

    @property
    def strides(self) -> tuple:
        return tuple(4 * 2**i for i in range(len(self.stages)))

    def with_depth(self, depth: int) -> "ModelConfig":
        stages = tuple(StageSpec(**{**asdict(s), "recursion_depth": None}) for s in self.stages)
        return ModelConfig(stages, self.input_channels, self.num_classes, depth, self.image_size)

    def with_dilations(self, dilations) -> "ModelConfig":
        stages = tuple(StageSpec(**{**asdict(s), "dilations": tuple(dilations)}) for s in self.stages)
        return ModelConfig(stages, self.input_channels, self.num_classes, self.recursion_depth, self.image_size)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stages"] = [{**asdict(s), "dilations": list(s.dilations)} for s in self.stages]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        if "stages" not in d:
            raise ValueError("config needs a 'stages' array")
        stages = []
        for s in d["stages"]:
            s = dict(s)
            if "dilations" in s:
                s["dilations"] = tuple(s["dilations"])
            stages.append(StageSpec(**s))
        rest = {k: d[k] for k in ("input_channels", "num_classes", "recursion_depth", "image_size") if k in d}
        return cls(stages=tuple(stages), **rest)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------------------
# model


@dataclass
class Block:
    norm1: NormParams
    attn: CsaParams | AsaParams
    norm2: NormParams
    ffn: FfnParams

    @property
    def attn_name(self) -> str:
        return "csa" if isinstance(self.attn, CsaParams) else "rasa"

    def named_arrays(self, prefix: str) -> dict:
        out = {}
        out.update(self.norm1.named_arrays(prefix + "norm1."))
        out.update(self.attn.named_arrays(f"{prefix}{self.attn_name}."))
        out.update(self.norm2.named_arrays(prefix + "norm2."))
        out.update(self.ffn.named_arrays(prefix + "ffn."))
        return out


@dataclass
class Stage:
    index: int  # 1-based
    spec: StageSpec
    embed: PatchEmbedParams
    blocks: list
    norm: NormParams
    rasa: RasaConfig | None = None

    def named_arrays(self) -> dict:
        p = f"stage{self.index}."
        out = self.embed.named_arrays(p + "patch_embed.")
        for n, blk in enumerate(self.blocks, start=1):
            out.update(blk.named_arrays(f"{p}block{n}."))
        out.update(self.norm.named_arrays(p + "norm."))
        return out


@dataclass
class HeadParams(ParamGroup):
    w: np.ndarray  # (num_classes, d_last)
    b: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    stages: list
    head: HeadParams | None = None
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def named_parameters(self) -> dict:
        out = {}
        for st in self.stages:
            out.update(st.named_arrays())
        if self.head is not None:
            out.update(self.head.named_arrays("head."))
        return out

    def weight_store(self) -> WeightStore:
        return WeightStore(self.named_parameters())


def build_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32, std: float = 0.02) -> Model:
    """Allocate and initialise every parameter reproducibly from ``seed``.

    Projection weights are truncated normal (std 0.02), biases zero, norm
    gains one and shifts zero.
    """
    cfg = cfg or ModelConfig.default()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    stages = []
    c_in = cfg.input_channels
    for i, spec in enumerate(cfg.stages):
        d = spec.feature_dim
        embed = PatchEmbedParams.init(c_in, d, i + 1, rng, dtype, std)
        blocks = []
        for _ in range(spec.layer_num):
            if spec.sa_type == "CSA":
                attn = CsaParams.init(d, spec.heads, rng, dtype, std)
            else:
                attn = AsaParams.init(d, spec.heads, spec.sr_ratio, rng, dtype, std, spec.dilations)
            blocks.append(Block(NormParams.init(d, dtype), attn, NormParams.init(d, dtype), FfnParams.init(d, spec.mlp_ratio, rng, dtype, std)))
        rasa = RasaConfig(cfg.depth_of(i)) if spec.sa_type == "RASA" else None
        stages.append(Stage(i + 1, spec, embed, blocks, NormParams.init(d, dtype), rasa))
        c_in = d
    head = None
    if cfg.num_classes > 0:
        d_last = cfg.stages[-1].feature_dim
        head = HeadParams(trunc_normal(rng, (cfg.num_classes, d_last), std, dtype), np.zeros(cfg.num_classes, dtype))
    return Model(cfg, stages, head, dtype)


def model_from_store(cfg: ModelConfig, store: WeightStore) -> Model:
    """Model whose parameters are copies of the tensors in ``store``.

    Raises :class:`ShapeMismatchError` on missing, extra or misshapen tensors.
    """
    dtypes = {a.dtype for _, a in store.items()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.dtype(np.float32)
    model = build_model(cfg, seed=0, dtype=dtype)
    expected = model.named_parameters()
    missing = [n for n in expected if n not in store]
    extra = [n for n in store if n not in expected]
    if missing or extra:
        raise ShapeMismatchError(f"weights do not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in expected.items():
        src = store[name]
        if src.shape != arr.shape:
            raise ShapeMismatchError(f"{name}: stored shape {src.shape} != config shape {arr.shape}")
    for name, arr in expected.items():
        np.copyto(arr, store[name])
    return model


def save_weights(model: Model, path) -> None:
    model.weight_store().save(path)


def load_weights(path) -> WeightStore:
    return WeightStore.load(path)


def load_model(cfg: ModelConfig, path) -> Model:
    return model_from_store(cfg, WeightStore.load(path))


# --------------------------------------------------------------------------
# forward


def _block_forward(x, blk: Block, stage: Stage) -> np.ndarray:
    y = T.channel_norm(x, blk.norm1.gamma, blk.norm1.beta, LN_EPS)
    if isinstance(blk.attn, CsaParams):
        a = csa_forward(y, blk.attn)
    else:
        a = rasa_forward(y, blk.attn, stage.rasa)
    x = x + a
    y = T.channel_norm(x, blk.norm2.gamma, blk.norm2.beta, LN_EPS)
    return x + mix_ffn(y, stage.spec.mlp_ratio, blk.ffn)


def _stage_forward(x, stage: Stage) -> np.ndarray:
    x = overlapped_patch_embed(x, stage.index, stage.embed)
    for blk in stage.blocks:
        x = _block_forward(x, blk, stage)
    return T.channel_norm(x, stage.norm.gamma, stage.norm.beta, LN_EPS)


def _features_single(model: Model, image: np.ndarray) -> list:
    C, H, W = image.shape
    if C != model.config.input_channels:
        raise T.ShapeError(f"image has {C} channels, model expects {model.config.input_channels}")
    if H < 32 or W < 32:
        raise T.ShapeError(f"input {H}x{W} is smaller than 32x32")
    total = model.config.strides[-1]
    ph, pw = -H % total, -W % total
    x = np.pad(image, ((0, 0), (0, ph), (0, pw))) if ph or pw else image
    feats = []
    for stage, stride in zip(model.stages, model.config.strides):
        x = _stage_forward(x, stage)
        feats.append(np.ascontiguousarray(x[:, : math.ceil(H / stride), : math.ceil(W / stride)]))
    return feats


def forward_features(model: Model, image) -> list:
    """Stage outputs at strides 4, 8, 16, 32 for a (C, H, W) or (B, C, H, W) input.

    Inputs whose sides are not multiples of the final stride are zero
    padded bottom/right and the outputs cropped back.
    """
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim == 3:
        return _features_single(model, image)
    if image.ndim != 4:
        raise T.ShapeError(f"image must be (C, H, W) or (B, C, H, W), got {image.shape}")
    per = [_features_single(model, im) for im in image]
    return [np.stack(level) for level in zip(*per)]


def forward_classify(model: Model, image) -> np.ndarray:
    """Global-average-pooled last stage through a linear classifier."""
    if model.head is None:
        raise ValueError("model has no classification head (num_classes=0)")
    feats = forward_features(model, image)[-1]
    pooled = feats.mean(axis=(-2, -1))
    if pooled.ndim == 1:
        return T.linear(pooled[None], model.head.w, model.head.b)[0]
    return T.linear(pooled, model.head.w, model.head.b)


# --------------------------------------------------------------------------
# accounting


@dataclass
class ParamReport:
    rows: list  # (module path, params, bias params)
    encoder: int
    head: int

    @property
    def total(self) -> int:
        return self.encoder + self.head

    def by_stage(self) -> dict:
        out: dict = {}
        for module, n, _ in self.rows:
            key = module.split(".")[0]
            out[key] = out.get(key, 0) + n
        return out

    def format(self) -> str:
        lines = [f"{'module':<40} {'params':>12} {'of which bias':>14}"]
        for module, n, nb in self.rows:
            lines.append(f"{module:<40} {n:>12,} {nb:>14,}")
        lines.append(f"{'encoder':<40} {self.encoder:>12,}")
        lines.append(f"{'head':<40} {self.head:>12,}")
        lines.append(f"{'encoder + head':<40} {self.total:>12,}")
        lines.append(f"encoder / encoder+head = {self.encoder / 1e6:.2f}M / {self.total / 1e6:.2f}M")
        return "\n".join(lines)


def _is_bias(leaf: str) -> bool:
    return leaf == "b" or leaf.startswith("b_") or (leaf.startswith("b") and leaf[1:].isdigit())


def count_params(model: Model) -> ParamReport:
    rows: dict = {}
    encoder = head = 0
    for name, arr in model.named_parameters().items():
        module, leaf = name.rsplit(".", 1)
        n, nb = rows.get(module, (0, 0))
        rows[module] = (n + arr.size, nb + (arr.size if _is_bias(leaf) else 0))
        if name.startswith("head."):
            head += arr.size
        else:
            encoder += arr.size
    return ParamReport([(m, n, nb) for m, (n, nb) in rows.items()], int(encoder), int(head))


@dataclass
class FlopsReport:
    rows: list  # (module path, MACs)
    encoder: int
    head: int
    input_shape: tuple
    convention: str = "1 FLOP = 1 multiply-accumulate (MAC); norms, softmax, activations and additions are not counted"

    @property
    def total(self) -> int:
        return self.encoder + self.head

    def by_stage(self) -> dict:
        out: dict = {}
        for module, n in self.rows:
            key = module.split(".")[0]
            out[key] = out.get(key, 0) + n
        return out

    def reference_check(self, reference: float = REFERENCE_FLOPS, tol: float = 0.25) -> tuple:
        dev = self.encoder / reference - 1.0
        return abs(dev) <= tol, dev

    def format(self) -> str:
        lines = [f"# FLOPs convention: {self.convention}", f"# input: {'x'.join(map(str, self.input_shape))}"]
        lines.append(f"{'module':<40} {'MACs':>16}")
        for module, n in self.rows:
            lines.append(f"{module:<40} {n:>16,}")
        lines.append(f"{'encoder':<40} {self.encoder:>16,}  ({self.encoder / 1e9:.3f} G)")
        lines.append(f"{'head':<40} {self.head:>16,}")
        lines.append(f"{'encoder + head':<40} {self.total:>16,}  ({self.total / 1e9:.3f} G)")
        if tuple(self.input_shape[-2:]) == (224, 224):
            ok, dev = self.reference_check()
            lines.append(f"reference 0.9 G at 224x224: deviation {dev:+.1%} ({'within' if ok else 'OUTSIDE'} +-25%)")
            if not ok:
                lines.append(
                    "note: the reference figure comes from a different counting tool and head; "
                    "the per-module table above is exact for this implementation"
                )
        return "\n".join(lines)


def conv_macs(k: int, c_in: int, c_out: int, groups: int, h_out: int, w_out: int) -> int:
    return k * k * (c_in // groups) * c_out * h_out * w_out


def _csa_macs(d, heads, H, W, k=3, stride=2) -> int:
    lh = (H + 2 * (k // 2) - k) // stride + 1
    lw = (W + 2 * (k // 2) - k) // stride + 1
    L, kk, dh = lh * lw, k * k, d // heads
    predictor = L * d * heads * kk * kk
    filters = L * kk * d * dh
    weighted = L * kk * kk * d
    out = H * W * d * d
    return predictor + filters + weighted + out


def _asa_macs(d, sr, H, W, n_rates) -> int:
    N = H * W
    query = N * d * d + n_rates * conv_macs(3, d, d, d, H, W)
    if sr > 1:
        hr, wr = math.ceil(H / sr), math.ceil(W / sr)
        M = hr * wr
        reduce = conv_macs(sr, d, d, 1, hr, wr)
    else:
        M, reduce = N, 0
    kv = 2 * M * d * d
    attn = 2 * N * M * d
    out = N * d * d
    return query + reduce + kv + attn + out


def _ffn_macs(d, ratio, H, W) -> int:
    hd = d * ratio
    return 2 * H * W * d * hd + conv_macs(3, hd, hd, hd, H, W)


def estimate_flops(model_or_cfg, input_shape=(3, 224, 224)) -> FlopsReport:
    """Analytic MAC count per module for one image of ``input_shape`` (C, H, W)."""
    cfg = model_or_cfg.config if isinstance(model_or_cfg, Model) else model_or_cfg
    C, H, W = input_shape[-3:]
    total_stride = cfg.strides[-1]
    H += -H % total_stride
    W += -W % total_stride
    rows = []
    c_in = C
    for i, spec in enumerate(cfg.stages):
        s = i + 1
        d = spec.feature_dim
        pe = patch_embed_spec(s)
        H, W = pe.out_shape(H, W)
        rows.append((f"stage{s}.patch_embed", conv_macs(pe.kernel_size, c_in, d, 1, H, W)))
        for n in range(1, spec.layer_num + 1):
            if spec.sa_type == "CSA":
                rows.append((f"stage{s}.block{n}.csa", _csa_macs(d, spec.heads, H, W)))
            else:
                depth = cfg.depth_of(i)
                rows.append((f"stage{s}.block{n}.rasa", depth * _asa_macs(d, spec.sr_ratio, H, W, len(spec.dilations))))
            rows.append((f"stage{s}.block{n}.ffn", _ffn_macs(d, spec.mlp_ratio, H, W)))
        c_in = d
    encoder = sum(n for _, n in rows)
    head = cfg.stages[-1].feature_dim * cfg.num_classes
    if head:
        rows.append(("head", head))
    return FlopsReport(rows, encoder, head, tuple(input_shape[-3:]))


def architecture_table(cfg: ModelConfig) -> str:
    """Per-stage architecture summary: attention type, depth, width, heads and ratios."""
    cols = [f"Stage{i + 1}" for i in range(len(cfg.stages))]
    rows = [
        ("SA Type", [s.sa_type for s in cfg.stages]),
        ("SA Kernel", ["3x3" if s.sa_type == "CSA" else "Global" for s in cfg.stages]),
        ("Layer Num.", [s.layer_num for s in cfg.stages]),
        ("Feature Res.", [f"H/{st} x W/{st}" for st in cfg.strides]),
        ("Feature Dim.", [s.feature_dim for s in cfg.stages]),
        ("Heads Num.", [s.heads for s in cfg.stages]),
        ("MLP Ratio", [s.mlp_ratio for s in cfg.stages]),
        ("SR Ratio", [s.sr_ratio if s.sa_type == "RASA" else "-" for s in cfg.stages]),
        ("Recursion", [cfg.depth_of(i) if s.sa_type == "RASA" else "-" for i, s in enumerate(cfg.stages)]),
    ]
    width = 14
    lines = [f"{'Architecture':<14}" + "".join(f"{c:>{width}}" for c in cols)]
    for label, vals in rows:
        lines.append(f"{label:<14}" + "".join(f"{str(v):>{width}}" for v in vals))
    return "\n".join(lines)
