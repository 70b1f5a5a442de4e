"""The seven detectors and two Siamese encoders, plus per-model FLOPs accounting."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .nn import (
    Activation,
    BatchNorm1D,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    LayerCost,
    LayerNorm,
    MaxPool1D,
    Module,
    MultiHeadAttention,
    PositionalEncoding,
    Residual,
    Sequential,
    Tensor,
    euclidean_distance,
    no_grad,
)
from .nn.tensor import concat, take
from .seeds import derive_seed

WINDOW = 2048
CWT_BINS = 96
MIN_TIME = 64
MIN_WIDTH = 8
FLOPS_CONVENTION = ("1 MAC = 2 FLOPs; conv T*Cout*K*Cin MACs; dense in*out MACs per position; "
                    "attention projections + 2*T^2*head_dim*heads MACs, softmax 1 FLOP per score; "
                    "norm, activation, pooling, positional add and residual add 1 FLOP per element; "
                    "dropout free at inference")


class ModelKind(str, Enum):
    CNN = "CNN"
    RESNET = "ResNet"
    TRAN_DEEP_FFN = "TranDeepFFN"
    TRAN_CNN_FFN = "TranCNNFFN"
    FEAT_CNN_TRAN = "FeatCNNTran"
    FEAT_CNN_TRAN_CNN = "FeatCNNTranCNN"
    CWT_FEAT_CNN_TRAN = "CWTFeatCNNTran"
    SIAMESE_TRAN = "SiameseTran"
    SIAMESE_FEAT_CNN_TRAN = "SiameseFeatCNNTran"

    @classmethod
    def parse(cls, text: str) -> "ModelKind":
        key = text.replace("-", "").replace("_", "").lower()
        for k in cls:
            if k.value.lower() == key or k.name.replace("_", "").lower() == key:
                return k
        raise ValueError(f"unknown model kind {text!r}; choose from {', '.join(k.value for k in cls)}")

    @property
    def uses_cwt(self) -> bool:
        return self in (ModelKind.TRAN_DEEP_FFN, ModelKind.TRAN_CNN_FFN, ModelKind.CWT_FEAT_CNN_TRAN,
                        ModelKind.SIAMESE_TRAN)

    @property
    def is_siamese(self) -> bool:
        return self in (ModelKind.SIAMESE_TRAN, ModelKind.SIAMESE_FEAT_CNN_TRAN)


DETECTORS = [k for k in ModelKind if not k.is_siamese]
SIAMESE = [k for k in ModelKind if k.is_siamese]


@dataclass(frozen=True)
class ModelConfig:
    """``scale`` shrinks the time extent and every width; 1.0 is the full-size architecture."""

    scale: float = 1.0
    seed: int = 0
    conv_dropout: float = 0.3
    attn_dropout: float = 0.1
    head_dim_mode: str = "literal"  # "literal": 8 x 48 subspaces; "conventional": d_model / heads
    embed_dim: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.head_dim_mode not in ("literal", "conventional"):
            raise ValueError(f"unknown head_dim_mode {self.head_dim_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.time < MIN_TIME:
            raise ValueError(f"scale {self.scale} gives {self.time} time steps (< {MIN_TIME})")

    @property
    def time(self) -> int:
        return int(round(WINDOW * self.scale))

    def width(self, w: int) -> int:
        """Scaled width, even (sinusoidal encodings need even model dims) and at least 8."""
        return max(MIN_WIDTH, 2 * int(round(w * self.scale / 2)))

    def head_dim(self, d_model: int, heads: int) -> int:
        if self.head_dim_mode == "conventional":
            return max(1, d_model // heads)
        return max(2, int(round(48 * self.scale)))

    def as_dict(self) -> dict:
        return asdict(self)


def input_shape(kind: ModelKind, cfg: ModelConfig = ModelConfig()) -> tuple[int, int]:
    kind = ModelKind(kind)
    return (cfg.time, cfg.width(CWT_BINS) if kind.uses_cwt else 1)


# building blocks

class _Builder:
    def __init__(self, kind: ModelKind, cfg: ModelConfig):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.rng = np.random.default_rng(derive_seed(cfg.seed, "init", kind.value))
        self.drop_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout", kind.value))

    def conv(self, cin, cout, k, act=None, bias=True):
        return Conv1D(cin, cout, k, self.rng, act, self.dtype, bias)

    def dense(self, din, dout, act=None):
        return Dense(din, dout, self.rng, act, self.dtype)

    def bn(self, c):
        return BatchNorm1D(c, dtype=self.dtype)

    def ln(self, d):
        return LayerNorm(d, dtype=self.dtype)

    def drop(self, rate):
        return Dropout(rate, self.drop_rng)

    def conv_stack(self, cin, filters, kernels):
        """Conv(relu) -> BN -> MaxPool(2) -> Dropout per stage."""
        layers = []
        for f, k in zip(filters, kernels):
            layers += [self.conv(cin, f, k, "relu"), self.bn(f), MaxPool1D(2), self.drop(self.cfg.conv_dropout)]
            cin = f
        return layers, cin

    def deep_ffn(self, d):
        r = self.cfg.attn_dropout
        return Sequential(self.dense(d, 4 * d, "gelu"), self.drop(r), self.dense(4 * d, 2 * d, "gelu"),
                          self.drop(r), self.dense(2 * d, d), self.drop(r))

    def plain_ffn(self, d):
        r = self.cfg.attn_dropout
        return Sequential(self.dense(d, 4 * d, "gelu"), self.drop(r), self.dense(4 * d, d), self.drop(r))

    def cnn_ffn(self, d):
        r, w = self.cfg.attn_dropout, self.cfg.width
        return Sequential(
            self.conv(d, w(64), 7, bias=False), self.bn(w(64)), Activation("relu"), self.drop(r),
            self.conv(w(64), w(128), 5, bias=False), self.bn(w(128)), Activation("relu"), self.drop(r),
            self.conv(w(128), d, 3, bias=False), self.bn(d), self.drop(r),
        )

    def encoder_block(self, d, heads, ffn):
        """Pre-norm: x + Drop(MHA(LN(x))), then x + FFN(LN(x))."""
        hd = self.cfg.head_dim(d, heads)
        attn = Sequential(self.ln(d), MultiHeadAttention(d, heads, hd, self.rng, self.dtype),
                          self.drop(self.cfg.attn_dropout))
        return Sequential(Residual(attn), Residual(Sequential(self.ln(d), ffn(d))))

    def encoder(self, d, heads, ffn, blocks=3):
        return [PositionalEncoding(d)] + [self.encoder_block(d, heads, ffn) for _ in range(blocks)] + \
               [self.ln(d), GlobalAvgPool()]

    def head(self, d, out_units=1, out_act="sigmoid"):
        w = self.cfg.width
        return [self.dense(d, w(512), "relu"), self.dense(w(512), w(256), "relu"),
                self.dense(w(256), out_units, out_act)]


def _cnn(b: _Builder, shape):
    w = b.cfg.width
    layers, c = b.conv_stack(shape[1], [w(64), w(128), w(256)], [7, 5, 3])
    t = shape[0] // 8
    return layers + [Flatten(), b.dense(t * c, w(128), "relu"), b.dense(w(128), w(64), "relu"),
                     b.dense(w(64), 1, "sigmoid")]


def _resnet(b: _Builder, shape):
    w = b.cfg.width
    layers, cin = [], shape[1]
    for width in (w(64), w(64), w(128), w(128)):
        # a bias right before batch norm is cancelled by the mean subtraction, so it is left out
        inner = Sequential(b.conv(cin, width, 3, bias=False), b.bn(width), Activation("relu"),
                           b.conv(width, width, 3, bias=False), b.bn(width))
        shortcut = b.conv(cin, width, 1) if cin != width else None
        layers.append(Residual(inner, shortcut, post="relu"))
        cin = width
    return layers + [GlobalAvgPool(), b.dense(cin, 1, "sigmoid")]


def _feat_extractor(b: _Builder, shape, first_kernel):
    w = b.cfg.width
    return b.conv_stack(shape[1], [w(64), w(128), w(256)], [first_kernel, 5, 3])


def _body(kind: ModelKind, b: _Builder, shape) -> list[Module]:
    d_in = shape[1]
    embed = b.cfg.embed_dim
    if kind is ModelKind.CNN:
        return _cnn(b, shape)
    if kind is ModelKind.RESNET:
        return _resnet(b, shape)
    if kind is ModelKind.TRAN_DEEP_FFN:
        return b.encoder(d_in, 8, b.deep_ffn) + b.head(d_in)
    if kind is ModelKind.TRAN_CNN_FFN:
        return b.encoder(d_in, 8, b.cnn_ffn) + b.head(d_in)
    if kind is ModelKind.FEAT_CNN_TRAN:
        ext, d = _feat_extractor(b, shape, 13)
        return ext + b.encoder(d, 8, b.deep_ffn) + b.head(d)
    if kind is ModelKind.FEAT_CNN_TRAN_CNN:
        ext, d = _feat_extractor(b, shape, 7)
        return ext + b.encoder(d, 8, b.cnn_ffn) + b.head(d)
    if kind is ModelKind.CWT_FEAT_CNN_TRAN:
        ext, d = _feat_extractor(b, shape, 7)
        return ext + b.encoder(d, 8, b.plain_ffn) + b.head(d)
    if kind is ModelKind.SIAMESE_TRAN:
        return b.encoder(d_in, 4, b.deep_ffn) + b.head(d_in, embed, None)
    if kind is ModelKind.SIAMESE_FEAT_CNN_TRAN:
        ext, d = _feat_extractor(b, shape, 13)
        return ext + b.encoder(d, 8, b.deep_ffn) + b.head(d, embed, None)
    raise ValueError(kind)


class Model(Module):
    """A detector (one sigmoid output) or a Siamese branch (embedding); the body is shared."""

    def __init__(self, kind: ModelKind, cfg: ModelConfig):
        self.kind_id = ModelKind(kind)
        self.cfg = cfg
        self.input_shape = input_shape(self.kind_id, cfg)
        b = _Builder(self.kind_id, cfg)
        self.body = Sequential(*_body(self.kind_id, b, self.input_shape))
        out = self.body.output_shape(self.input_shape)  # raises on wiring errors
        want = (cfg.embed_dim,) if self.kind_id.is_siamese else (1,)
        if tuple(out) != want:
            raise ValueError(f"{self.kind_id.value} produces {out}, expected {want}")

    @property
    def kind(self) -> str:  # type: ignore[override]
        return self.kind_id.value

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.cfg.dtype)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 3 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"{self.kind} expects (batch, {self.input_shape[0]}, {self.input_shape[1]}), "
                             f"got {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return self.body(x)

    def cost(self, shape=None, name=""):
        return self.body.cost(tuple(shape or self.input_shape), name)

    def output_shape(self, shape=None):
        return self.body.output_shape(tuple(shape or self.input_shape))


def build(kind: ModelKind | str, cfg: ModelConfig = ModelConfig()) -> Model:
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    return Model(kind, cfg)


def _batch(model: Model, x) -> Tensor:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr.astype(model.dtype, copy=False))


def _infer(model: Model, x, batch_size: int) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        xb = _batch(model, x)
        with no_grad():
            outs = [model(Tensor(xb.data[i:i + batch_size])).data for i in range(0, xb.shape[0], batch_size)]
    finally:
        model.train(was)
    return np.concatenate(outs, axis=0)


def predict(model: Model, x, batch_size: int = 64) -> np.ndarray:
    """Tamper probabilities, one per item, in inference mode."""
    if model.kind_id.is_siamese:
        raise ValueError("predict expects a detector; use embed for Siamese encoders")
    return _infer(model, x, batch_size)[:, 0]


def embed(model: Model, x, batch_size: int = 64) -> np.ndarray:
    if not model.kind_id.is_siamese:
        raise ValueError("embed expects a Siamese encoder")
    return _infer(model, x, batch_size)


def pair_distance(model: Model, a: Tensor, b: Tensor) -> Tensor:
    """Both branches in one forward pass through the single shared parameter set."""
    n = a.shape[0]
    z = model(concat([a, b], axis=0))
    return euclidean_distance(take(z, np.arange(n), axis=0), take(z, np.arange(n, 2 * n), axis=0))


def verify(model: Model, seg_a, seg_b, threshold: float) -> tuple[bool, float]:
    """(same, distance): same iff the embedding distance is below ``threshold``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    za, zb = embed(model, seg_a), embed(model, seg_b)
    dist = float(np.sqrt(np.sum((za[0].astype(np.float64) - zb[0]) ** 2)))
    return dist < threshold, dist


# cost accounting

@dataclass(frozen=True)
class FlopsReport:
    kind: str
    scale: float
    input_shape: tuple[int, int]
    layers: tuple[LayerCost, ...]
    convention: str = FLOPS_CONVENTION
    per_branch: bool = False

    @property
    def total_macs(self) -> int:
        return sum(c.macs for c in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.layers)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scale": self.scale,
            "input_shape": list(self.input_shape),
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "per_branch": self.per_branch,
            "convention": self.convention,
            "layers": [{"name": c.name, "kind": c.kind, "macs": c.macs, "elementwise": c.elementwise,
                        "flops": c.flops, "output_shape": list(c.output_shape)} for c in self.layers],
        }


def flops(model: Model) -> FlopsReport:
    """Analytic forward-pass cost of one item (one branch for Siamese encoders)."""
    return FlopsReport(model.kind, model.cfg.scale, model.input_shape, tuple(model.cost()),
                       per_branch=model.kind_id.is_siamese)


def flops_for(kind: ModelKind | str, scale: float = 1.0, head_dim_mode: str = "literal") -> FlopsReport:
    return flops(build(kind, ModelConfig(scale=scale, head_dim_mode=head_dim_mode)))


def layer_summary(module: Module) -> list[str]:
    """Flat, human-readable list of the leaf layers in forward order."""
    out: list[str] = []

    def walk(m):
        if isinstance(m, Model):
            walk(m.body)
        elif isinstance(m, Sequential):
            for layer in m.layers:
                walk(layer)
        elif isinstance(m, Residual):
            out.append("Residual[")
            walk(m.inner)
            if m.shortcut is not None:
                out.append("Shortcut[")
                walk(m.shortcut)
                out.append("]")
            out.append(f"]{'+' + m.post if m.post else ''}")
        elif isinstance(m, Conv1D):
            out.append(f"Conv({m.ch_out},k{m.kernel}{',' + m.activation if m.activation else ''})")
        elif isinstance(m, Dense):
            out.append(f"Dense{m.d_out}{'(' + m.activation + ')' if m.activation else ''}")
        elif isinstance(m, BatchNorm1D):
            out.append("BN")
        elif isinstance(m, MaxPool1D):
            out.append("Pool")
        elif isinstance(m, Dropout):
            out.append("Drop")
        elif isinstance(m, Flatten):
            out.append("Flatten")
        elif isinstance(m, LayerNorm):
            out.append("LN")
        elif isinstance(m, MultiHeadAttention):
            out.append(f"MHA({m.heads}x{m.head_dim})")
        elif isinstance(m, PositionalEncoding):
            out.append("PE")
        elif isinstance(m, GlobalAvgPool):
            out.append("GAP")
        elif isinstance(m, Activation):
            out.append(m.fn.capitalize() if m.fn != "relu" else "ReLU")
        else:
            out.append(type(m).__name__)

    walk(module)
    return out


def count_by_kind(scale: float) -> dict[str, int]:
    return {k.value: build(k, ModelConfig(scale=scale)).num_parameters() for k in ModelKind}


__all__ = [
    "ModelKind", "ModelConfig", "Model", "FlopsReport", "DETECTORS", "SIAMESE", "build", "predict", "embed",
    "verify", "pair_distance", "flops", "flops_for", "input_shape", "layer_summary", "FLOPS_CONVENTION",
    "WINDOW", "CWT_BINS", "count_by_kind",
]


# numerical gradient gate

GRADCHECK_SCALE = 0.035


def gradcheck_model(kind: ModelKind | str, scale: float = GRADCHECK_SCALE, seed: int = 0, batch: int = 1,
                    eps: float = 1e-4, corrupt: bool = False) -> GradcheckResult:
    """Reverse-mode vs central differences over every parameter of a freshly built model.

    64-bit, dropout disabled, batch norm in training mode, zero-mean normal
    inputs. Detectors use BCE. Siamese encoders use the contrastive loss on
    ``batch`` positive pairs plus a fixed random linear probe of the
    embeddings: the pair distance is blind to any shift shared by both
    embeddings, so without the probe every such additive parameter would
    have an exactly zero gradient and the check would only see roundoff.
    Parameters of top-level layer i are perturbed with the layer's input held
    fixed, which is exact because nothing upstream depends on them.
    """
    from .nn import bce_loss, contrastive_loss
    from .nn.gradcheck import analytic_gradients, checked_error

    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    cfg = ModelConfig(scale=scale, seed=seed, conv_dropout=0.0, attn_dropout=0.0, dtype="float64")
    model = build(kind, cfg)
    model.train()
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", kind.value))
    n_items = 2 * batch if kind.is_siamese else batch
    x = Tensor(rng.standard_normal((n_items, *model.input_shape)))

    if kind.is_siamese:
        same = np.ones(batch)
        probe = rng.standard_normal((n_items, cfg.embed_dim)) / cfg.embed_dim

        def head_loss(z):
            a, b = take(z, np.arange(batch), axis=0), take(z, np.arange(batch, 2 * batch), axis=0)
            return contrastive_loss(euclidean_distance(a, b), same, margin=1.0) + (z * probe).sum()
    else:
        y = (np.arange(batch) % 2).astype(np.float64)[:, None]

        def head_loss(z):
            return bce_loss(z, y)

    layers = model.body.layers
    params = model.parameters()
    analytic = dict(zip(map(id, params), analytic_gradients(lambda: head_loss(model(x)), params)))
    if corrupt:
        analytic[id(params[0])].flat[0] += 1.0

    worst, worst_name = 0.0, ""
    h = x
    for i, layer in enumerate(layers):
        named = list(layer.named_parameters(f"body.layers.{i}."))
        if named:
            tail, h_in = Sequential(*layers[i:]), h

            def partial_loss(tail=tail, h_in=h_in):
                return head_loss(tail(h_in))

            for name, p in named:
                err = checked_error(partial_loss, p, analytic[id(p)], eps)
                if err > worst:
                    worst, worst_name = err, name
        with no_grad():
            h = layer(h)
    return GradcheckResult(kind.value, worst, worst_name, model.num_parameters(), scale)


@dataclass(frozen=True)
class GradcheckResult:
    kind: str
    max_rel_error: float
    worst_parameter: str
    n_parameters: int
    scale: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4
