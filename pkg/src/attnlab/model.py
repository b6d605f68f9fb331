"""Toy transformer stack: block-local attention early, normalized linear
attention late, gated feed-forward, pre-norm residuals.

Two wiring variants are supported: "t1" uses ReLU block scores and the elu
feature map in the late layers, "t2" uses softmax block scores and 1+elu.
Forward and backward are fully analytic (no autodiff); weights serialize to
a small binary container.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import grad, linalg
from .attention import AttentionSpec, diag_forward, norm_forward, vanilla_forward
from .dilution import DilutionCurve, dilution_curve, scores_to_distribution
from .linalg import Matrix

VARIANTS = {
    # variant -> (block score fn, late-layer kernel)
    "t1": ("rela", "elu"),
    "t2": ("softmax", "1+elu"),
}

WEIGHTS_MAGIC = b"TNRM"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    n_early: int = 6              # block-attention layers, the rest normalize
    d_model: int = 32
    n_heads: int = 2
    block_size: int = 64
    glu_dim: int = 0              # 0 -> 2 * d_model
    variant: str = "t2"
    epsilon: float = 1e-5
    causal: bool = False
    seed: int = 7
    attention_override: Optional[str] = None  # force "vanilla"/"diag"/"norm" everywhere
    use_positional_embedding: bool = False
    max_len: int = 512

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {tuple(VARIANTS)}")
        if self.n_early > self.n_layers:
            raise ValueError("n_early cannot exceed n_layers")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.glu_dim if self.glu_dim > 0 else 2 * self.d_model

    def layer_mechanism(self, layer_index: int) -> str:
        if self.attention_override is not None:
            return self.attention_override
        return "diag" if layer_index < self.n_early else "norm"

    def attention_spec(self, layer_index: int) -> AttentionSpec:
        score_fn, kernel = VARIANTS[self.variant]
        mech = self.layer_mechanism(layer_index)
        if mech == "diag":
            return AttentionSpec("diag", block_size=self.block_size,
                                 causal=self.causal, diag_score_fn=score_fn)
        if mech == "norm":
            return AttentionSpec("norm", kernel=kernel, causal=self.causal,
                                 epsilon=self.epsilon)
        if mech == "vanilla":
            return AttentionSpec("vanilla", causal=self.causal)
        raise ValueError(f"unsupported layer mechanism {mech!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        return ModelConfig(**json.loads(text))


@dataclass
class LayerParams:
    W_Q: Matrix
    W_K: Matrix
    W_V: Matrix
    W_O: Matrix
    W_g: Matrix
    W_u: Matrix
    W_down: Matrix

    def named(self) -> dict:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O,
                "W_g": self.W_g, "W_u": self.W_u, "W_down": self.W_down}


def init_layer(config: ModelConfig, layer_index: int) -> LayerParams:
    d, f = config.d_model, config.ffn_dim
    std = 1.0 / math.sqrt(d)
    seed = linalg.split_seed(config.seed, layer_index)
    mk = lambda rows, cols, tag: linalg.normal(rows, cols, linalg.split_seed(seed, tag), std=std)
    return LayerParams(
        W_Q=mk(d, d, 1), W_K=mk(d, d, 2), W_V=mk(d, d, 3), W_O=mk(d, d, 4),
        W_g=mk(d, f, 5), W_u=mk(d, f, 6), W_down=mk(f, d, 7),
    )


def init_params(config: ModelConfig) -> list[LayerParams]:
    return [init_layer(config, i) for i in range(config.n_layers)]


def positional_embedding(config: ModelConfig) -> Matrix:
    std = 1.0 / math.sqrt(config.d_model)
    return linalg.normal(config.max_len, config.d_model,
                         linalg.split_seed(config.seed, 999), std=std)


def _sigmoid(z: Matrix) -> Matrix:
    e = np.exp(-np.abs(z))  # never overflows
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _swish(z: Matrix) -> Matrix:
    return z * _sigmoid(z)


def _swish_prime(z: Matrix) -> Matrix:
    sig = _sigmoid(z)
    return sig * (1.0 + z * (1.0 - sig))


def glu_ffn(x: Matrix, params: LayerParams) -> Matrix:
    """(swish(x W_g) * (x W_u)) W_down."""
    a = linalg.matmul(x, params.W_g)
    b = linalg.matmul(x, params.W_u)
    return linalg.matmul(_swish(a) * b, params.W_down)


def glu_ffn_backward(x: Matrix, params: LayerParams, d_out: Matrix):
    """Returns (dx, grads dict for W_g, W_u, W_down)."""
    a = linalg.matmul(x, params.W_g)
    b = linalg.matmul(x, params.W_u)
    g = _swish(a)
    dGB = linalg.matmul(d_out, linalg.transpose(params.W_down))
    dW_down = linalg.matmul(linalg.transpose(g * b), d_out)
    dg = dGB * b
    db = dGB * g
    da = dg * _swish_prime(a)
    dx = linalg.matmul(da, linalg.transpose(params.W_g)) + \
        linalg.matmul(db, linalg.transpose(params.W_u))
    dW_g = linalg.matmul(linalg.transpose(x), da)
    dW_u = linalg.matmul(linalg.transpose(x), db)
    return dx, {"W_g": dW_g, "W_u": dW_u, "W_down": dW_down}


def _heads(m: Matrix, n_heads: int):
    hd = m.shape[1] // n_heads
    return [m[:, h * hd:(h + 1) * hd] for h in range(n_heads)]


def _attention_sublayer(a: Matrix, params: LayerParams, spec: AttentionSpec,
                        config: ModelConfig, collect_P: bool = False):
    """Multi-head attention on the normalized input; per-head slices share
    the mechanism, head outputs concatenate before the output projection."""
    Q = linalg.matmul(a, params.W_Q)
    K = linalg.matmul(a, params.W_K)
    V = linalg.matmul(a, params.W_V)
    outs = []
    Ps = []
    for Qh, Kh, Vh in zip(_heads(Q, config.n_heads), _heads(K, config.n_heads),
                          _heads(V, config.n_heads)):
        if spec.mechanism == "diag":
            res = diag_forward(Qh, Kh, Vh, spec, reference=collect_P)
        elif spec.mechanism == "norm":
            res = norm_forward(Qh, Kh, Vh, spec, reference=collect_P)
        else:
            res = vanilla_forward(Qh, Kh, Vh, spec, reference=collect_P)
        outs.append(res.O)
        if collect_P:
            Ps.append(res.P)
    concat = np.concatenate(outs, axis=1)
    return linalg.matmul(concat, params.W_O), Ps


def layer_forward(x: Matrix, params: LayerParams, layer_index: int,
                  config: ModelConfig, collect_P: bool = False):
    """Pre-norm residual block: attention sublayer then gated feed-forward."""
    if x.shape[1] != config.d_model:
        raise ValueError(f"expected {config.d_model} columns, got {x.shape[1]}")
    spec = config.attention_spec(layer_index)
    a1 = linalg.row_rmsnorm(x, config.epsilon)
    attn, Ps = _attention_sublayer(a1, params, spec, config, collect_P)
    h = x + attn
    a2 = linalg.row_rmsnorm(h, config.epsilon)
    out = h + glu_ffn(a2, params)
    if collect_P:
        return out, Ps
    return out


@dataclass
class ModelDiagnostics:
    per_layer_P: list          # list (layers) of lists (heads) of matrices or None
    dilution_curves: list      # per layer: averaged DilutionCurve or None


def model_forward(x: Matrix, config: ModelConfig,
                  params: Optional[list[LayerParams]] = None,
                  *, collect_diagnostics: bool = False):
    """Run the full stack; optionally collect per-layer attention maps and
    their dilution curves (only heads whose map rows are stochastic get a
    curve: the normalized mechanism's raw scores are reported but skipped)."""
    if params is None:
        params = init_params(config)
    if config.use_positional_embedding and x.shape[0] > 0:
        if x.shape[0] > config.max_len:
            raise ValueError(f"sequence longer than max_len={config.max_len}")
        x = x + positional_embedding(config)[:x.shape[0]]
    diagnostics = ModelDiagnostics(per_layer_P=[], dilution_curves=[])
    for i, p in enumerate(params):
        if collect_diagnostics:
            x, Ps = layer_forward(x, p, i, config, collect_P=True)
            diagnostics.per_layer_P.append(Ps)
            diagnostics.dilution_curves.append(_layer_curve(Ps, config, i))
        else:
            x = layer_forward(x, p, i, config)
    if collect_diagnostics:
        return x, diagnostics
    return x


def _layer_curve(Ps: list, config: ModelConfig, layer_index: int):
    # the normalized mechanism reports raw scores; view them as a
    # distribution by row-normalizing their magnitudes before curving
    if config.layer_mechanism(layer_index) == "norm":
        Ps = [scores_to_distribution(P) for P in Ps]
    curves = [dilution_curve(P) for P in Ps]
    ratios = np.mean([c.ratios for c in curves], axis=0)
    return DilutionCurve(thresholds=curves[0].thresholds, ratios=ratios,
                         n=sum(c.n for c in curves), m=curves[0].m,
                         skipped_rows=sum(c.skipped_rows for c in curves))


# ---------------------------------------------------------------------------
# Analytic layer backward
# ---------------------------------------------------------------------------


def _rmsnorm_input_backward(x: Matrix, d_out: Matrix, eps: float) -> Matrix:
    return grad.rmsnorm_backward(x, d_out, eps)


def _attention_sublayer_backward(a: Matrix, params: LayerParams,
                                 spec: AttentionSpec, config: ModelConfig,
                                 d_out: Matrix):
    Q = linalg.matmul(a, params.W_Q)
    K = linalg.matmul(a, params.W_K)
    V = linalg.matmul(a, params.W_V)
    heads = list(zip(_heads(Q, config.n_heads), _heads(K, config.n_heads),
                     _heads(V, config.n_heads)))
    concat = np.concatenate(
        [_head_forward(Qh, Kh, Vh, spec) for Qh, Kh, Vh in heads], axis=1)
    dW_O = linalg.matmul(linalg.transpose(concat), d_out)
    d_concat = linalg.matmul(d_out, linalg.transpose(params.W_O))
    hd = config.head_dim
    dQ = np.empty_like(Q)
    dK = np.empty_like(K)
    dV = np.empty_like(V)
    for h, (Qh, Kh, Vh) in enumerate(heads):
        dOh = d_concat[:, h * hd:(h + 1) * hd]
        if spec.mechanism == "diag":
            dq, dk, dv = grad.diag_backward(Qh, Kh, Vh, dOh, spec)
        elif spec.mechanism == "norm":
            dq, dk, dv, _ = grad.norm_backward(Qh, Kh, Vh, dOh, spec)
        else:
            dq, dk, dv = grad.vanilla_backward(Qh, Kh, Vh, dOh, spec)
        dQ[:, h * hd:(h + 1) * hd] = dq
        dK[:, h * hd:(h + 1) * hd] = dk
        dV[:, h * hd:(h + 1) * hd] = dv
    da = linalg.matmul(dQ, linalg.transpose(params.W_Q)) + \
        linalg.matmul(dK, linalg.transpose(params.W_K)) + \
        linalg.matmul(dV, linalg.transpose(params.W_V))
    grads = {
        "W_Q": linalg.matmul(linalg.transpose(a), dQ),
        "W_K": linalg.matmul(linalg.transpose(a), dK),
        "W_V": linalg.matmul(linalg.transpose(a), dV),
        "W_O": dW_O,
    }
    return da, grads


def _head_forward(Qh, Kh, Vh, spec: AttentionSpec) -> Matrix:
    if spec.mechanism == "diag":
        return diag_forward(Qh, Kh, Vh, spec).O
    if spec.mechanism == "norm":
        return norm_forward(Qh, Kh, Vh, spec).O
    return vanilla_forward(Qh, Kh, Vh, spec).O


def layer_backward(x: Matrix, params: LayerParams, layer_index: int,
                   config: ModelConfig, d_out: Matrix):
    """Gradient of <G, layer_forward(x)> w.r.t. x and all layer weights."""
    spec = config.attention_spec(layer_index)
    a1 = linalg.row_rmsnorm(x, config.epsilon)
    attn, _ = _attention_sublayer(a1, params, spec, config)
    h = x + attn
    a2 = linalg.row_rmsnorm(h, config.epsilon)

    d_h = d_out.copy()
    d_a2, ffn_grads = glu_ffn_backward(a2, params, d_out)
    d_h += _rmsnorm_input_backward(h, d_a2, config.epsilon)

    d_x = d_h.copy()
    d_a1, attn_grads = _attention_sublayer_backward(a1, params, spec, config, d_h)
    d_x += _rmsnorm_input_backward(x, d_a1, config.epsilon)

    grads = {**attn_grads, **ffn_grads}
    return d_x, grads


# ---------------------------------------------------------------------------
# Weight serialization: magic, version, then name/shape/f64 payload (LE)
# ---------------------------------------------------------------------------


def save_weights(path: str, params: list[LayerParams]) -> None:
    tensors: list[tuple[str, Matrix]] = []
    for i, layer in enumerate(params):
        for name, m in layer.named().items():
            tensors.append((f"layer{i}.{name}", m))
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, m in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", m.ndim))
            for dim in m.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_weights(path: str) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise ValueError("not a weights container (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
        return out


def params_from_tensors(tensors: dict, config: ModelConfig) -> list[LayerParams]:
    params = []
    for i in range(config.n_layers):
        fields = {}
        for name in ("W_Q", "W_K", "W_V", "W_O", "W_g", "W_u", "W_down"):
            key = f"layer{i}.{name}"
            if key not in tensors:
                raise ValueError(f"missing tensor {key!r}")
            fields[name] = tensors[key]
        params.append(LayerParams(**fields))
    return params
