"""Trainable encoder top: pre-norm transformer blocks over cached trunk
activations, a final layer norm, token pooling, and a linear projection into
the joint embedding space.

The frozen lower layers of the dual encoder are consumed as precomputed token
activations (see :mod:`hlkit.data`); only the tensors held in an
:class:`EncoderTopParams` are trainable. Gradients are hand-derived
reverse-mode and exact, which the test suite verifies coordinate by
coordinate against central finite differences.

Block order is pre-norm (LN -> attention -> residual, LN -> MLP -> residual),
attention is multi-head scaled dot-product with softmax over key positions
and biases on all four projections, matching the ViT-B/32 dual-encoder
family. The text tower runs with a causal mask, the vision tower without.
"""

import io
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    CheckpointShapeError,
    ConfigError,
    CorruptHeaderError,
    ShapeError,
    TruncatedFileError,
)
from .tensor import DTYPE, gelu_fast, gelu_fast_grad, softmax_rows
from .validation import check_finite, check_matrix

LN_EPS = 1e-5
# Additive mask value for causal attention. Large enough that the masked
# probabilities underflow to exactly 0 in both float32 and float64.
MASK_VALUE = -1e9


@dataclass(frozen=True)
class TransformerTopConfig:
    """Dimensions of one trainable encoder top."""

    model_dim: int
    num_heads: int
    mlp_dim: int
    num_layers: int
    joint_dim: int
    seq_len_max: int
    causal: bool = False

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.joint_dim < 1:
            raise ConfigError("joint_dim must be >= 1")
        if self.seq_len_max < 1:
            raise ConfigError("seq_len_max must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class ActivationSequence:
    """Token-level hidden states entering the trainable top for one item.

    ``pool_index`` is the token position whose post-norm state is projected:
    0 for the vision class token, the end-of-text position for queries.
    """

    item_id: str
    tokens: np.ndarray  # (num_tokens, model_dim)
    pool_index: int

    def __post_init__(self):
        self.tokens = check_matrix(self.tokens, f"tokens of {self.item_id!r}")
        if not 0 <= self.pool_index < self.tokens.shape[0]:
            raise ShapeError(
                f"pool_index {self.pool_index} out of range for "
                f"{self.tokens.shape[0]} tokens (item {self.item_id!r})"
            )

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


# Trainable parameters are a plain name -> array mapping in a canonical
# insertion order; that order is also the checkpoint payload order.
ParamDict = dict


def param_shapes(config: TransformerTopConfig) -> dict:
    """Canonical tensor directory for one tower: name -> shape."""
    d, m, e = config.model_dim, config.mlp_dim, config.joint_dim
    shapes: dict = {}
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.w_{proj}"] = (d, d)
            shapes[p + f"attn.b_{proj}"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.w1"] = (d, m)
        shapes[p + "mlp.b1"] = (m,)
        shapes[p + "mlp.w2"] = (m, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["final.ln.gain"] = (d,)
    shapes["final.ln.bias"] = (d,)
    shapes["final.proj"] = (d, e)
    return shapes


def init_params(config: TransformerTopConfig, seed: int, dtype=DTYPE) -> ParamDict:
    """Fresh parameters, deterministic in ``seed``.

    Weight matrices are drawn from a centered uniform with scale
    ``1/sqrt(fan_in)``; layer-norm gains are 1 and all biases 0.
    """
    rng = np.random.default_rng(seed)
    params: ParamDict = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            scale = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-scale, scale, size=shape).astype(dtype)
    return params


def zeros_like_params(params: ParamDict) -> ParamDict:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def _check_sequence(config: TransformerTopConfig, seq: ActivationSequence) -> None:
    if seq.tokens.shape[1] != config.model_dim:
        raise ShapeError(
            f"sequence {seq.item_id!r} has token width {seq.tokens.shape[1]}, "
            f"encoder expects {config.model_dim}"
        )
    if seq.num_tokens > config.seq_len_max:
        raise ShapeError(
            f"sequence {seq.item_id!r} has {seq.num_tokens} tokens, "
            f"encoder allows at most {config.seq_len_max}"
        )


def _causal_mask(num_tokens: int, dtype) -> np.ndarray:
    mask = np.zeros((num_tokens, num_tokens), dtype=dtype)
    mask[np.triu_indices(num_tokens, k=1)] = MASK_VALUE
    return mask


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, num_heads, d // num_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _ln_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized activations and inverse std; shared by forward and backward."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    return (x - mean) * inv_std, inv_std


def _ln_backward(d_out, xhat, inv_std, gain):
    """Gradients of y = gain * xhat + bias w.r.t. gain, bias and x."""
    axes = tuple(range(d_out.ndim - 1))
    d_gain = (d_out * xhat).sum(axis=axes)
    d_bias = d_out.sum(axis=axes)
    d_xhat = d_out * gain
    width = xhat.shape[-1]
    d_x = inv_std * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - xhat * (d_xhat * xhat).sum(axis=-1, keepdims=True) / width
    )
    return d_gain, d_bias, d_x


def encode_top_with_cache(
    params: ParamDict, config: TransformerTopConfig, seq: ActivationSequence
) -> tuple[np.ndarray, dict]:
    """Forward pass returning the joint-space embedding and all
    intermediates needed by :func:`encode_top_backward`."""
    _check_sequence(config, seq)
    x = seq.tokens
    t = seq.num_tokens
    scale = 1.0 / math.sqrt(config.head_dim)
    mask = _causal_mask(t, x.dtype) if config.causal else None

    cache: dict = {"layers": []}
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        lc: dict = {"x_in": x}

        xhat1, inv1 = _ln_stats(x)
        a = params[p + "ln1.gain"] * xhat1 + params[p + "ln1.bias"]
        lc.update(xhat1=xhat1, inv1=inv1, a=a)

        q = a @ params[p + "attn.w_q"] + params[p + "attn.b_q"]
        k = a @ params[p + "attn.w_k"] + params[p + "attn.b_k"]
        v = a @ params[p + "attn.w_v"] + params[p + "attn.b_v"]
        qh = _split_heads(q, config.num_heads)
        kh = _split_heads(k, config.num_heads)
        vh = _split_heads(v, config.num_heads)
        scores = qh @ kh.transpose(0, 2, 1) * scale
        if mask is not None:
            scores = scores + mask
        probs = softmax_rows(scores)
        oh = probs @ vh
        o = _merge_heads(oh)
        attn = o @ params[p + "attn.w_o"] + params[p + "attn.b_o"]
        x = x + attn
        lc.update(qh=qh, kh=kh, vh=vh, probs=probs, o=o, x_mid=x)

        xhat2, inv2 = _ln_stats(x)
        b = params[p + "ln2.gain"] * xhat2 + params[p + "ln2.bias"]
        h_pre = b @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        h = gelu_fast(h_pre)
        x = x + h @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        lc.update(xhat2=xhat2, inv2=inv2, b=b, h_pre=h_pre, h=h)
        cache["layers"].append(lc)

    pooled = x[seq.pool_index]
    xhat_f, inv_f = _ln_stats(pooled)
    u = params["final.ln.gain"] * xhat_f + params["final.ln.bias"]
    embedding = u @ params["final.proj"]
    cache.update(x_out=x, xhat_f=xhat_f, inv_f=inv_f, u=u)
    return embedding, cache


def encode_top(
    params: ParamDict, config: TransformerTopConfig, seq: ActivationSequence
) -> np.ndarray:
    """Joint-space embedding for one activation sequence."""
    embedding, _ = encode_top_with_cache(params, config, seq)
    return check_finite(embedding, f"embedding of {seq.item_id!r}")


def encode_top_backward(
    params: ParamDict,
    config: TransformerTopConfig,
    seq: ActivationSequence,
    grad_embedding: np.ndarray,
    cache: dict | None = None,
) -> ParamDict:
    """Exact gradients of ``<encode_top(...), grad_embedding>`` with respect
    to every trainable tensor.

    ``cache`` may carry the intermediates of a previous
    :func:`encode_top_with_cache` call for the same inputs; otherwise the
    forward pass is recomputed. Accumulation across sequences is the
    caller's responsibility.
    """
    if cache is None:
        _, cache = encode_top_with_cache(params, config, seq)
    grad_embedding = np.asarray(grad_embedding)
    if grad_embedding.shape != (config.joint_dim,):
        raise ShapeError(
            f"grad_embedding has shape {grad_embedding.shape}, expected ({config.joint_dim},)"
        )

    grads = {name: None for name in params}
    scale = 1.0 / math.sqrt(config.head_dim)

    grads["final.proj"] = np.outer(cache["u"], grad_embedding)
    d_u = params["final.proj"] @ grad_embedding
    d_gain_f, d_bias_f, d_pooled = _ln_backward(
        d_u, cache["xhat_f"], cache["inv_f"], params["final.ln.gain"]
    )
    grads["final.ln.gain"] = d_gain_f
    grads["final.ln.bias"] = d_bias_f

    d_x = np.zeros_like(cache["x_out"])
    d_x[seq.pool_index] = d_pooled

    for layer in reversed(range(config.num_layers)):
        p = f"layers.{layer}."
        lc = cache["layers"][layer]

        # MLP branch: x = x_mid + gelu(LN2(x_mid) @ w1 + b1) @ w2 + b2
        d_mlp_out = d_x
        grads[p + "mlp.w2"] = lc["h"].T @ d_mlp_out
        grads[p + "mlp.b2"] = d_mlp_out.sum(axis=0)
        d_h = d_mlp_out @ params[p + "mlp.w2"].T
        d_h_pre = d_h * gelu_fast_grad(lc["h_pre"])
        grads[p + "mlp.w1"] = lc["b"].T @ d_h_pre
        grads[p + "mlp.b1"] = d_h_pre.sum(axis=0)
        d_b = d_h_pre @ params[p + "mlp.w1"].T
        d_gain2, d_bias2, d_x_ln2 = _ln_backward(
            d_b, lc["xhat2"], lc["inv2"], params[p + "ln2.gain"]
        )
        grads[p + "ln2.gain"] = d_gain2
        grads[p + "ln2.bias"] = d_bias2
        d_x = d_x + d_x_ln2

        # Attention branch: x_mid = x_in + Attn(LN1(x_in))
        d_attn = d_x
        grads[p + "attn.w_o"] = lc["o"].T @ d_attn
        grads[p + "attn.b_o"] = d_attn.sum(axis=0)
        d_o = d_attn @ params[p + "attn.w_o"].T
        d_oh = _split_heads(d_o, config.num_heads)
        d_probs = d_oh @ lc["vh"].transpose(0, 2, 1)
        d_vh = lc["probs"].transpose(0, 2, 1) @ d_oh
        probs = lc["probs"]
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        d_qh = d_scores @ lc["kh"] * scale
        d_kh = d_scores.transpose(0, 2, 1) @ lc["qh"] * scale
        d_q = _merge_heads(d_qh)
        d_k = _merge_heads(d_kh)
        d_v = _merge_heads(d_vh)
        a = lc["a"]
        d_a = np.zeros_like(a)
        for proj, d_proj in (("q", d_q), ("k", d_k), ("v", d_v)):
            grads[p + f"attn.w_{proj}"] = a.T @ d_proj
            grads[p + f"attn.b_{proj}"] = d_proj.sum(axis=0)
            d_a += d_proj @ params[p + f"attn.w_{proj}"].T
        d_gain1, d_bias1, d_x_ln1 = _ln_backward(
            d_a, lc["xhat1"], lc["inv1"], params[p + "ln1.gain"]
        )
        grads[p + "ln1.gain"] = d_gain1
        grads[p + "ln1.bias"] = d_bias1
        d_x = d_x + d_x_ln1

    return grads


# ---------------------------------------------------------------------------
# Checkpoint file format "HLCK"
#
#   magic "HLCK" | version u32 LE | header byte length u32 LE |
#   UTF-8 header (key=value lines) | float32 LE payload
#
# Header keys: step, vision.<config field>, text.<config field>, and one
# "tensor=<side>.<name>:<rows>:<cols>:<offset>" line per tensor, in payload
# order. Offsets are relative to the start of the payload. 1-D tensors are
# stored with rows=1.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HLCK"
CHECKPOINT_VERSION = 1

_CONFIG_FIELDS = (
    "model_dim",
    "num_heads",
    "mlp_dim",
    "num_layers",
    "joint_dim",
    "seq_len_max",
    "causal",
)


@dataclass
class CheckpointBundle:
    params_vision: ParamDict
    params_text: ParamDict
    config_vision: TransformerTopConfig
    config_text: TransformerTopConfig
    step: int


def _config_lines(prefix: str, config: TransformerTopConfig) -> list[str]:
    lines = []
    for field in _CONFIG_FIELDS:
        value = getattr(config, field)
        lines.append(f"{prefix}.{field}={int(value)}")
    return lines


def checkpoint_save(
    path,
    params_vision: ParamDict,
    params_text: ParamDict,
    config_vision: TransformerTopConfig,
    config_text: TransformerTopConfig,
    step: int,
) -> None:
    lines = [f"step={int(step)}"]
    lines += _config_lines("vision", config_vision)
    lines += _config_lines("text", config_text)

    payload = io.BytesIO()
    offset = 0
    for side, params in (("vision", params_vision), ("text", params_text)):
        for name, arr in params.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            rows, cols = (1, a.shape[0]) if a.ndim == 1 else a.shape
            lines.append(f"tensor={side}.{name}:{rows}:{cols}:{offset}")
            payload.write(a.tobytes())
            offset += a.nbytes
    header = ("\n".join(lines) + "\n").encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def _parse_config(kv: dict, prefix: str, path) -> TransformerTopConfig:
    values = {}
    for field in _CONFIG_FIELDS:
        key = f"{prefix}.{field}"
        if key not in kv:
            raise CorruptHeaderError(f"{path}: header is missing {key!r}")
        try:
            values[field] = int(kv[key])
        except ValueError as exc:
            raise CorruptHeaderError(f"{path}: malformed value for {key!r}") from exc
    values["causal"] = bool(values["causal"])
    try:
        return TransformerTopConfig(**values)
    except ConfigError as exc:
        raise CorruptHeaderError(f"{path}: invalid {prefix} config: {exc}") from exc


def checkpoint_load(path, expect: tuple | None = None) -> CheckpointBundle:
    """Load a checkpoint written by :func:`checkpoint_save`.

    ``expect`` optionally pins ``(config_vision, config_text)``; a checkpoint
    whose tensors do not match those dimensions is rejected with the first
    mismatching tensor named.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: too short to hold a checkpoint header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + header_len:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = blob[12 : 12 + header_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptHeaderError(f"{path}: header is not valid UTF-8") from exc
    payload = blob[12 + header_len :]

    kv: dict = {}
    directory: list[tuple[str, int, int, int]] = []
    for line in header.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptHeaderError(f"{path}: malformed header line {line!r}")
        if key == "tensor":
            parts = value.rsplit(":", 3)
            try:
                entry = (parts[0], int(parts[1]), int(parts[2]), int(parts[3]))
            except (IndexError, ValueError) as exc:
                raise CorruptHeaderError(f"{path}: malformed tensor entry {value!r}") from exc
            directory.append(entry)
        else:
            kv[key] = value

    if "step" not in kv:
        raise CorruptHeaderError(f"{path}: header is missing 'step'")
    try:
        step = int(kv["step"])
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: malformed step {kv['step']!r}") from exc
    config_vision = _parse_config(kv, "vision", path)
    config_text = _parse_config(kv, "text", path)
    if expect is not None:
        expect_vision, expect_text = expect
    else:
        expect_vision, expect_text = config_vision, config_text

    expected_shapes = {}
    for side, config in (("vision", expect_vision), ("text", expect_text)):
        for name, shape in param_shapes(config).items():
            rows, cols = (1, shape[0]) if len(shape) == 1 else shape
            expected_shapes[f"{side}.{name}"] = (rows, cols)

    seen = set()
    sides: dict = {"vision": {}, "text": {}}
    for full_name, rows, cols, offset in directory:
        if full_name in seen:
            raise CorruptHeaderError(f"{path}: duplicate tensor {full_name!r}")
        seen.add(full_name)
        if full_name not in expected_shapes:
            raise CheckpointShapeError(full_name, ("absent",), (rows, cols))
        if (rows, cols) != expected_shapes[full_name]:
            raise CheckpointShapeError(full_name, expected_shapes[full_name], (rows, cols))
        nbytes = rows * cols * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise TruncatedFileError(
                f"{path}: tensor {full_name!r} extends past end of file"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=offset)
        side, _, name = full_name.partition(".")
        shape = param_shapes(expect_vision if side == "vision" else expect_text)[name]
        sides[side][name] = arr.reshape(shape).copy()

    for side, config in (("vision", expect_vision), ("text", expect_text)):
        for name in param_shapes(config):
            if name not in sides[side]:
                raise CheckpointShapeError(f"{side}.{name}", param_shapes(config)[name], ("missing",))

    return CheckpointBundle(
        params_vision=sides["vision"],
        params_text=sides["text"],
        config_vision=config_vision,
        config_text=config_text,
        step=step,
    )


def make_tower_configs(
    model_dim: int,
    num_heads: int,
    mlp_dim: int,
    num_layers: int,
    joint_dim: int,
    seq_len_max: int,
) -> tuple[TransformerTopConfig, TransformerTopConfig]:
    """Vision (non-causal) and text (causal) tower configs with shared dims."""
    vision = TransformerTopConfig(
        model_dim=model_dim,
        num_heads=num_heads,
        mlp_dim=mlp_dim,
        num_layers=num_layers,
        joint_dim=joint_dim,
        seq_len_max=seq_len_max,
        causal=False,
    )
    return vision, replace(vision, causal=True)
