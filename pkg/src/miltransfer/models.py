"""MIL aggregator families: construction, forward evaluation, and analytic
gradients.

Five architectures over a shared pre-attention FC stack:

* ``mean`` / ``max``  -- linear + ReLU per instance, non-parametric pooling
* ``abmil``           -- gated attention pooling
* ``auxmil``          -- abmil plus a per-instance auxiliary head
* ``transformer``     -- class-token set transformer (pre-norm, no
  positional encoding)

Parameters are plain dicts of numpy arrays keyed by a canonical layer-name
schema (``fc.{i}.weight`` ...), which checkpointing, layer reset and the
activation tooling all rely on.  Gradients are hand-derived; the
finite-difference suite in the tests is the correctness oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError

ARCHS = ("mean", "max", "abmil", "transformer", "auxmil")
N_HEADS = 8
LN_EPS = 1e-5
AUX_TOPK = 8  # instances pseudo-labeled per side of the auxiliary loss

ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    in_dim: int
    embed_dim: int
    n_classes: int
    attn_dim: int | None = None
    fc_hidden_dims: tuple[int, ...] = ()
    n_layers: int | None = None
    encoder_hidden_dim: int | None = None
    dropout_ff: float = 0.25
    dropout_input: float = 0.1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        object.__setattr__(self, "fc_hidden_dims", tuple(int(h) for h in self.fc_hidden_dims))
        for name in ("in_dim", "embed_dim", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if any(h < 1 for h in self.fc_hidden_dims):
            raise ConfigError("fc_hidden_dims must be positive")
        needs_attn = self.arch in ("abmil", "auxmil")
        if needs_attn and (self.attn_dim is None or self.attn_dim < 1):
            raise ConfigError(f"{self.arch} requires a positive attn_dim")
        if not needs_attn and self.attn_dim is not None:
            raise ConfigError(f"{self.arch} does not take attn_dim")
        if self.arch == "transformer":
            if self.n_layers is None or self.n_layers < 1:
                raise ConfigError("transformer requires n_layers >= 1")
            if self.embed_dim % N_HEADS != 0:
                raise ConfigError(f"embed_dim must be divisible by {N_HEADS} heads")
            if self.encoder_hidden_dim is not None and self.encoder_hidden_dim < 1:
                raise ConfigError("encoder_hidden_dim must be positive")
        else:
            if self.n_layers is not None or self.encoder_hidden_dim is not None:
                raise ConfigError(f"{self.arch} does not take transformer fields")
        for name in ("dropout_ff", "dropout_input"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")

    def fc_dims(self) -> list[int]:
        return [self.in_dim, *self.fc_hidden_dims, self.embed_dim]

    def retarget(self, n_classes: int) -> "ModelConfig":
        return replace(self, n_classes=n_classes)


@dataclass
class ForwardOutput:
    logits: np.ndarray      # (n_classes,)
    embedding: np.ndarray   # (embed_dim,) pooled pre-classifier representation
    attention: np.ndarray   # (n_instances,) nonnegative, sums to 1
    aux_logits: np.ndarray | None = None  # (n_instances, n_classes + 1), auxmil only


# ---------------------------------------------------------------------------
# schema / construction
# ---------------------------------------------------------------------------

def param_schema(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical ordered (name, shape) table for an architecture."""
    dims = cfg.fc_dims()
    schema: list[tuple[str, tuple[int, ...]]] = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        schema.append((f"fc.{i}.weight", (b, a)))
        schema.append((f"fc.{i}.bias", (b,)))
    e = cfg.embed_dim
    if cfg.arch in ("abmil", "auxmil"):
        d = cfg.attn_dim
        schema += [
            ("attn.V.weight", (d, e)), ("attn.V.bias", (d,)),
            ("attn.U.weight", (d, e)), ("attn.U.bias", (d,)),
            ("attn.w.weight", (1, d)), ("attn.w.bias", (1,)),
        ]
    elif cfg.arch == "transformer":
        schema.append(("cls_token", (e,)))
        for i in range(cfg.n_layers):
            schema += [
                (f"tx.{i}.norm1.weight", (e,)), (f"tx.{i}.norm1.bias", (e,)),
                (f"tx.{i}.qkv.weight", (3 * e, e)), (f"tx.{i}.qkv.bias", (3 * e,)),
                (f"tx.{i}.proj.weight", (e, e)), (f"tx.{i}.proj.bias", (e,)),
            ]
            if cfg.encoder_hidden_dim is not None:
                h = cfg.encoder_hidden_dim
                schema += [
                    (f"tx.{i}.norm2.weight", (e,)), (f"tx.{i}.norm2.bias", (e,)),
                    (f"tx.{i}.ff1.weight", (h, e)), (f"tx.{i}.ff1.bias", (h,)),
                    (f"tx.{i}.ff2.weight", (e, h)), (f"tx.{i}.ff2.bias", (e,)),
                ]
    schema += [("classifier.weight", (cfg.n_classes, e)), ("classifier.bias", (cfg.n_classes,))]
    if cfg.arch == "auxmil":
        schema += [("aux.head.weight", (cfg.n_classes + 1, e)),
                   ("aux.head.bias", (cfg.n_classes + 1,))]
    return schema


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_schema(cfg))


def _truncated_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """N(0, 2/fan_in) truncated at two standard deviations."""
    sigma = math.sqrt(2.0 / fan_in)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * sigma).astype(dtype)


def init_layer(rng: np.random.Generator, name: str, shape: tuple[int, ...],
               dtype=np.float32) -> np.ndarray:
    if name.endswith(".bias") or ".norm" in name and name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    if ".norm" in name and name.endswith(".weight"):
        return np.ones(shape, dtype=dtype)
    # weights and the class token draw from the truncated normal
    fan_in = shape[-1]
    return _truncated_normal(rng, shape, fan_in, dtype)


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Freshly initialized parameters, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return {name: init_layer(rng, name, shape, dtype) for name, shape in param_schema(cfg)}


def zeros_like_params(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: ModelParams) -> ModelParams:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# numerics helpers
# ---------------------------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Scalar CE loss and its gradient w.r.t. the logits."""
    p = softmax(logits)
    loss = -float(log_softmax(logits)[label])
    grad = p.copy()
    grad[label] -= 1.0
    return loss, grad


def aux_instance_targets(attention: np.ndarray, label: int,
                         n_classes: int) -> list[tuple[int, int]]:
    """(instance, pseudo-label) pairs for the auxiliary loss: the top-k
    attended instances take the bag label, the bottom-k take the extra
    "other" class (index ``n_classes``).  k = min(8, n)."""
    n = attention.shape[0]
    k = min(AUX_TOPK, n)
    order = np.argsort(attention, kind="stable")
    pairs = [(int(i), label) for i in order[-k:]]
    pairs += [(int(i), n_classes) for i in order[:k]]
    return pairs


def aux_loss(aux_logits: np.ndarray, attention: np.ndarray, label: int,
             n_classes: int) -> tuple[float, np.ndarray]:
    """Mean instance CE over the pseudo-labeled set, plus its gradient
    w.r.t. ``aux_logits``.  Selection is treated as constant."""
    pairs = aux_instance_targets(attention, label, n_classes)
    g = np.zeros_like(aux_logits)
    total = 0.0
    for i, target in pairs:
        li, gi = cross_entropy(aux_logits[i], target)
        total += li
        g[i] += gi
    scale = 1.0 / len(pairs)
    return total * scale, g * scale


def _dropout(rng: np.random.Generator, x: np.ndarray, rate: float):
    """Inverted dropout; returns (output, mask) with mask already scaled."""
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    mask = mask.astype(x.dtype)
    return x * mask, mask


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _fc_forward(params, cfg, x, rng):
    """Shared pre-attention stack: (linear, ReLU, dropout) per layer."""
    cache = []
    a = x
    n_layers = len(cfg.fc_dims()) - 1
    for i in range(n_layers):
        w, b = params[f"fc.{i}.weight"], params[f"fc.{i}.bias"]
        z = a @ w.T + b
        relu_mask = z > 0
        out = z * relu_mask
        drop = None
        if rng is not None and cfg.dropout_ff > 0:
            out, drop = _dropout(rng, out, cfg.dropout_ff)
        cache.append({"inp": a, "relu_mask": relu_mask, "drop": drop})
        a = out
    return a, cache


def _fc_backward(g, fc_cache, params, grads):
    for i in reversed(range(len(fc_cache))):
        c = fc_cache[i]
        if c["drop"] is not None:
            g = g * c["drop"]
        g = g * c["relu_mask"]
        grads[f"fc.{i}.weight"] += g.T @ c["inp"]
        grads[f"fc.{i}.bias"] += g.sum(axis=0)
        g = g @ params[f"fc.{i}.weight"]
    return g


def _gated_attention_forward(params, h):
    t = np.tanh(h @ params["attn.V.weight"].T + params["attn.V.bias"])
    s = 1.0 / (1.0 + np.exp(-(h @ params["attn.U.weight"].T + params["attn.U.bias"])))
    m = t * s
    scores = (m @ params["attn.w.weight"].T).ravel() + params["attn.w.bias"][0]
    att = softmax(scores)
    pooled = att @ h
    return {"h": h, "t": t, "s": s, "m": m, "scores": scores, "att": att, "pooled": pooled}


def _gated_attention_backward(g_pooled, c, params, grads):
    """Backprop through pooled = softmax(score(h)) @ h; returns grad w.r.t. h."""
    h, att, m = c["h"], c["att"], c["m"]
    g_h = att[:, None] * g_pooled[None, :]
    g_att = h @ g_pooled
    g_scores = att * (g_att - float(att @ g_att))
    grads["attn.w.weight"] += (g_scores @ m)[None, :]
    grads["attn.w.bias"] += g_scores.sum(keepdims=True)
    g_m = g_scores[:, None] * params["attn.w.weight"][0][None, :]
    g_t = g_m * c["s"]
    g_s = g_m * c["t"]
    g_v_pre = g_t * (1.0 - c["t"] ** 2)
    g_u_pre = g_s * c["s"] * (1.0 - c["s"])
    grads["attn.V.weight"] += g_v_pre.T @ h
    grads["attn.V.bias"] += g_v_pre.sum(axis=0)
    grads["attn.U.weight"] += g_u_pre.T @ h
    grads["attn.U.bias"] += g_u_pre.sum(axis=0)
    g_h += g_v_pre @ params["attn.V.weight"] + g_u_pre @ params["attn.U.weight"]
    return g_h


def _layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, {"xhat": xhat, "inv_std": inv_std}


def _layernorm_backward(g_y, c, gamma):
    xhat, inv_std = c["xhat"], c["inv_std"]
    g_xhat = g_y * gamma
    g_x = inv_std * (
        g_xhat
        - g_xhat.mean(axis=-1, keepdims=True)
        - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
    )
    g_gamma = (g_y * xhat).sum(axis=0)
    g_beta = g_y.sum(axis=0)
    return g_x, g_gamma, g_beta


def _split_heads(x, n_heads):
    m, e = x.shape
    return x.reshape(m, n_heads, e // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, m, dh = x.shape
    return x.transpose(1, 0, 2).reshape(m, h * dh)


def _tx_block_forward(params, cfg, x, i, rng):
    e = cfg.embed_dim
    c: dict = {"x_in": x}
    y1, c["ln1"] = _layernorm_forward(x, params[f"tx.{i}.norm1.weight"], params[f"tx.{i}.norm1.bias"])
    c["y1"] = y1
    qkv = y1 @ params[f"tx.{i}.qkv.weight"].T + params[f"tx.{i}.qkv.bias"]
    q = _split_heads(qkv[:, :e], N_HEADS)
    k = _split_heads(qkv[:, e:2 * e], N_HEADS)
    v = _split_heads(qkv[:, 2 * e:], N_HEADS)
    scale = 1.0 / math.sqrt(e // N_HEADS)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    p = softmax(scores, axis=-1)
    ctx = _merge_heads(p @ v)
    c.update(q=q, k=k, v=v, p=p, ctx=ctx, scale=scale)
    attn_out = ctx @ params[f"tx.{i}.proj.weight"].T + params[f"tx.{i}.proj.bias"]
    x = x + attn_out
    if cfg.encoder_hidden_dim is not None:
        c["x_mid"] = x
        y2, c["ln2"] = _layernorm_forward(x, params[f"tx.{i}.norm2.weight"], params[f"tx.{i}.norm2.bias"])
        c["y2"] = y2
        f1_pre = y2 @ params[f"tx.{i}.ff1.weight"].T + params[f"tx.{i}.ff1.bias"]
        relu_mask = f1_pre > 0
        f1 = f1_pre * relu_mask
        drop = None
        if rng is not None and cfg.dropout_ff > 0:
            f1, drop = _dropout(rng, f1, cfg.dropout_ff)
        c.update(relu_mask=relu_mask, drop=drop, f1=f1)
        x = x + f1 @ params[f"tx.{i}.ff2.weight"].T + params[f"tx.{i}.ff2.bias"]
    return x, c


def _tx_block_backward(g, c, params, cfg, i, grads):
    if cfg.encoder_hidden_dim is not None:
        g_ff_out = g
        grads[f"tx.{i}.ff2.weight"] += g_ff_out.T @ c["f1"]
        grads[f"tx.{i}.ff2.bias"] += g_ff_out.sum(axis=0)
        g_f1 = g_ff_out @ params[f"tx.{i}.ff2.weight"]
        if c["drop"] is not None:
            g_f1 = g_f1 * c["drop"]
        g_f1_pre = g_f1 * c["relu_mask"]
        grads[f"tx.{i}.ff1.weight"] += g_f1_pre.T @ c["y2"]
        grads[f"tx.{i}.ff1.bias"] += g_f1_pre.sum(axis=0)
        g_y2 = g_f1_pre @ params[f"tx.{i}.ff1.weight"]
        g_mid_ln, g_gamma2, g_beta2 = _layernorm_backward(g_y2, c["ln2"], params[f"tx.{i}.norm2.weight"])
        grads[f"tx.{i}.norm2.weight"] += g_gamma2
        grads[f"tx.{i}.norm2.bias"] += g_beta2
        g = g + g_mid_ln  # residual join at x_mid

    g_attn_out = g
    grads[f"tx.{i}.proj.weight"] += g_attn_out.T @ c["ctx"]
    grads[f"tx.{i}.proj.bias"] += g_attn_out.sum(axis=0)
    g_ctx = _split_heads(g_attn_out @ params[f"tx.{i}.proj.weight"], N_HEADS)
    p, q, k, v = c["p"], c["q"], c["k"], c["v"]
    g_p = g_ctx @ v.transpose(0, 2, 1)
    g_v = p.transpose(0, 2, 1) @ g_ctx
    g_scores = p * (g_p - (g_p * p).sum(axis=-1, keepdims=True))
    g_q = (g_scores @ k) * c["scale"]
    g_k = (g_scores.transpose(0, 2, 1) @ q) * c["scale"]
    g_qkv = np.concatenate([_merge_heads(g_q), _merge_heads(g_k), _merge_heads(g_v)], axis=1)
    grads[f"tx.{i}.qkv.weight"] += g_qkv.T @ c["y1"]
    grads[f"tx.{i}.qkv.bias"] += g_qkv.sum(axis=0)
    g_y1 = g_qkv @ params[f"tx.{i}.qkv.weight"]
    g_x_ln, g_gamma1, g_beta1 = _layernorm_backward(g_y1, c["ln1"], params[f"tx.{i}.norm1.weight"])
    grads[f"tx.{i}.norm1.weight"] += g_gamma1
    grads[f"tx.{i}.norm1.bias"] += g_beta1
    return g + g_x_ln  # residual join at x_in


def _forward_cached(params: ModelParams, cfg: ModelConfig, features: np.ndarray,
                    rng: np.random.Generator | None):
    x = np.asarray(features)
    if x.ndim != 2:
        raise DataError(f"bag features must be 2-d, got shape {x.shape}")
    if x.shape[1] != cfg.in_dim:
        raise DataError(f"feature dim {x.shape[1]} does not match model in_dim {cfg.in_dim}")
    if x.shape[0] < 1:
        raise DataError("bag must hold at least one instance")
    if not np.isfinite(x).all():
        raise DataError("bag features contain non-finite values")

    n = x.shape[0]
    cache: dict = {}
    if rng is not None and cfg.dropout_input > 0:
        x, cache["input_drop"] = _dropout(rng, x, cfg.dropout_input)
    h, cache["fc"] = _fc_forward(params, cfg, x, rng)
    cache["h"] = h
    wc, bc = params["classifier.weight"], params["classifier.bias"]

    if cfg.arch == "mean":
        pooled = h.mean(axis=0)
        logits = pooled @ wc.T + bc
        attention = np.full(n, 1.0 / n, dtype=h.dtype)
        out = ForwardOutput(logits, pooled, attention)
    elif cfg.arch == "max":
        inst_logits = h @ wc.T + bc
        # binary: rank instances by the positive-class logit; otherwise by
        # their best logit over classes
        sel = inst_logits[:, 1] if cfg.n_classes == 2 else inst_logits.max(axis=1)
        best = int(np.argmax(sel))
        cache["best"] = best
        attention = np.zeros(n, dtype=h.dtype)
        attention[best] = 1.0
        out = ForwardOutput(inst_logits[best], h[best], attention)
    elif cfg.arch in ("abmil", "auxmil"):
        att_c = _gated_attention_forward(params, h)
        cache["attn"] = att_c
        logits = att_c["pooled"] @ wc.T + bc
        aux_logits = None
        if cfg.arch == "auxmil":
            aux_logits = h @ params["aux.head.weight"].T + params["aux.head.bias"]
        out = ForwardOutput(logits, att_c["pooled"], att_c["att"], aux_logits)
    else:  # transformer
        tokens = np.vstack([params["cls_token"][None, :], h])
        blocks = []
        for i in range(cfg.n_layers):
            tokens, bc_cache = _tx_block_forward(params, cfg, tokens, i, rng)
            blocks.append(bc_cache)
        cache["blocks"] = blocks
        pooled = tokens[0]
        logits = pooled @ wc.T + bc
        # class-token attention over instances, averaged across the final
        # block's heads and renormalized without the cls->cls mass
        raw = blocks[-1]["p"][:, 0, 1:].mean(axis=0)
        attention = raw / raw.sum()
        out = ForwardOutput(logits, pooled, attention)
    return out, cache


def forward(params: ModelParams, cfg: ModelConfig, features: np.ndarray,
            train_mode: bool = False, dropout_seed: int | None = None) -> ForwardOutput:
    """Evaluate one bag.  Deterministic in eval mode; in train mode the
    dropout pattern is a pure function of ``dropout_seed``."""
    rng = None
    if train_mode:
        if dropout_seed is None:
            raise ConfigError("train_mode forward requires a dropout_seed")
        rng = np.random.default_rng(dropout_seed)
    out, _ = _forward_cached(params, cfg, features, rng)
    return out


def attention_scores(params: ModelParams, cfg: ModelConfig, features: np.ndarray) -> np.ndarray:
    return forward(params, cfg, features).attention


def loss_and_grads(params: ModelParams, cfg: ModelConfig, features: np.ndarray,
                   label: int, aux_weight: float = 0.0, train_mode: bool = False,
                   dropout_seed: int | None = None):
    """Cross-entropy loss (plus the weighted auxiliary term for auxmil) and
    its gradient w.r.t. every parameter.

    Returns ``(loss, grads, output)``.
    """
    if not 0 <= label < cfg.n_classes:
        raise DataError(f"label {label} out of range for {cfg.n_classes} classes")
    rng = None
    if train_mode:
        if dropout_seed is None:
            raise ConfigError("train_mode requires a dropout_seed")
        rng = np.random.default_rng(dropout_seed)
    out, cache = _forward_cached(params, cfg, features, rng)
    grads = zeros_like_params(params)
    h = cache["h"]
    wc = params["classifier.weight"]

    loss, g_logits = cross_entropy(out.logits, label)
    g_logits = g_logits.astype(h.dtype)

    if cfg.arch == "mean":
        grads["classifier.weight"] += np.outer(g_logits, out.embedding)
        grads["classifier.bias"] += g_logits
        g_pooled = g_logits @ wc
        g_h = np.broadcast_to(g_pooled / h.shape[0], h.shape).copy()
        _fc_backward(g_h, cache["fc"], params, grads)
    elif cfg.arch == "max":
        best = cache["best"]
        grads["classifier.weight"] += np.outer(g_logits, h[best])
        grads["classifier.bias"] += g_logits
        g_h = np.zeros_like(h)
        g_h[best] = g_logits @ wc
        _fc_backward(g_h, cache["fc"], params, grads)
    elif cfg.arch in ("abmil", "auxmil"):
        grads["classifier.weight"] += np.outer(g_logits, out.embedding)
        grads["classifier.bias"] += g_logits
        g_pooled = g_logits @ wc
        g_h = _gated_attention_backward(g_pooled, cache["attn"], params, grads)
        if cfg.arch == "auxmil" and aux_weight != 0.0:
            l_aux, g_aux = aux_loss(out.aux_logits, out.attention, label, cfg.n_classes)
            loss += aux_weight * l_aux
            g_aux = aux_weight * g_aux
            grads["aux.head.weight"] += g_aux.T @ h
            grads["aux.head.bias"] += g_aux.sum(axis=0)
            g_h += g_aux @ params["aux.head.weight"]
        _fc_backward(g_h, cache["fc"], params, grads)
    else:  # transformer
        grads["classifier.weight"] += np.outer(g_logits, out.embedding)
        grads["classifier.bias"] += g_logits
        g_tokens = np.zeros((h.shape[0] + 1, cfg.embed_dim), dtype=h.dtype)
        g_tokens[0] = g_logits @ wc
        for i in reversed(range(cfg.n_layers)):
            g_tokens = _tx_block_backward(g_tokens, cache["blocks"][i], params, cfg, i, grads)
        grads["cls_token"] += g_tokens[0]
        _fc_backward(g_tokens[1:], cache["fc"], params, grads)

    return loss, grads, out
