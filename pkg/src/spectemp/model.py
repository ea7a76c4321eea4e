"""Patch-embedding transformer encoder with spectral and temporal heads, in numpy.

Forward passes keep what the backward pass needs, and ``backward`` returns
exact gradients for every parameter. Everything runs in the dtype of the
parameters, so float64 models can be checked against finite differences.

Parameter names::

    patch_proj.w (P*P, D')   patch_proj.b (D')
    pos (N_max*R_s, D')      mask_token (D')
    layers.{i}.ln1.g/.b  layers.{i}.attn.{wq,bq,wk,bk,wv,bv,wo,bo}
    layers.{i}.ln2.g/.b  layers.{i}.mlp.{w1,b1,w2,b2}
    spec_head.{w1,b1,w2,b2}             D' -> D' -> K_s
    temp_head.{w1,b1,w2,b2}             R_t stacked heads, D' -> D' -> K_t
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import math

import numpy as np

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

# parameters that AdamW leaves out of weight decay
NO_DECAY_SUFFIXES = (".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b")
NO_DECAY_NAMES = ("mask_token",)


class DivergenceError(FloatingPointError):
    """Non-finite activations or gradients."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    mlp_ratio: float = 4.0
    K_s: int = 100
    K_t: int = 500
    patch_dim: int = 256
    R_s: int = 8
    R_t: int = 8
    N_max: int = 50
    dropout_rate: float = 0.0
    init_std: float = 0.02
    # fixed input standardization, (patch - input_mean) / input_std, before the projection
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.dropout_rate != 0.0:
            raise ValueError("dropout is not implemented; dropout_rate must be 0")
        if not self.input_std > 0:
            raise ValueError(f"input_std must be positive, got {self.input_std}")

    @property
    def d_hidden(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, H = cfg.d_model, cfg.d_hidden
    shapes = {
        "patch_proj.w": (cfg.patch_dim, D),
        "patch_proj.b": (D,),
        "pos": (cfg.N_max * cfg.R_s, D),
        "mask_token": (D,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "mlp.w1": (D, H), p + "mlp.b1": (H,),
            p + "mlp.w2": (H, D), p + "mlp.b2": (D,),
        })
    shapes.update({
        "spec_head.w1": (D, D), "spec_head.b1": (D,),
        "spec_head.w2": (D, cfg.K_s), "spec_head.b2": (cfg.K_s,),
        "temp_head.w1": (cfg.R_t, D, D), "temp_head.b1": (cfg.R_t, D),
        "temp_head.w2": (cfg.R_t, D, cfg.K_t), "temp_head.b2": (cfg.R_t, cfg.K_t),
    })
    return shapes


def parameter_count(cfg: ModelConfig, part: str = "all") -> int:
    """Closed-form parameter count.

    ``part`` is one of ``all``, ``encoder`` (transformer blocks only),
    ``embedding`` (projection, positions, mask token) or ``heads``.
    """
    D, H, L = cfg.d_model, cfg.d_hidden, cfg.n_layers
    encoder = L * (4 * (D * D + D) + 4 * D + (D * H + H) + (H * D + D))
    embedding = cfg.patch_dim * D + D + cfg.N_max * cfg.R_s * D + D
    heads = (D * D + D + D * cfg.K_s + cfg.K_s) + cfg.R_t * (D * D + D + D * cfg.K_t + cfg.K_t)
    parts = {"encoder": encoder, "embedding": embedding, "heads": heads,
             "all": encoder + embedding + heads}
    return parts[part]


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(("ln1.g", "ln2.g")):
            arr = np.ones(shape)
        elif name.rsplit(".", 1)[-1].startswith("b") and name != "pos":
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) * cfg.init_std
        params[name] = arr.astype(dtype)
    return params


def decays(name: str) -> bool:
    return not (name.endswith(NO_DECAY_SUFFIXES) or name in NO_DECAY_NAMES)


# -- primitives -------------------------------------------------------------

EXP_FLOOR = -60.0


def flushed_exp(x, out=None):
    """exp(x) with entries below e^EXP_FLOOR set to exactly 0.

    Used on max-shifted scores only, where those entries are < 1e-26 of the row
    maximum. It keeps float32 subnormals (slow on x86) out of the hot loops.
    """
    keep = x >= EXP_FLOOR
    if out is None:
        out = np.zeros_like(x)
    np.exp(x, out=out, where=keep)
    np.copyto(out, 0.0, where=~keep)
    return out


def gelu(x):
    """Tanh-approximated GELU; also returns the tanh term for :func:`gelu_grad`."""
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t=None):
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _dense_grad(x, dy):
    """Weight/bias gradients of ``y = x @ w + b`` summed over leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(0)


@dataclass
class EncodeOutput:
    per_layer_tokens: list  # n_layers arrays of (B, T, D')
    final_tokens: np.ndarray  # (B, T, D')
    pooled: np.ndarray  # (B, N, D') segment means of final_tokens
    attention: list = field(default_factory=list)  # per layer (B, H, T, T)
    cache: dict = field(default_factory=dict, repr=False)


class SpectroTemporalModel:
    """Encoder plus heads. Inputs are batched: patches (B, T, P*P), mask (B, T)."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        missing = set(parameter_shapes(cfg)) ^ set(self.params)
        if missing:
            raise ValueError(f"parameter set mismatch: {sorted(missing)[:4]}")

    @property
    def dtype(self):
        return self.params["pos"].dtype

    # -- forward ---------------------------------------------------------

    def embed(self, patches: np.ndarray, mask: np.ndarray | None = None):
        p = self.params
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.ndim == 2:
            patches = patches[None]
        B, T, F = patches.shape
        if F != self.cfg.patch_dim:
            raise ValueError(f"patch vectors have length {F}, expected {self.cfg.patch_dim}")
        if T > p["pos"].shape[0]:
            raise ValueError(f"{T} patches exceed the positional table ({p['pos'].shape[0]})")
        if mask is None:
            mask = np.zeros((B, T), dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(B, T)
        if self.cfg.input_mean != 0.0 or self.cfg.input_std != 1.0:
            patches = (patches - self.dtype.type(self.cfg.input_mean)) / self.dtype.type(self.cfg.input_std)
        proj = patches @ p["patch_proj.w"] + p["patch_proj.b"]
        tokens = np.where(mask[..., None], p["mask_token"], proj) + p["pos"][:T]
        return tokens, {"patches": patches, "mask": mask}

    def _block(self, i, x):
        p = self.params
        pre = f"layers.{i}."
        B, T, D = x.shape
        H, dh = self.cfg.n_heads, self.cfg.head_dim
        a, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = (a @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        q = q * (1.0 / math.sqrt(dh))  # cached pre-scaled
        attn = q @ k.transpose(0, 1, 3, 2)
        attn -= attn.max(-1, keepdims=True)
        flushed_exp(attn, out=attn)
        attn /= attn.sum(-1, keepdims=True)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        h = x + ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
        b, ln2 = layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = b @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
        f, tanh_u = gelu(u)
        out = h + f @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        cache = dict(a=a, ln1=ln1, q=q, k=k, v=v, attn=attn, ctx=ctx, b=b, ln2=ln2, u=u, f=f,
                     tanh_u=tanh_u)
        return out, cache

    def encode(self, tokens: np.ndarray, keep_cache: bool = True) -> EncodeOutput:
        x = tokens
        layers, attns, caches = [], [], []
        for i in range(self.cfg.n_layers):
            x, cache = self._block(i, x)
            if not np.isfinite(x).all():
                raise DivergenceError(f"non-finite activations after layer {i}")
            layers.append(x)
            attns.append(cache["attn"])
            if keep_cache:
                caches.append(cache)
        B, T, D = x.shape
        R_s = self.cfg.R_s
        pooled = x.reshape(B, T // R_s, R_s, D).mean(2)
        return EncodeOutput(layers, x, pooled, attns, {"blocks": caches})

    def spectral_logits(self, out: EncodeOutput) -> np.ndarray:
        p = self.params
        u = out.final_tokens @ p["spec_head.w1"] + p["spec_head.b1"]
        g, t = gelu(u)
        out.cache["spec"] = (u, g, t)
        return g @ p["spec_head.w2"] + p["spec_head.b2"]

    def temporal_logits(self, out: EncodeOutput) -> np.ndarray:
        p = self.params
        B, N, D = out.pooled.shape
        # heads stacked on the leading axis: (R_t, B*N, .)
        u = out.pooled.reshape(1, B * N, D) @ p["temp_head.w1"] + p["temp_head.b1"][:, None, :]
        g, t = gelu(u)
        out.cache["temp"] = (u, g, t)
        logits = g @ p["temp_head.w2"] + p["temp_head.b2"][:, None, :]
        return logits.reshape(-1, B, N, self.cfg.K_t).transpose(1, 2, 0, 3)

    def forward(self, patches, mask=None, temporal: bool = True):
        tokens, emb_cache = self.embed(patches, mask)
        out = self.encode(tokens)
        out.cache["embed"] = emb_cache
        out.cache["tokens"] = tokens
        s_logits = self.spectral_logits(out)
        t_logits = self.temporal_logits(out) if temporal else None
        return out, s_logits, t_logits

    # -- backward --------------------------------------------------------

    def backward(self, out: EncodeOutput, d_spec=None, d_temp=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given d(loss)/d(logits) for either or both heads.

        Parameters the loss does not reach get exact zero gradients.
        """
        p = self.params
        cfg = self.cfg
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        x = out.final_tokens
        B, T, D = x.shape
        dx = np.zeros_like(x)

        if d_spec is not None:
            u, g, t = out.cache["spec"]
            grads["spec_head.w2"], grads["spec_head.b2"] = _dense_grad(g, d_spec)
            du = (d_spec @ p["spec_head.w2"].T) * gelu_grad(u, t)
            grads["spec_head.w1"], grads["spec_head.b1"] = _dense_grad(x, du)
            dx += du @ p["spec_head.w1"].T

        if d_temp is not None:
            u, g, t = out.cache["temp"]
            _, N, R_t, K_t = d_temp.shape
            dl = np.ascontiguousarray(d_temp.transpose(2, 0, 1, 3)).reshape(R_t, B * N, K_t)
            grads["temp_head.w2"] = g.transpose(0, 2, 1) @ dl
            grads["temp_head.b2"] = dl.sum(1)
            du = (dl @ p["temp_head.w2"].transpose(0, 2, 1)) * gelu_grad(u, t)
            pooled = out.pooled.reshape(B * N, D)
            grads["temp_head.w1"] = pooled.T[None] @ du
            grads["temp_head.b1"] = du.sum(1)
            dpooled = (du @ p["temp_head.w1"].transpose(0, 2, 1)).sum(0).reshape(B, N, D)
            R_s = cfg.R_s
            dx += np.repeat(dpooled / R_s, R_s, axis=1)

        blocks = out.cache["blocks"]
        H, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        for i in reversed(range(cfg.n_layers)):
            c = blocks[i]
            pre = f"layers.{i}."
            # feed-forward branch
            grads[pre + "mlp.w2"], grads[pre + "mlp.b2"] = _dense_grad(c["f"], dx)
            du = (dx @ p[pre + "mlp.w2"].T) * gelu_grad(c["u"], c["tanh_u"])
            grads[pre + "mlp.w1"], grads[pre + "mlp.b1"] = _dense_grad(c["b"], du)
            db = du @ p[pre + "mlp.w1"].T
            dh_in, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(
                db, p[pre + "ln2.g"], c["ln2"])
            dh_ = dx + dh_in
            # attention branch
            grads[pre + "attn.wo"], grads[pre + "attn.bo"] = _dense_grad(c["ctx"], dh_)
            dctx = (dh_ @ p[pre + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            attn = c["attn"]
            dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
            dv = attn.transpose(0, 1, 3, 2) @ dctx
            dscores = dattn  # softmax backward, in place
            row = np.einsum("bhts,bhts->bht", dattn, attn)[..., None]
            dscores -= row
            dscores *= attn
            dq = (dscores @ c["k"]) * scale
            dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
            da = np.zeros_like(dh_)
            for name, d in (("q", dq), ("k", dk), ("v", dv)):
                d = d.transpose(0, 2, 1, 3).reshape(B, T, D)
                grads[pre + f"attn.w{name}"], grads[pre + f"attn.b{name}"] = _dense_grad(c["a"], d)
                da += d @ p[pre + f"attn.w{name}"].T
            dx_in, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(
                da, p[pre + "ln1.g"], c["ln1"])
            dx = dh_ + dx_in

        emb = out.cache["embed"]
        mask = emb["mask"]
        grads["pos"][:T] = dx.sum(0)
        grads["mask_token"] = (dx * mask[..., None]).sum((0, 1))
        dproj = dx * ~mask[..., None]
        grads["patch_proj.w"], grads["patch_proj.b"] = _dense_grad(emb["patches"], dproj)
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for {name}")
        return grads

    def hidden_states(self, patches) -> list:
        """Per-layer token matrices of an unmasked forward pass (for probing)."""
        tokens, _ = self.embed(patches, None)
        return self.encode(tokens, keep_cache=False).per_layer_tokens


def state_hash(params: dict, names=None) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def encoder_names(params: dict) -> list[str]:
    """Everything except the two prediction heads."""
    return [n for n in params if not n.startswith(("spec_head.", "temp_head."))]
