"""Multi-scale mixture-of-transformers velocity network.

Each pyramid scale owns its projections, feed-forward, and modulation
regressors; attention is computed once, globally, over the concatenation
of every active scale's tokens plus a conditioning prefix. A block-causal
mask lets scale k attend only to scales k' >= k (coarser or equal) and to
the conditioning tokens, so the velocity at a scale is a function of that
scale, coarser scales, and conditioning alone — never of finer scales.

Conditioning (time, optional class label, optional stage id) enters twice,
DiT style: as in-context tokens riding in front of the coarsest scale's
segment, and as the embedding vector that the per-scale adaLN regressors
read. All modulation regressors and the final decoders start at zero, so a
fresh model is the zero function and every block is the identity.

Token order is [conditioning, coarsest, ..., finest], which makes the
causal mask block-lower-triangular.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    scales: int = 2                 # K pyramid levels
    hidden: int = 64                # token width d
    heads: int = 4
    depth: int = 4                  # number of MoT blocks
    patch: int = 2
    channels: int = 1
    num_classes: int = 0            # 0 = unconditional
    input_size: int = 16            # finest spatial size (square)
    mlp_ratio: int = 4
    time_freq_dim: int = 256
    stage_tokens: bool = False      # extra stage-id token (single-scale baselines)

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.hidden % 4:
            raise ValueError("hidden width must be divisible by 4 for 2-D sin-cos tables")
        coarsest = self.input_size >> (self.scales - 1)
        if coarsest % self.patch or self.input_size % (1 << (self.scales - 1)):
            raise ValueError(
                f"input_size={self.input_size} with K={self.scales}, patch={self.patch} "
                "leaves a scale grid that the patch size does not divide")

    @property
    def conditional(self):
        return self.num_classes > 0

    @property
    def null_label(self):
        """Extra embedding row used to drop conditioning for CFG."""
        return self.num_classes

    def grid(self, k):
        """Token grid side length of scale k."""
        return (self.input_size >> k) // self.patch

    def tokens(self, k):
        g = self.grid(k)
        return g * g

    def n_cond(self):
        return 1 + int(self.conditional) + int(self.stage_tokens)

    def to_dict(self):
        return {
            "scales": self.scales, "hidden": self.hidden, "heads": self.heads,
            "depth": self.depth, "patch": self.patch, "channels": self.channels,
            "num_classes": self.num_classes, "input_size": self.input_size,
            "mlp_ratio": self.mlp_ratio, "time_freq_dim": self.time_freq_dim,
            "stage_tokens": self.stage_tokens,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FlowState:
    """Noisy tensors for a contiguous range of active scales at time t.

    tensors maps scale index -> [B, C, h_k, w_k]; t is a scalar or [B]
    array; label (conditional models) is a [B] int array; stage is the
    single-scale baseline stage id.
    """

    tensors: dict
    t: object
    label: object = None
    stage: object = None

    @property
    def active(self):
        """Active scales, coarsest first."""
        return sorted(self.tensors.keys(), reverse=True)

    @property
    def batch(self):
        return next(iter(self.tensors.values())).shape[0]


def validate_flow_state(state: FlowState, cfg: ModelConfig):
    """Main-pipeline contract: contiguous active range that includes K-1."""
    act = state.active
    K = cfg.scales
    if any(k < 0 or k >= K for k in act):
        raise ValueError(f"inactive-scale input present: scales {act} with K={K}")
    if act[0] != K - 1:
        raise ValueError(f"coarsest scale {K - 1} must be active, got {act}")
    if act != list(range(K - 1, act[-1] - 1, -1)):
        raise ValueError(f"active scales must be contiguous, got {act}")


# ---------------------------------------------------------------------------
# deterministic embeddings
# ---------------------------------------------------------------------------

_POS_CACHE = {}


def pos_embed(gh, gw, d):
    """2-D sine-cosine positional table [gh*gw, d] (float64, cached)."""
    if d % 4:
        raise ValueError(f"pos_embed width must be divisible by 4, got {d}")
    key = (gh, gw, d)
    if key not in _POS_CACHE:
        def axis_embed(n, dim):
            omega = 1.0 / (10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2)))
            args = np.arange(n, dtype=np.float64)[:, None] * omega[None, :]
            return np.concatenate([np.sin(args), np.cos(args)], axis=1)

        eh = axis_embed(gh, d // 2)           # [gh, d/2]
        ew = axis_embed(gw, d // 2)           # [gw, d/2]
        grid = np.zeros((gh, gw, d))
        grid[:, :, : d // 2] = eh[:, None, :]
        grid[:, :, d // 2:] = ew[None, :, :]
        _POS_CACHE[key] = grid.reshape(gh * gw, d)
    return _POS_CACHE[key]


def time_frequency_embed(t, freq_dim):
    """Sinusoidal features of t (scaled by 1000), shape [B, freq_dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = freq_dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with resampling outside +-2 std."""
    x = rng.normal(shape, dtype=np.float64)
    for _ in range(8):
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.normal((int(bad.sum()),), dtype=np.float64)
    return np.clip(x, -2.0, 2.0) * std


def init_params(cfg: ModelConfig, rng, dtype=np.float32):
    """Fresh parameter dict; modulation regressors and decoders start zero."""
    d = cfg.hidden
    pc = cfg.patch * cfg.patch * cfg.channels
    params = {}

    def par(name, arr):
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    def w(name, shape, std=0.02):
        par(name, _trunc_normal(rng.stream("init/" + name), shape, std))

    def z(name, shape):
        par(name, np.zeros(shape))

    w("time.w1", (cfg.time_freq_dim, d))
    z("time.b1", (d,))
    w("time.w2", (d, d))
    z("time.b2", (d,))
    if cfg.conditional:
        w("label.table", (cfg.num_classes + 1, d))
    if cfg.stage_tokens:
        w("stage.table", (cfg.scales, d))

    for k in range(cfg.scales):
        w(f"scale{k}.embed.w", (pc, d))
        z(f"scale{k}.embed.b", (d,))
        z(f"scale{k}.final.mod.w", (d, 2 * d))
        z(f"scale{k}.final.mod.b", (2 * d,))
        z(f"scale{k}.final.dec.w", (d, pc))
        z(f"scale{k}.final.dec.b", (pc,))
        for i in range(cfg.depth):
            base = f"block{i}.scale{k}"
            z(f"{base}.mod.w", (d, 6 * d))
            z(f"{base}.mod.b", (6 * d,))
            w(f"{base}.attn.wq", (d, d))
            w(f"{base}.attn.wk", (d, d))
            w(f"{base}.attn.wv", (d, d))
            w(f"{base}.attn.wo", (d, d))
            z(f"{base}.attn.bo", (d,))
            w(f"{base}.ffn.w1", (d, cfg.mlp_ratio * d))
            z(f"{base}.ffn.b1", (cfg.mlp_ratio * d,))
            w(f"{base}.ffn.w2", (cfg.mlp_ratio * d, d))
            z(f"{base}.ffn.b2", (d,))
    return params


def randomize_params(params, rng, std=0.5):
    """Overwrite every tensor with normal noise (wiring probes in tests)."""
    for name, t in params.items():
        t.data[...] = rng.stream("rand/" + name).normal(t.shape, dtype=np.float64).astype(t.dtype) * std


def params_astype(params, dtype):
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
            for k, v in params.items()}


# ---------------------------------------------------------------------------
# token plumbing
# ---------------------------------------------------------------------------

def patchify(x: Tensor, p: int) -> Tensor:
    """[B, C, h, w] -> [B, (h/p)(w/p), p*p*C] in row-major patch order."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide {h}x{w}")
    gh, gw = h // p, w // p
    t = nm.reshape(x, (b, c, gh, p, gw, p))
    t = nm.transpose(t, (0, 2, 4, 1, 3, 5))
    return nm.reshape(t, (b, gh * gw, c * p * p))


def unpatchify(tokens: Tensor, p: int, c: int, h: int, w: int) -> Tensor:
    """Inverse spatial arrangement of patchify."""
    b = tokens.shape[0]
    gh, gw = h // p, w // p
    t = nm.reshape(tokens, (b, gh, gw, c, p, p))
    t = nm.transpose(t, (0, 3, 1, 4, 2, 5))
    return nm.reshape(t, (b, c, h, w))


def cond_tokens(params, cfg: ModelConfig, t, label=None, stage=None):
    """Conditioning token sequence [B, n_cond, d] and the adaLN vector [B, d].

    Always one time token; one label token for conditional models (row
    num_classes is the learned null label); one stage token when enabled.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    b = t_arr.shape[0]
    dtype = params["time.w1"].dtype
    feats = Tensor(time_frequency_embed(t_arr, cfg.time_freq_dim).astype(dtype))
    h = nm.add(nm.matmul(feats, params["time.w1"]), params["time.b1"])
    t_emb = nm.add(nm.matmul(nm.silu(h), params["time.w2"]), params["time.b2"])

    toks = [t_emb]
    c_vec = t_emb
    if cfg.conditional:
        if label is None:
            raise ValueError("conditional model needs a label (use the null id to drop)")
        label = np.asarray(label, dtype=np.intp).reshape(b)
        if np.any(label < 0) or np.any(label > cfg.num_classes):
            raise ValueError(f"label out of range [0, {cfg.num_classes}]")
        y_emb = nm.embedding(params["label.table"], label)
        toks.append(y_emb)
        c_vec = nm.add(c_vec, y_emb)
    elif label is not None:
        raise ValueError("label given to an unconditional model")
    if cfg.stage_tokens:
        if stage is None:
            raise ValueError("stage_tokens model needs a stage id")
        stage = np.broadcast_to(np.asarray(stage, dtype=np.intp), (b,))
        s_emb = nm.embedding(params["stage.table"], stage)
        toks.append(s_emb)
        c_vec = nm.add(c_vec, s_emb)

    toks = [nm.reshape(x, (b, 1, cfg.hidden)) for x in toks]
    seq = toks[0] if len(toks) == 1 else nm.concat(toks, axis=1)
    return seq, c_vec


def build_mask(active_scales, token_counts, n_cond, dtype=np.float32):
    """Additive attention mask over [cond, coarsest, ..., finest] segments.

    0 marks an allowed key, -inf a blocked one. Scale tokens see the
    conditioning prefix and every coarser-or-equal scale; conditioning
    tokens see only the conditioning prefix. With this ordering the mask
    is block-lower-triangular and no row is fully masked.
    """
    if list(active_scales) != sorted(active_scales, reverse=True):
        raise ValueError("active scales must be listed coarsest first")
    counts = [n_cond] + list(token_counts)
    n = sum(counts)
    edges = np.cumsum([0] + counts)
    mask = np.full((n, n), -np.inf, dtype=dtype)
    mask[: edges[1], : edges[1]] = 0.0
    for i in range(1, len(counts)):
        mask[edges[i]: edges[i + 1], : edges[i + 1]] = 0.0
    return mask


# ---------------------------------------------------------------------------
# blocks and forward
# ---------------------------------------------------------------------------

def _modulate(x, shift, scale):
    """x * (1 + scale) + shift with [B, d] factors over [B, n, d] tokens."""
    b, d = shift.shape
    return nm.add(nm.mul(x, nm.reshape(nm.add(scale, 1.0), (b, 1, d))),
                  nm.reshape(shift, (b, 1, d)))


def _gate(x, g):
    b, d = g.shape
    return nm.mul(x, nm.reshape(g, (b, 1, d)))


def _split_heads(x, heads):
    b, n, d = x.shape
    t = nm.reshape(x, (b, n, heads, d // heads))
    return nm.transpose(t, (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def mot_block(groups, c_vec, params, prefix, cfg: ModelConfig, mask):
    """One mixture-of-transformers block.

    groups: list of (scale, tokens [B, n_g, d]) in canonical order; the
    first group carries the conditioning prefix and is processed with the
    coarsest scale's weights. Returns the transformed groups.
    """
    silu_c = nm.silu(c_vec)
    mods = {}
    for k, _ in groups:
        m = nm.add(nm.matmul(silu_c, params[f"{prefix}.scale{k}.mod.w"]),
                   params[f"{prefix}.scale{k}.mod.b"])
        mods[k] = nm.split(m, [cfg.hidden] * 6, axis=1)

    qs, ks, vs = [], [], []
    for k, tok in groups:
        shift1, scale1 = mods[k][0], mods[k][1]
        z = _modulate(nm.layernorm(tok), shift1, scale1)
        qs.append(nm.matmul(z, params[f"{prefix}.scale{k}.attn.wq"]))
        ks.append(nm.matmul(z, params[f"{prefix}.scale{k}.attn.wk"]))
        vs.append(nm.matmul(z, params[f"{prefix}.scale{k}.attn.wv"]))

    sizes = [t.shape[1] for _, t in groups]
    q = _split_heads(nm.concat(qs, axis=1) if len(qs) > 1 else qs[0], cfg.heads)
    kk = _split_heads(nm.concat(ks, axis=1) if len(ks) > 1 else ks[0], cfg.heads)
    v = _split_heads(nm.concat(vs, axis=1) if len(vs) > 1 else vs[0], cfg.heads)

    scale = 1.0 / math.sqrt(cfg.hidden // cfg.heads)
    logits = nm.mul(nm.matmul(q, nm.transpose(kk, (0, 1, 3, 2))), scale)
    attn = nm.matmul(nm.softmax_masked(logits, mask), v)
    merged = _merge_heads(attn)
    parts = nm.split(merged, sizes, axis=1) if len(sizes) > 1 else [merged]

    out = []
    for (k, tok), part in zip(groups, parts):
        proj = nm.add(nm.matmul(part, params[f"{prefix}.scale{k}.attn.wo"]),
                      params[f"{prefix}.scale{k}.attn.bo"])
        tok = nm.add(tok, _gate(proj, mods[k][2]))
        shift2, scale2 = mods[k][3], mods[k][4]
        h = _modulate(nm.layernorm(tok), shift2, scale2)
        h = nm.gelu(nm.add(nm.matmul(h, params[f"{prefix}.scale{k}.ffn.w1"]),
                           params[f"{prefix}.scale{k}.ffn.b1"]))
        h = nm.add(nm.matmul(h, params[f"{prefix}.scale{k}.ffn.w2"]),
                   params[f"{prefix}.scale{k}.ffn.b2"])
        out.append((k, nm.add(tok, _gate(h, mods[k][5]))))
    return out


def forward(params, cfg: ModelConfig, state: FlowState, check_contract=True):
    """Velocity prediction for every active scale; shapes match the inputs."""
    if check_contract:
        validate_flow_state(state, cfg)
    act = state.active
    b = state.batch

    t_b = np.broadcast_to(np.atleast_1d(np.asarray(state.t, dtype=np.float64)), (b,))
    label_b = None if state.label is None else \
        np.broadcast_to(np.asarray(state.label, dtype=np.intp), (b,))
    ct, c_vec = cond_tokens(params, cfg, t_b, label_b, state.stage)
    n_cond = ct.shape[1]

    groups = []
    for idx, k in enumerate(act):
        x = state.tensors[k]
        size = cfg.input_size >> k
        if x.shape != (b, cfg.channels, size, size):
            raise ValueError(
                f"scale {k} expects [B, {cfg.channels}, {size}, {size}], got {x.shape}")
        tok = nm.matmul(patchify(x, cfg.patch), params[f"scale{k}.embed.w"])
        tok = nm.add(tok, params[f"scale{k}.embed.b"])
        g = cfg.grid(k)
        tok = nm.add(tok, pos_embed(g, g, cfg.hidden).astype(tok.dtype))
        if idx == 0:
            tok = nm.concat([ct, tok], axis=1)
        groups.append((k, tok))

    counts = [t.shape[1] for _, t in groups]
    counts[0] -= n_cond
    mask = build_mask(act, counts, n_cond, dtype=np.dtype(groups[0][1].dtype))

    for i in range(cfg.depth):
        groups = mot_block(groups, c_vec, params, f"block{i}", cfg, mask)

    velocities = {}
    for idx, (k, tok) in enumerate(groups):
        if idx == 0:
            tok = nm.narrow(tok, 1, n_cond, tok.shape[1] - n_cond)
        m = nm.add(nm.matmul(nm.silu(c_vec), params[f"scale{k}.final.mod.w"]),
                   params[f"scale{k}.final.mod.b"])
        shift, scale = nm.split(m, [cfg.hidden] * 2, axis=1)
        h = _modulate(nm.layernorm(tok), shift, scale)
        dec = nm.add(nm.matmul(h, params[f"scale{k}.final.dec.w"]),
                     params[f"scale{k}.final.dec.b"])
        size = cfg.input_size >> k
        velocities[k] = unpatchify(dec, cfg.patch, cfg.channels, size, size)
    return velocities
