"""The trajectory forecaster: masked temporal encoders over a visual and a
trajectory branch, an attention-based recurrent state transition, a
probabilistic emission head with decoupled xy/depth uncertainty, and a
velocity head.

The visual branch applies prompt tuning to a frozen convolutional
encoder: a border of learnable pixels is embedded around each frame, the
frozen encoder runs unchanged, and only the border and a small MLP head
receive gradients. Observed steps are the first C of the horizon; all
embeddings past C are zeroed and attention keys past C carry an additive
-1e9 logit, which underflows to exact zero weight, so forecasts are
exactly independent of future inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

MASK_LOGIT = -1e9
COORDINATE_MODES = ("global-3d", "local-3d", "2d")


@dataclass(frozen=True)
class ModelConfig:
    horizon: int = 40
    d_obs: int = 256
    d_z: int = 16
    blocks: int = 6
    heads: int = 8
    mlp_ratio: int = 4
    frame_h: int = 64
    frame_w: int = 64
    frame_ch: int = 1
    prompt_width: int = 5
    coordinate_mode: str = "global-3d"
    traj_hidden: int = 128
    vis_hidden: int = 512
    head_hidden: int = 128
    enc_channels: tuple = (8, 16)
    softplus_uncertainty: bool = True

    def __post_init__(self):
        if self.d_obs % self.heads or self.d_z % self.heads:
            raise ValueError(f"d_obs={self.d_obs} and d_z={self.d_z} must divide heads={self.heads}")
        if self.prompt_width < 0:
            raise ValueError("prompt_width must be >= 0")
        if self.coordinate_mode not in COORDINATE_MODES:
            raise ValueError(f"coordinate_mode must be one of {COORDINATE_MODES}")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if min(self.conv_out_hw()) < 1:
            raise ValueError("frame too small for the two stride-2 convolutions")

    @property
    def point_dim(self):
        return 2 if self.coordinate_mode == "2d" else 3

    def padded_hw(self):
        return self.frame_h + 2 * self.prompt_width, self.frame_w + 2 * self.prompt_width

    def conv_out_hw(self):
        h, w = self.padded_hw()
        h1, w1 = (h - 3) // 2 + 1, (w - 3) // 2 + 1
        return (h1 - 3) // 2 + 1, (w1 - 3) // 2 + 1

    def flat_dim(self):
        h2, w2 = self.conv_out_hw()
        return self.enc_channels[1] * h2 * w2

    def n_prompt_params(self):
        hp, wp = self.padded_hw()
        return self.frame_ch * (hp * wp - self.frame_h * self.frame_w)

    @classmethod
    def paper(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        base = dict(horizon=16, d_obs=32, d_z=32, blocks=2, heads=4,
                    frame_h=16, frame_w=16, prompt_width=2,
                    traj_hidden=32, vis_hidden=64, head_hidden=64,
                    enc_channels=(4, 8))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides):
        base = dict(horizon=8, d_obs=8, d_z=8, blocks=1, heads=2,
                    frame_h=8, frame_w=8, prompt_width=1,
                    traj_hidden=8, vis_hidden=16, head_hidden=8,
                    enc_channels=(2, 4))
        base.update(overrides)
        return cls(**base)


@dataclass
class ForecastOutput:
    """Per-step forecasts over the full horizon (numpy, in normalized units)."""

    mean: np.ndarray          # (T, point_dim), tanh range
    alpha: np.ndarray         # (T,), xy log-variance head, >= 0 under softplus
    beta: np.ndarray | None   # (T,) depth head, None in 2d mode
    velocity: np.ndarray      # (T, point_dim)


class Params:
    """Named parameter tensors in fixed insertion order, with frozen flags."""

    def __init__(self):
        self._tensors = {}
        self.frozen = set()

    def add(self, name, array, frozen=False):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name}")
        t = ad.Tensor(np.asarray(array, dtype=np.float64), requires_grad=not frozen)
        self._tensors[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def trainable_items(self):
        return [(n, t) for n, t in self._tensors.items() if n not in self.frozen]

    def n_params(self, trainable_only=False):
        return sum(t.size for n, t in self._tensors.items()
                   if not (trainable_only and n in self.frozen))

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None


def _glorot(rng, fan_in, fan_out, shape=None):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape if shape is not None else (fan_in, fan_out))


def _add_linear(params, rng, name, d_in, d_out):
    params.add(f"{name}.w", _glorot(rng, d_in, d_out))
    params.add(f"{name}.b", np.zeros(d_out))


def _add_layer_norm(params, name, d):
    params.add(f"{name}.g", np.ones(d))
    params.add(f"{name}.b", np.zeros(d))


def _add_mha(params, rng, name, d_q, d_kv, d):
    _add_linear(params, rng, f"{name}.wq", d_q, d)
    # no key bias: a uniform shift of every key cancels inside the softmax
    params.add(f"{name}.wk.w", _glorot(rng, d_kv, d))
    _add_linear(params, rng, f"{name}.wv", d_kv, d)
    _add_linear(params, rng, f"{name}.wo", d, d)


FROZEN_ENCODER_SEED = 7041  # shared "pretrained" backbone across all runs


def init_params(cfg, seed=0):
    """Build every learnable tensor for the given configuration."""
    rng = np.random.default_rng(seed)
    frozen_rng = np.random.default_rng(FROZEN_ENCODER_SEED)
    p = Params()
    c1, c2 = cfg.enc_channels
    ch, pdim = cfg.frame_ch, cfg.point_dim

    p.add("enc.conv1.k", frozen_rng.normal(0, np.sqrt(2.0 / (ch * 9)), (c1, ch, 3, 3)), frozen=True)
    p.add("enc.conv2.k", frozen_rng.normal(0, np.sqrt(2.0 / (c1 * 9)), (c2, c1, 3, 3)), frozen=True)
    p.add("prompt", np.zeros((ch, cfg.n_prompt_params() // ch)) if cfg.prompt_width else np.zeros((ch, 0)))

    _add_linear(p, rng, "vis.fc1", cfg.flat_dim(), cfg.vis_hidden)
    _add_linear(p, rng, "vis.fc2", cfg.vis_hidden, cfg.d_obs)
    _add_linear(p, rng, "traj.fc1", pdim, cfg.traj_hidden)
    _add_linear(p, rng, "traj.fc2", cfg.traj_hidden, cfg.d_obs)

    for branch in ("enc_v", "enc_t"):
        for b in range(cfg.blocks):
            base = f"{branch}.{b}"
            _add_mha(p, rng, f"{base}.attn", cfg.d_obs, cfg.d_obs, cfg.d_obs)
            _add_layer_norm(p, f"{base}.ln1", cfg.d_obs)
            _add_linear(p, rng, f"{base}.mlp.fc1", cfg.d_obs, cfg.mlp_ratio * cfg.d_obs)
            _add_linear(p, rng, f"{base}.mlp.fc2", cfg.mlp_ratio * cfg.d_obs, cfg.d_obs)
            _add_layer_norm(p, f"{base}.ln2", cfg.d_obs)

    dz = cfg.d_z
    _add_linear(p, rng, "trans.h.fc1", 2 * cfg.d_obs, cfg.d_obs)
    _add_linear(p, rng, "trans.h.fc2", cfg.d_obs, dz)
    _add_layer_norm(p, "trans.h.ln", dz)
    _add_mha(p, rng, "trans.self", dz, dz, dz)
    _add_layer_norm(p, "trans.ln_wbar", 2 * dz)
    _add_mha(p, rng, "trans.cross", 2 * dz, dz, dz)
    _add_layer_norm(p, "trans.ln_what", 3 * dz)
    _add_linear(p, rng, "trans.inner.fc1", 3 * dz, dz)
    _add_linear(p, rng, "trans.inner.fc2", dz, dz)
    _add_linear(p, rng, "trans.outer.fc1", 4 * dz, 2 * dz)
    _add_linear(p, rng, "trans.outer.fc2", 2 * dz, dz)
    _add_layer_norm(p, "trans.ln_z", dz)
    p.add("trans.z0", rng.normal(0, 0.1, dz))

    _add_linear(p, rng, "emit.reembed", cfg.d_obs, cfg.d_obs)
    d_in = dz + cfg.d_obs
    _add_linear(p, rng, "emit.mean.fc1", d_in, cfg.head_hidden)
    _add_linear(p, rng, "emit.mean.fc2", cfg.head_hidden, pdim)
    _add_linear(p, rng, "emit.alpha.fc1", d_in, cfg.head_hidden)
    _add_linear(p, rng, "emit.alpha.fc2", cfg.head_hidden, 1)
    if pdim == 3:
        _add_linear(p, rng, "emit.beta.fc1", d_in, cfg.head_hidden)
        _add_linear(p, rng, "emit.beta.fc2", cfg.head_hidden, 1)
    _add_linear(p, rng, "vel.fc1", dz, cfg.head_hidden)
    _add_layer_norm(p, "vel.ln", cfg.head_hidden)
    _add_linear(p, rng, "vel.fc2", cfg.head_hidden, pdim)
    return p


def expected_param_count(cfg):
    """Closed-form parameter counts implied by the configuration.

    Kept as explicit arithmetic, independent of init_params, so the two
    can cross-check each other.
    """
    c1, c2 = cfg.enc_channels
    ch, pdim, d, dz, hh = cfg.frame_ch, cfg.point_dim, cfg.d_obs, cfg.d_z, cfg.head_hidden
    lin = lambda i, o: i * o + o
    frozen = c1 * ch * 9 + c2 * c1 * 9
    n = cfg.n_prompt_params()
    n += lin(cfg.flat_dim(), cfg.vis_hidden) + lin(cfg.vis_hidden, d)
    n += lin(pdim, cfg.traj_hidden) + lin(cfg.traj_hidden, d)
    per_block = 3 * lin(d, d) + d * d + 2 * 2 * d + lin(d, cfg.mlp_ratio * d) + lin(cfg.mlp_ratio * d, d)
    n += 2 * cfg.blocks * per_block
    n += lin(2 * d, d) + lin(d, dz) + 2 * dz          # h embedding + LN
    n += 3 * lin(dz, dz) + dz * dz + 2 * 2 * dz       # self attention + LN(wbar)
    n += lin(2 * dz, dz) + dz * dz + 2 * lin(dz, dz) + 2 * 3 * dz  # cross attention + LN(what)
    n += lin(3 * dz, dz) + lin(dz, dz)                # inner MLP
    n += lin(4 * dz, 2 * dz) + lin(2 * dz, dz) + 2 * dz  # outer MLP + LN(z)
    n += dz                                           # initial latent
    n += lin(d, d)                                    # re-embedding projection
    n += lin(dz + d, hh) + lin(hh, pdim)              # mean head
    n += lin(dz + d, hh) + lin(hh, 1)                 # xy uncertainty head
    if pdim == 3:
        n += lin(dz + d, hh) + lin(hh, 1)             # depth uncertainty head
    n += lin(dz, hh) + 2 * hh + lin(hh, pdim)         # velocity head
    return {"trainable": n, "frozen": frozen, "total": n + frozen}


# ---------------------------------------------------------------------------
# building blocks


def positional_encoding(horizon, d):
    pos = np.arange(horizon)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def _linear(params, name, x):
    return ad.affine(x, params[f"{name}.w"], params[f"{name}.b"])


def _mlp2(params, name, x, act="tanh"):
    return _linear(params, f"{name}.fc2", ad.pointwise(_linear(params, f"{name}.fc1", x), act))


def _layer_norm(params, name, x):
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def masked_attention(q, k, v, observed_count, scale_dim=None):
    """Scaled dot-product attention with the observation mask of the
    forecasting problem: key columns at positions >= observed_count get an
    additive -1e9 logit. Operands are (T, d) (or (N, T, d)) tensors."""
    t_keys = k.shape[-2]
    if not 1 <= observed_count <= t_keys:
        raise ValueError(f"observed_count {observed_count} outside [1, {t_keys}]")
    d = q.shape[-1] if scale_dim is None else scale_dim
    logits = ad.scale(ad.matmul(q, ad.swap_last2(k)), 1.0 / np.sqrt(d))
    mask_row = np.where(np.arange(t_keys) < observed_count, 0.0, MASK_LOGIT)
    mask = np.broadcast_to(mask_row, logits.shape).copy()
    return ad.matmul(ad.softmax_lastdim(ad.add(logits, ad.constant(mask))), v)


def _split_heads(x, heads):
    return ad.split_heads(x, heads)


def _merge_heads(x):
    return ad.merge_heads(x)


def _mha(params, name, q_in, kv_in, heads, key_mask=None):
    """Multi-head attention; key_mask is an additive (N,h,Tq,Tk) constant."""
    q = _split_heads(_linear(params, f"{name}.wq", q_in), heads)
    k = _split_heads(ad.matmul(kv_in, params[f"{name}.wk.w"]), heads)
    v = _split_heads(_linear(params, f"{name}.wv", kv_in), heads)
    dh = q.shape[-1]
    logits = ad.scale(ad.matmul(q, ad.swap_last2(k)), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        logits = ad.add(logits, ad.constant(key_mask))
    ctx = _merge_heads(ad.matmul(ad.softmax_lastdim(logits), v))
    return _linear(params, f"{name}.wo", ctx)


def _key_mask(observed, heads, t_query, t_key):
    """(N,h,Tq,Tk) additive mask: 0 where key < per-sample observed count."""
    n = observed.shape[0]
    cols = np.arange(t_key)
    m = np.where(cols[None, :] < observed[:, None], 0.0, MASK_LOGIT)  # (N,Tk)
    return np.broadcast_to(m[:, None, None, :], (n, heads, t_query, t_key)).copy()


def encode_frames(params, cfg, frames):
    """Prompted frozen encoder plus learnable head: (N,T,H,W[,C]) -> (N,T,d_obs)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[:, :, None, :, :]
    n, t, ch, h, w = frames.shape
    if (ch, h, w) != (cfg.frame_ch, cfg.frame_h, cfg.frame_w):
        raise ad.ShapeError(
            f"frames {(ch, h, w)} do not match configured {(cfg.frame_ch, cfg.frame_h, cfg.frame_w)}"
        )
    x = ad.constant(frames.reshape(n * t, ch, h, w))
    x = ad.embed_border(x, params["prompt"], cfg.prompt_width)
    x = ad.tanh(ad.conv2d(x, params["enc.conv1.k"], stride=2))
    x = ad.tanh(ad.conv2d(x, params["enc.conv2.k"], stride=2))
    x = ad.reshape(x, (n * t, cfg.flat_dim()))
    x = _mlp2(params, "vis", x)
    return ad.reshape(x, (n, t, cfg.d_obs))


def embed_points(params, cfg, points):
    """Two-layer MLP point embedding; accepts (.., point_dim) tensor or array."""
    x = points if isinstance(points, ad.Tensor) else ad.constant(np.asarray(points, dtype=np.float64))
    if x.shape[-1] != cfg.point_dim:
        raise ad.ShapeError(f"points width {x.shape[-1]} != {cfg.point_dim}")
    return _mlp2(params, "traj", x)


def temporal_encode(params, cfg, x, observed, branch):
    """Stack of masked post-norm encoder blocks over one branch.

    x: (N,T,d_obs) embeddings (already zeroed past each sample's observed
    count); observed: (N,) ints. Sinusoidal positions are added at the
    input; every block masks attention keys to the observed prefix.
    """
    n, t, d = x.shape
    pe = np.broadcast_to(positional_encoding(t, d), (n, t, d)).copy()
    u = ad.add(x, ad.constant(pe))
    mask = _key_mask(observed, cfg.heads, t, t)
    for b in range(cfg.blocks):
        base = f"{branch}.{b}"
        attn = _mha(params, f"{base}.attn", u, u, cfg.heads, mask)
        u = _layer_norm(params, f"{base}.ln1", ad.add(u, attn))
        m = _mlp2(params, f"{base}.mlp", u)
        u = _layer_norm(params, f"{base}.ln2", ad.add(u, m))
    return u


def _broadcast_param(t, n):
    """(d,) parameter -> (N,1,d) tensor, summing gradients over the batch."""
    d = t.shape[0]
    ones = ad.constant(np.ones((n, 1, 1)))
    return ad.matmul(ones, ad.reshape(t, (1, 1, d)))


def transition(params, cfg, h, observed, horizon=None):
    """Recursive latent rollout over the full horizon.

    h: (N,T_enc,d_z) encoded observations (keys masked to < observed);
    returns z: (N,horizon,d_z). Each step attends over its own latent
    history (seeded with the learnable initial latent) and over the
    observation encoding.
    """
    n, t_enc, dz = h.shape
    t = t_enc if horizon is None else int(horizon)
    pe = positional_encoding(t, dz)
    hmask = _key_mask(observed, cfg.heads, 1, t_enc)
    k_h = _split_heads(ad.matmul(h, params["trans.cross.wk.w"]), cfg.heads)
    v_h = _split_heads(_linear(params, "trans.cross.wv", h), cfg.heads)
    dh = dz // cfg.heads
    heads = cfg.heads

    def self_kv(z_t):
        return (_split_heads(ad.matmul(z_t, params["trans.self.wk.w"]), heads),
                _split_heads(_linear(params, "trans.self.wv", z_t), heads))

    z0 = _broadcast_param(params["trans.z0"], n)
    z_hist = [z0]
    k_s, v_s = self_kv(z0)
    for i in range(t):
        z_prev = z_hist[-1]
        if i > 0:
            k_new, v_new = self_kv(z_prev)
            k_s = ad.concat([k_s, k_new], axis=2)
            v_s = ad.concat([v_s, v_new], axis=2)
        q = _split_heads(_linear(params, "trans.self.wq", z_prev), heads)
        logits = ad.scale(ad.matmul(q, ad.swap_last2(k_s)), 1.0 / np.sqrt(dh))
        attn = _merge_heads(ad.matmul(ad.softmax_lastdim(logits), v_s))
        attn = _linear(params, "trans.self.wo", attn)
        wbar = _layer_norm(params, "trans.ln_wbar", ad.concat([z_prev, attn], axis=2))

        qc = _split_heads(_linear(params, "trans.cross.wq", wbar), heads)
        logits = ad.scale(ad.matmul(qc, ad.swap_last2(k_h)), 1.0 / np.sqrt(dh))
        ctx = _merge_heads(ad.matmul(ad.softmax_lastdim(ad.add(logits, ad.constant(hmask))), v_h))
        ctx = _linear(params, "trans.cross.wo", ctx)
        what = _layer_norm(params, "trans.ln_what", ad.concat([wbar, ctx], axis=2))

        inner = _mlp2(params, "trans.inner", what)
        feats = _mlp2(params, "trans.outer", ad.concat([what, inner], axis=2))
        pe_i = ad.constant(np.broadcast_to(pe[i], (n, 1, dz)).copy())
        z_t = _layer_norm(params, "trans.ln_z", ad.add(feats, pe_i))
        z_hist.append(z_t)
    return ad.concat(z_hist[1:], axis=1)


def _emit_heads(params, cfg, inp):
    mean = ad.tanh(_mlp2(params, "emit.mean", inp))
    if cfg.softplus_uncertainty:
        alpha = ad.softplus(_mlp2(params, "emit.alpha", inp))
        beta = ad.softplus(_mlp2(params, "emit.beta", inp)) if cfg.point_dim == 3 else None
    else:
        alpha = _mlp2(params, "emit.alpha", inp)
        beta = _mlp2(params, "emit.beta", inp) if cfg.point_dim == 3 else None
    return mean, alpha, beta


def emit(params, cfg, z_t, prev_traj_feature):
    """One emission step: (N,1,d_z) latent + (N,1,d_obs) previous-trajectory
    feature -> (mean, alpha, beta)."""
    return _emit_heads(params, cfg, ad.concat([z_t, prev_traj_feature], axis=2))


def velocity_head(params, cfg, z):
    """Velocity from latents, layer-normalized hidden layer, tanh output."""
    pre = _linear(params, "vel.fc1", z)
    h = ad.tanh(_layer_norm(params, "vel.ln", pre))
    return ad.tanh(_linear(params, "vel.fc2", h))


def forward_batch(params, cfg, frames, points, observed, lengths=None):
    """Full forward pass over a padded batch.

    frames (N,T,H,W[,C]) and points (N,T,point_dim) are numpy inputs padded
    to the configured horizon; observed (N,) int gives each sample's C.
    Returns dict of graph tensors: mean (N,T,pd), alpha/beta (N,T,1),
    velocity (N,T,pd).
    """
    frames = np.asarray(frames, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.int64)
    n, t = points.shape[:2]
    if np.any(observed < 1) or np.any(observed >= (lengths if lengths is not None else t)):
        raise ValueError("observed counts must satisfy 1 <= C < T")

    # Only the first max(C) steps feed the encoders: embeddings past each
    # sample's C are zeroed and attention keys there are masked to exact
    # zero weight, so later positions can never be consumed downstream.
    t_enc = int(observed.max())
    obs_keep = (np.arange(t_enc)[None, :] < observed[:, None]).astype(np.float64)

    x_v = encode_frames(params, cfg, frames[:, :t_enc])
    x_t = embed_points(params, cfg, points[:, :t_enc])
    keep_d = ad.constant(np.broadcast_to(obs_keep[:, :, None], (n, t_enc, cfg.d_obs)).copy())
    x_v = ad.mul(x_v, keep_d)  # zero-pad unobserved slots
    x_t = ad.mul(x_t, keep_d)

    o_v = temporal_encode(params, cfg, x_v, observed, "enc_v")
    o_t = temporal_encode(params, cfg, x_t, observed, "enc_t")

    o = ad.concat([o_v, o_t], axis=2)
    pe_z = np.broadcast_to(positional_encoding(t, cfg.d_z)[:t_enc], (n, t_enc, cfg.d_z)).copy()
    h = _layer_norm(params, "trans.h.ln", ad.add(_mlp2(params, "trans.h", o), ad.constant(pe_z)))

    z = transition(params, cfg, h, observed, horizon=t)

    # Emission: steps up to min(C) use encoder trajectory features for every
    # sample, so they batch into one call; later steps are autoregressive in
    # the re-embedded previous prediction for samples past their horizon.
    zero_feat = ad.constant(np.zeros((n, 1, cfg.d_obs)))
    m0 = int(observed.min())  # steps 0..m0 are within every sample's observed prefix
    prefix = [zero_feat] if m0 == 0 else [zero_feat, ad.slice_axis(o_t, 1, 0, m0)]
    mean_blk, alpha_blk, beta_blk = emit(params, cfg, ad.slice_axis(z, 1, 0, m0 + 1),
                                         ad.concat(prefix, axis=1) if len(prefix) > 1 else zero_feat)
    means, alphas = [mean_blk], [alpha_blk]
    betas = [beta_blk] if beta_blk is not None else []
    prev_mean = ad.slice_axis(mean_blk, 1, m0, m0 + 1)
    for i in range(m0 + 1, t):
        z_i = ad.slice_axis(z, 1, i, i + 1)
        re = _linear(params, "emit.reembed", embed_points(params, cfg, prev_mean))
        if i <= t_enc:
            sel = (i <= observed).astype(np.float64)  # encoder feature through step C+1
            sel_d = np.broadcast_to(sel[:, None, None], (n, 1, cfg.d_obs)).copy()
            obs_feat = ad.mul(ad.slice_axis(o_t, 1, i - 1, i), ad.constant(sel_d))
            prev_feat = ad.add(obs_feat, ad.mul(re, ad.constant(1.0 - sel_d)))
        else:
            prev_feat = re  # past every sample's observed prefix
        m_i, a_i, b_i = emit(params, cfg, z_i, prev_feat)
        means.append(m_i)
        alphas.append(a_i)
        if b_i is not None:
            betas.append(b_i)
        prev_mean = m_i
    out = {
        "mean": ad.concat(means, axis=1) if len(means) > 1 else means[0],
        "alpha": ad.concat(alphas, axis=1) if len(alphas) > 1 else alphas[0],
        "beta": (ad.concat(betas, axis=1) if len(betas) > 1 else betas[0]) if betas else None,
        "velocity": velocity_head(params, cfg, z),
    }
    return out


def forecast(params, cfg, frames, points, observed_count):
    """Single-sample inference. frames (T,H,W[,C]), points (T,point_dim)
    with at least the first C entries filled; returns a ForecastOutput
    covering the sample's full horizon."""
    frames = np.asarray(frames, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    t = points.shape[0]
    if not 1 <= observed_count < t:
        raise ValueError(f"observed_count must be in [1, {t - 1}]")
    out = forward_batch(params, cfg, frames[None], points[None], np.array([observed_count]),
                        lengths=np.array([t]))
    return ForecastOutput(
        mean=out["mean"].data[0],
        alpha=out["alpha"].data[0, :, 0],
        beta=None if out["beta"] is None else out["beta"].data[0, :, 0],
        velocity=out["velocity"].data[0],
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, cfg, path, extra=None):
    """Write <path>.bin (flat doubles) and <path>.json (manifest)."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    manifest, blobs, offset = [], [], 0
    for name, t in params.items():
        flat = np.ascontiguousarray(t.data, dtype=np.float64).reshape(-1)
        manifest.append({"name": name, "offset": offset, "shape": list(t.data.shape),
                         "frozen": name in params.frozen})
        blobs.append(flat)
        offset += flat.size
    with open(base.with_suffix(".bin"), "wb") as f:
        f.write(np.concatenate(blobs).tobytes())
    doc = {"config": asdict(cfg), "params": manifest, "extra": extra or {}}
    with open(base.with_suffix(".json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, cfg, extra)."""
    base = Path(path)
    with open(base.with_suffix(".json")) as f:
        doc = json.load(f)
    cfg_dict = dict(doc["config"])
    cfg_dict["enc_channels"] = tuple(cfg_dict["enc_channels"])
    cfg = ModelConfig(**cfg_dict)
    raw = np.frombuffer(open(base.with_suffix(".bin"), "rb").read(), dtype=np.float64)
    params = Params()
    for entry in doc["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        data = raw[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).copy()
        params.add(entry["name"], data, frozen=entry["frozen"])
    return params, cfg, doc.get("extra", {})
