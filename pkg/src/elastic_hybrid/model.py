"""Hybrid Mamba-2 / attention / FFN stack with dimension masks and depth gates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MAMBA, ATTN, FFN = "M", "A", "F"
KINDS = (MAMBA, ATTN, FFN)


@dataclass(frozen=True)
class ModelConfig:
    """Static maximum architecture; every sub-network nests inside it."""

    d_e: int = 64
    d_int: int = 256
    n_h: int = 4
    d_h: int = 16
    m_h: int = 8
    m_d: int = 16
    g: int = 2
    d_s: int = 16
    pattern: tuple[str, ...] = (MAMBA, MAMBA, ATTN, FFN) * 2
    vocab: int = 256
    conv_width: int = 4
    eps: float = 1e-5
    # per-layer overrides (indexed by position among layers of that kind);
    # only sliced heterogeneous sub-networks set these
    ffn_widths: tuple[int, ...] | None = None
    attn_heads: tuple[int, ...] | None = None
    mamba_heads: tuple[int, ...] | None = None
    mamba_channels: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "pattern", tuple(self.pattern))
        for name in ("ffn_widths", "attn_heads", "mamba_heads", "mamba_channels"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(x) for x in v))
        for name in ("d_e", "d_int", "n_h", "d_h", "m_h", "m_d", "g", "d_s", "vocab", "conv_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.m_h % self.g:
            raise ValueError(f"m_h={self.m_h} is not divisible by g={self.g}")
        bad = [k for k in self.pattern if k not in KINDS]
        if bad:
            raise ValueError(f"unknown layer kinds {bad}; expected one of {KINDS}")
        for name, kind in (("ffn_widths", FFN), ("attn_heads", ATTN), ("mamba_heads", MAMBA), ("mamba_channels", MAMBA)):
            v = getattr(self, name)
            if v is None:
                continue
            if len(v) != self.pattern.count(kind):
                raise ValueError(f"{name} has {len(v)} entries for {self.pattern.count(kind)} layers of kind {kind}")
            if min(v, default=1) < 1:
                raise ValueError(f"{name} entries must be >= 1, got {v}")
        for h in self.mamba_heads or ():
            if h % self.g:
                raise ValueError(f"per-layer mamba heads {h} not divisible by g={self.g}")

    @property
    def N(self) -> int:
        return len(self.pattern)

    @property
    def heads_per_group(self) -> int:
        return self.m_h // self.g

    @property
    def mamba_inner(self) -> int:
        return self.m_h * self.m_d

    @property
    def attn_inner(self) -> int:
        return self.n_h * self.d_h

    # per-layer widths, ``i`` indexing layers of the given kind
    def d_int_of(self, i: int) -> int:
        return self.d_int if self.ffn_widths is None else self.ffn_widths[i]

    def n_h_of(self, i: int) -> int:
        return self.n_h if self.attn_heads is None else self.attn_heads[i]

    def m_h_of(self, i: int) -> int:
        return self.m_h if self.mamba_heads is None else self.mamba_heads[i]

    def m_d_of(self, i: int) -> int:
        return self.m_d if self.mamba_channels is None else self.mamba_channels[i]

    def layers_of(self, kind: str) -> list[int]:
        return [j for j, k in enumerate(self.pattern) if k == kind]

    def kind_index(self, layer: int) -> int:
        """Position of ``layer`` among the layers of its own kind."""
        kind = self.pattern[layer]
        return self.pattern[:layer].count(kind)

    def to_dict(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["pattern"] = "".join(self.pattern)
        for name in ("ffn_widths", "attn_heads", "mamba_heads", "mamba_channels"):
            if d[name] is None:
                del d[name]
            else:
                d[name] = ",".join(str(x) for x in d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("pattern"), str):
            d["pattern"] = tuple(d["pattern"])
        for name in ("ffn_widths", "attn_heads", "mamba_heads", "mamba_channels"):
            if isinstance(d.get(name), str):
                d[name] = tuple(int(x) for x in d[name].split(","))
        ints = {"d_e", "d_int", "n_h", "d_h", "m_h", "m_d", "g", "d_s", "vocab", "conv_width"}
        return cls(**{k: (int(v) if k in ints else float(v) if k == "eps" else v) for k, v in d.items()})


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Complete named parameter inventory derived from ``cfg``."""
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab, cfg.d_e)}
    K = cfg.conv_width
    for j, kind in enumerate(cfg.pattern):
        p = f"layers.{j}."
        shapes[p + "norm.weight"] = (cfg.d_e,)
        shapes[p + "norm.bias"] = (cfg.d_e,)
        i = cfg.kind_index(j)
        if kind == MAMBA:
            H = cfg.m_h_of(i)
            inner, gs = H * cfg.m_d_of(i), cfg.g * cfg.d_s
            shapes.update({
                p + "W_z": (inner, cfg.d_e),
                p + "W_x": (inner, cfg.d_e),
                p + "W_B": (gs, cfg.d_e),
                p + "W_C": (gs, cfg.d_e),
                p + "W_dt": (H, cfg.d_e),
                p + "A_log": (H,),
                p + "D": (H,),
                p + "conv_x": (inner, K),
                p + "conv_B": (gs, K),
                p + "conv_C": (gs, K),
                p + "gnorm": (inner,),
                p + "W_O": (cfg.d_e, inner),
            })
        elif kind == ATTN:
            inner = cfg.n_h_of(i) * cfg.d_h
            shapes.update({
                p + "W_Q": (inner, cfg.d_e),
                p + "W_K": (inner, cfg.d_e),
                p + "W_V": (inner, cfg.d_e),
                p + "W_O": (cfg.d_e, inner),
            })
        else:
            shapes.update({
                p + "W_1": (cfg.d_int_of(i), cfg.d_e),
                p + "W_2": (cfg.d_e, cfg.d_int_of(i)),
            })
    shapes["final_norm.weight"] = (cfg.d_e,)
    shapes["final_norm.bias"] = (cfg.d_e,)
    shapes["head"] = (cfg.vocab, cfg.d_e)
    return shapes


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    resid_scale = 1.0 / math.sqrt(2.0 * cfg.N)
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("norm.weight") or leaf == "gnorm":
            arr = np.ones(shape)
        elif name.endswith("norm.bias"):
            arr = np.zeros(shape)
        elif leaf == "A_log":
            arr = np.log(np.linspace(0.05, 1.0, shape[0]))
        elif leaf == "D":
            arr = np.ones(shape)
        elif leaf.startswith("conv_"):
            arr = rng.standard_normal(shape) / math.sqrt(shape[1])
        elif name == "embed":
            arr = rng.standard_normal(shape)
        elif leaf in ("W_O", "W_2"):
            arr = rng.standard_normal(shape) * resid_scale / math.sqrt(shape[1])
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[1])
        out[name] = arr.astype(dtype)
    return out


class HybridModel:
    """Parameter container for the hybrid stack. Forward lives in ``stack_forward``."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray | Tensor]):
        expected = parameter_shapes(config)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ValueError(f"parameter inventory mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            v = params[name]
            t = v if isinstance(v, Tensor) else Tensor(np.asarray(v))
            if t.shape != shape:
                raise ValueError(f"parameter {name} has shape {t.shape}, expected {shape}")
            t.name = name
            self.params[name] = t

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "HybridModel":
        return cls(config, init_parameters(config, seed, dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True) -> "HybridModel":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "HybridModel":
        return HybridModel(self.config, {k: v.data.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "HybridModel":
        return HybridModel(self.config, {k: v.data.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["embed"].dtype


# ---------------------------------------------------------------------------
# masks


@dataclass
class MaskSet:
    """Masks and depth gates for one sub-network.

    Every entry is either ``None`` (fully active), a numpy array, or a Tensor
    (soft masks that carry router gradients). Per-layer lists are indexed by
    position among layers of the same kind. ``*_norm`` entries, when given,
    replace the mask as weights for normalisation statistics (used when the
    multiplicative mask is scaled and so not a valid weighting).
    """

    emb: Any = None
    mamba: list = field(default_factory=list)
    mamba_heads: list = field(default_factory=list)
    attn: list = field(default_factory=list)
    ffn: list = field(default_factory=list)
    gamma: Any = None
    logit_scale: dict[str, float] = field(default_factory=dict)
    emb_norm: Any = None
    mamba_norm: list | None = None

    @classmethod
    def full(cls, cfg: ModelConfig) -> "MaskSet":
        nm, na, nf = (len(cfg.layers_of(k)) for k in KINDS)
        return cls(mamba=[None] * nm, mamba_heads=[None] * nm, attn=[None] * na, ffn=[None] * nf)

    @classmethod
    def ones(cls, cfg: ModelConfig, dtype=np.float64) -> "MaskSet":
        """Explicit all-ones masks (numerically identical to ``full``)."""
        nm, na, nf = (len(cfg.layers_of(k)) for k in KINDS)
        return cls(
            emb=np.ones(cfg.d_e, dtype),
            mamba=[np.ones(cfg.m_h_of(i) * cfg.m_d_of(i), dtype) for i in range(nm)],
            mamba_heads=[np.ones(cfg.m_h_of(i), dtype) for i in range(nm)],
            attn=[np.ones(cfg.n_h_of(i) * cfg.d_h, dtype) for i in range(na)],
            ffn=[np.ones(cfg.d_int_of(i), dtype) for i in range(nf)],
            gamma=np.ones(cfg.N, dtype),
        )

    def validate(self, cfg: ModelConfig) -> None:
        def check(v, n, what):
            if v is None:
                return
            length = v.shape[-1] if hasattr(v, "shape") else len(v)
            if length != n:
                raise ValueError(f"mask {what} has length {length}, config requires {n}")

        nm, na, nf = (len(cfg.layers_of(k)) for k in KINDS)
        for lst, n, what in ((self.mamba, nm, "mamba"), (self.mamba_heads, nm, "mamba_heads"),
                             (self.attn, na, "attn"), (self.ffn, nf, "ffn")):
            if len(lst) != n:
                raise ValueError(f"mask list {what} has {len(lst)} entries, config has {n} such layers")
        check(self.emb, cfg.d_e, "emb")
        check(self.emb_norm, cfg.d_e, "emb_norm")
        check(self.gamma, cfg.N, "gamma")
        for i, v in enumerate(self.mamba):
            check(v, cfg.m_h_of(i) * cfg.m_d_of(i), "mamba")
        for i, v in enumerate(self.mamba_heads):
            check(v, cfg.m_h_of(i), "mamba_heads")
        for i, v in enumerate(self.attn):
            check(v, cfg.n_h_of(i) * cfg.d_h, "attn")
        for i, v in enumerate(self.ffn):
            check(v, cfg.d_int_of(i), "ffn")

    def detached(self) -> "MaskSet":
        """Copy with every Tensor replaced by its plain array."""

        def d(v):
            return v.data if isinstance(v, Tensor) else v

        return replace(
            self,
            emb=d(self.emb),
            mamba=[d(v) for v in self.mamba],
            mamba_heads=[d(v) for v in self.mamba_heads],
            attn=[d(v) for v in self.attn],
            ffn=[d(v) for v in self.ffn],
            gamma=d(self.gamma),
            emb_norm=d(self.emb_norm),
            mamba_norm=None if self.mamba_norm is None else [d(v) for v in self.mamba_norm],
            logit_scale=dict(self.logit_scale),
        )


def _mask(x, m):
    return x if m is None else x * m


def _cast(m, dtype):
    if m is None or isinstance(m, Tensor):
        return m
    return np.asarray(m, dtype=dtype)


def masked_layer_norm(y, weight, bias, emb_mask, emb_norm=None, eps: float = 1e-5):
    """``M_emb(LN(y))`` with statistics restricted to the active embedding channels."""
    stats = emb_norm if emb_norm is not None else emb_mask
    out = ag.layer_norm(y, stats, eps) * weight + bias
    return _mask(out, emb_mask)


# ---------------------------------------------------------------------------
# layers


def mamba_forward(model: HybridModel, layer: int, y, masks: MaskSet, trace: dict | None = None):
    cfg = model.config
    p = f"layers.{layer}."
    P = model.params
    i = cfg.kind_index(layer)
    dtype = model.dtype
    m_e = _cast(masks.emb, dtype)
    m_m = _cast(masks.mamba[i], dtype)
    m_hd = _cast(masks.mamba_heads[i], dtype)
    norm_w = masks.mamba_norm[i] if masks.mamba_norm is not None else m_m
    b, L, _ = y.shape
    H, Pd = cfg.m_h_of(i), cfg.m_d_of(i)

    y_ln = masked_layer_norm(y, P[p + "norm.weight"], P[p + "norm.bias"], m_e, _cast(masks.emb_norm, dtype), cfg.eps)
    z_raw = ag.linear(y_ln, P[p + "W_z"])
    x_raw = ag.linear(y_ln, P[p + "W_x"])
    if trace is not None:
        trace.setdefault("ln", {})[layer] = y_ln.data
        trace.setdefault("mamba_x", {})[layer] = x_raw.data
    z = _mask(z_raw, m_m)
    x = _mask(x_raw, m_m)
    Bp = ag.linear(y_ln, P[p + "W_B"])
    Cp = ag.linear(y_ln, P[p + "W_C"])
    dt = _mask(ag.softplus(ag.linear(y_ln, P[p + "W_dt"])), m_hd)

    x = ag.silu(ag.causal_conv1d(x, P[p + "conv_x"]))
    Bc = ag.silu(ag.causal_conv1d(Bp, P[p + "conv_B"]))
    Cc = ag.silu(ag.causal_conv1d(Cp, P[p + "conv_C"]))
    a = ag.neg(ag.exp(P[p + "A_log"]))
    y_ssm = ag.selective_scan(
        x.reshape(b, L, H, Pd), dt, a,
        Bc.reshape(b, L, cfg.g, cfg.d_s), Cc.reshape(b, L, cfg.g, cfg.d_s), P[p + "D"],
    ).reshape(b, L, H * Pd)
    u = y_ssm * ag.silu(z)
    u = ag.rms_norm(u, _cast(norm_w, dtype), cfg.eps) * P[p + "gnorm"]
    u = _mask(u, m_m)
    return _mask(ag.linear(u, P[p + "W_O"]), m_e)


_CAUSAL_CACHE: dict[tuple[int, Any], np.ndarray] = {}


def _causal_bias(L: int, dtype) -> np.ndarray:
    key = (L, np.dtype(dtype).str)
    if key not in _CAUSAL_CACHE:
        bias = np.triu(np.full((L, L), -1e9), k=1).astype(dtype)
        _CAUSAL_CACHE[key] = bias
    return _CAUSAL_CACHE[key]


def attention_forward(model: HybridModel, layer: int, y, masks: MaskSet, trace: dict | None = None):
    cfg = model.config
    p = f"layers.{layer}."
    P = model.params
    i = cfg.kind_index(layer)
    dtype = model.dtype
    m_e = _cast(masks.emb, dtype)
    m_a = _cast(masks.attn[i], dtype)
    b, L, _ = y.shape
    n, dh = cfg.n_h_of(i), cfg.d_h

    y_ln = masked_layer_norm(y, P[p + "norm.weight"], P[p + "norm.bias"], m_e, _cast(masks.emb_norm, dtype), cfg.eps)
    q_raw = ag.linear(y_ln, P[p + "W_Q"])
    if trace is not None:
        trace.setdefault("ln", {})[layer] = y_ln.data
        trace.setdefault("attn_q", {})[layer] = q_raw.data

    def heads(t):
        return t.reshape(b, L, n, dh).transpose(0, 2, 1, 3)

    q = heads(_mask(q_raw, m_a))
    k = heads(_mask(ag.linear(y_ln, P[p + "W_K"]), m_a))
    v = heads(_mask(ag.linear(y_ln, P[p + "W_V"]), m_a))
    scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + _causal_bias(L, dtype)
    attn = ag.matmul(ag.softmax(scores, axis=-1), v)
    o = _mask(attn.transpose(0, 2, 1, 3).reshape(b, L, n * dh), m_a)
    return _mask(ag.linear(o, P[p + "W_O"]), m_e)


def ffn_forward(model: HybridModel, layer: int, y, masks: MaskSet, trace: dict | None = None):
    cfg = model.config
    p = f"layers.{layer}."
    P = model.params
    i = cfg.kind_index(layer)
    dtype = model.dtype
    m_e = _cast(masks.emb, dtype)
    m_f = _cast(masks.ffn[i], dtype)

    y_ln = masked_layer_norm(y, P[p + "norm.weight"], P[p + "norm.bias"], m_e, _cast(masks.emb_norm, dtype), cfg.eps)
    h_raw = ag.linear(y_ln, P[p + "W_1"])
    if trace is not None:
        trace.setdefault("ln", {})[layer] = y_ln.data
        trace.setdefault("ffn_h", {})[layer] = h_raw.data
    h = _mask(h_raw, m_f)
    act = _mask(ag.silu(h), m_f)
    return _mask(ag.linear(act, P[p + "W_2"]), m_e)


LAYER_FORWARD = {MAMBA: mamba_forward, ATTN: attention_forward, FFN: ffn_forward}


def stack_forward(
    model: HybridModel,
    masks: MaskSet | None,
    tokens: np.ndarray,
    trace: dict | None = None,
    hidden: list | None = None,
) -> Tensor:
    """Token ids (batch, len) -> logits (batch, len, vocab).

    ``trace`` collects calibration activations; ``hidden`` collects the
    residual stream at every layer boundary.
    """
    cfg = model.config
    if masks is None:
        masks = MaskSet.full(cfg)
    masks.validate(cfg)
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must have shape (batch, len), got {tokens.shape}")
    dtype = model.dtype
    m_e = _cast(masks.emb, dtype)
    gamma = masks.gamma

    h = _mask(ag.embedding(model.params["embed"], tokens), m_e)
    if hidden is not None:
        hidden.append(h.data)
    for j, kind in enumerate(cfg.pattern):
        if gamma is None:
            gj = 1.0
        elif isinstance(gamma, Tensor):
            gj = gamma[j]
            if gj.data == 0.0:
                gj = 0.0
        else:
            gj = float(gamma[j])
        if isinstance(gj, float) and gj == 0.0:
            if hidden is not None:
                hidden.append(h.data)
            continue
        out = LAYER_FORWARD[kind](model, j, h, masks, trace)
        h = h + (out if isinstance(gj, float) and gj == 1.0 else out * gj)
        if hidden is not None:
            hidden.append(h.data)
    y = masked_layer_norm(
        h, model.params["final_norm.weight"], model.params["final_norm.bias"], m_e,
        _cast(masks.emb_norm, dtype), cfg.eps,
    )
    return ag.linear(y, model.params["head"])


def forward_logits(model: HybridModel, masks: MaskSet | None, tokens: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Graph-free forward in mini-batches; returns a plain array."""
    tokens = np.asarray(tokens)
    outs = []
    with ag.no_grad():
        plain = masks.detached() if masks is not None else None
        for s in range(0, len(tokens), batch_size):
            outs.append(stack_forward(model, plain, tokens[s : s + batch_size]).data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# gathering parameters along elastic axes (re-sorting and slicing share this)


def _pick(per_layer, i, n):
    if per_layer is None or per_layer[i] is None:
        return np.arange(n)
    return np.asarray(per_layer[i], dtype=np.int64)


def _uniform_or_override(values: list[int], base: int):
    if not values:
        return base, None
    if len(set(values)) == 1:
        return values[0], None
    return max(values), tuple(values)


def reindex(
    model: HybridModel,
    *,
    emb=None,
    mamba_heads=None,
    mamba_channels=None,
    attn_heads=None,
    ffn=None,
    layers=None,
) -> HybridModel:
    """Gather parameters along every elastic axis.

    Each argument is an index array (``emb``) or a list of index arrays per
    layer of that kind, in original kind order (``None`` keeps everything).
    Permutations re-sort the model; prefixes slice it. ``layers`` lists the
    retained layer indices in stack order. The returned model's config is
    derived from the gathered shapes.
    """
    cfg = model.config
    emb_idx = np.arange(cfg.d_e) if emb is None else np.asarray(emb, dtype=np.int64)
    kept = list(range(cfg.N)) if layers is None else [int(j) for j in layers]
    if kept != sorted(set(kept)):
        raise ValueError(f"retained layers must be strictly increasing, got {kept}")
    P = {k: v.data for k, v in model.params.items()}
    out: dict[str, np.ndarray] = {
        "embed": P["embed"][:, emb_idx],
        "head": P["head"][:, emb_idx],
        "final_norm.weight": P["final_norm.weight"][emb_idx],
        "final_norm.bias": P["final_norm.bias"][emb_idx],
    }
    widths: dict[str, list[int]] = {"ffn": [], "attn": [], "mh": [], "md": []}
    for new_j, j in enumerate(kept):
        kind = cfg.pattern[j]
        i = cfg.kind_index(j)
        src, dst = f"layers.{j}.", f"layers.{new_j}."
        out[dst + "norm.weight"] = P[src + "norm.weight"][emb_idx]
        out[dst + "norm.bias"] = P[src + "norm.bias"][emb_idx]
        if kind == MAMBA:
            H, Pd = cfg.m_h_of(i), cfg.m_d_of(i)
            h_idx = _pick(mamba_heads, i, H)
            c_idx = _pick(mamba_channels, i, Pd)
            per_group = H // cfg.g
            groups = h_idx // per_group
            counts = np.bincount(groups, minlength=cfg.g)
            if len(set(counts.tolist())) != 1 or np.any(np.diff(groups) < 0):
                raise ValueError(
                    f"mamba head selection {h_idx.tolist()} in layer {j} breaks group structure "
                    f"(needs equal heads per group, grouped in order)"
                )
            inner = (h_idx[:, None] * Pd + c_idx[None, :]).reshape(-1)
            for name in ("W_z", "W_x", "W_dt", "W_B", "W_C"):
                rows = inner if name in ("W_z", "W_x") else h_idx if name == "W_dt" else np.arange(cfg.g * cfg.d_s)
                out[dst + name] = P[src + name][np.ix_(rows, emb_idx)]
            out[dst + "A_log"] = P[src + "A_log"][h_idx]
            out[dst + "D"] = P[src + "D"][h_idx]
            out[dst + "conv_x"] = P[src + "conv_x"][inner]
            out[dst + "conv_B"] = P[src + "conv_B"].copy()
            out[dst + "conv_C"] = P[src + "conv_C"].copy()
            out[dst + "gnorm"] = P[src + "gnorm"][inner]
            out[dst + "W_O"] = P[src + "W_O"][np.ix_(emb_idx, inner)]
            widths["mh"].append(len(h_idx))
            widths["md"].append(len(c_idx))
        elif kind == ATTN:
            h_idx = _pick(attn_heads, i, cfg.n_h_of(i))
            inner = (h_idx[:, None] * cfg.d_h + np.arange(cfg.d_h)[None, :]).reshape(-1)
            for name in ("W_Q", "W_K", "W_V"):
                out[dst + name] = P[src + name][np.ix_(inner, emb_idx)]
            out[dst + "W_O"] = P[src + "W_O"][np.ix_(emb_idx, inner)]
            widths["attn"].append(len(h_idx))
        else:
            f_idx = _pick(ffn, i, cfg.d_int_of(i))
            out[dst + "W_1"] = P[src + "W_1"][np.ix_(f_idx, emb_idx)]
            out[dst + "W_2"] = P[src + "W_2"][np.ix_(emb_idx, f_idx)]
            widths["ffn"].append(len(f_idx))

    d_int, ffn_w = _uniform_or_override(widths["ffn"], cfg.d_int)
    n_h, attn_w = _uniform_or_override(widths["attn"], cfg.n_h)
    m_h, mh_w = _uniform_or_override(widths["mh"], cfg.m_h)
    m_d, md_w = _uniform_or_override(widths["md"], cfg.m_d)
    if mh_w is not None or md_w is not None:
        mh_w = mh_w or tuple(widths["mh"])
        md_w = md_w or tuple(widths["md"])
    new_cfg = ModelConfig(
        d_e=len(emb_idx), d_int=d_int, n_h=n_h, d_h=cfg.d_h, m_h=m_h, m_d=m_d, g=cfg.g, d_s=cfg.d_s,
        pattern=tuple(cfg.pattern[j] for j in kept), vocab=cfg.vocab,
        conv_width=cfg.conv_width, eps=cfg.eps,
        ffn_widths=ffn_w, attn_heads=attn_w, mamba_heads=mh_w, mamba_channels=md_w,
    )
    return HybridModel(new_cfg, out)
