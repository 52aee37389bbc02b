"""Budget-conditioned architecture routers, mask generation and cost model.

Each elastic axis owns a two-layer router that maps a one-hot budget to
logits over that axis's candidate retained-counts. The ``mamba`` axis selects
(heads, channels-per-head) pairs; ``depth`` selects how many layers to keep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .importance import ImportanceRanking
from .model import ATTN, FFN, MAMBA, MaskSet, ModelConfig, parameter_shapes

AXES = ("emb", "mamba", "attn", "ffn", "depth")
WIDTH_AXES = ("mamba", "attn", "ffn")
AXIS_KIND = {"mamba": MAMBA, "attn": ATTN, "ffn": FFN}
HOMOGENEOUS, HETEROGENEOUS = "homogeneous", "heterogeneous"
MODE1, MODE2 = "mode1", "mode2"
PARAM_COUNT, MEMORY_BYTES = "param_count", "memory_bytes"
DISALLOWED_LOGIT = -1e9


@dataclass(frozen=True)
class BudgetSpec:
    id: int
    target_cost: float
    label: str

    def __post_init__(self):
        if not self.target_cost > 0:
            raise ValueError(f"budget {self.label!r} needs a positive target cost, got {self.target_cost}")


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear temperature and logit-scale schedules over ``horizon`` steps."""

    horizon: int = 1000
    tau_start: float = 1.0
    tau_end: float = 0.05
    scale_start: float = 1.0
    scale_end: float = 10.0


def anneal(schedule: AnnealSchedule, step: int) -> tuple[float, float]:
    """(temperature, logit scale) at ``step``; constant after the horizon."""
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    frac = 1.0 if schedule.horizon <= 0 else min(step / schedule.horizon, 1.0)
    tau = schedule.tau_start + frac * (schedule.tau_end - schedule.tau_start)
    scale = schedule.scale_start + frac * (schedule.scale_end - schedule.scale_start)
    return tau, scale


def default_config_sets(cfg: ModelConfig, fractions=(0.5, 0.75, 1.0)) -> dict[str, tuple]:
    """Three-point candidate sets at the given fractions of each axis maximum.

    Mamba head counts are rounded to multiples of the group count so every
    group keeps the same number of heads.
    """

    def frac(n, f, step=1):
        return max(step, int(round(n * f / step)) * step)

    return {
        "emb": tuple(sorted({frac(cfg.d_e, f) for f in fractions})),
        "mamba": tuple(sorted({(frac(cfg.m_h, f, cfg.g), frac(cfg.m_d, f)) for f in fractions})),
        "attn": tuple(sorted({frac(cfg.n_h, f) for f in fractions})),
        "ffn": tuple(sorted({frac(cfg.d_int, f) for f in fractions})),
    }


def default_budgets(cfg: ModelConfig, fractions=(1.0, 0.75, 0.5), labels=("full", "medium", "small")) -> list[BudgetSpec]:
    full = sum(math.prod(s) for s in parameter_shapes(cfg).values())
    return [BudgetSpec(i, float(round(full * f)), lab) for i, (f, lab) in enumerate(zip(fractions, labels))]


# ---------------------------------------------------------------------------
# router bank


@dataclass
class RouterBank:
    """Per-axis router parameters plus the configuration space they choose from."""

    config: ModelConfig
    budgets: list[BudgetSpec]
    sets: dict[str, tuple]
    modes: dict[str, str]
    d_router: int
    min_depth: int
    params: dict[str, dict[str, Tensor]]
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    tau: float = 1.0
    logit_scale: float = 1.0

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        budgets: list[BudgetSpec] | None = None,
        *,
        d_router: int = 32,
        sets: dict[str, tuple] | None = None,
        modes: dict[str, str] | None = None,
        min_depth: int | None = None,
        schedule: AnnealSchedule | None = None,
        seed: int = 0,
    ) -> "RouterBank":
        if config.ffn_widths or config.attn_heads or config.mamba_heads or config.mamba_channels:
            raise ValueError("routers are defined on a uniform maximum config (no per-layer overrides)")
        budgets = list(budgets) if budgets is not None else default_budgets(config)
        if not budgets:
            raise ValueError("at least one budget is required")
        if [b.id for b in budgets] != list(range(len(budgets))):
            raise ValueError("budget ids must be 0..n-1 in order")
        sets = dict(sets) if sets is not None else default_config_sets(config)
        modes = {**{a: HOMOGENEOUS for a in AXES}, **(modes or {})}
        min_depth = min_depth if min_depth is not None else max(1, math.ceil(config.N / 2))
        bank = cls(
            config=config, budgets=budgets, sets=sets, modes=modes, d_router=d_router,
            min_depth=min_depth, params={}, schedule=schedule or AnnealSchedule(),
        )
        bank.validate()
        rng = np.random.default_rng(seed)
        n_t = len(budgets)
        for axis in AXES:
            n_out = bank.n_out(axis)
            bank.params[axis] = {
                "W1": Tensor(rng.standard_normal((d_router, n_t)), requires_grad=True),
                "b1": Tensor(np.zeros(d_router), requires_grad=True),
                "W2": Tensor(rng.standard_normal((n_out, d_router)) * 0.1 / math.sqrt(d_router), requires_grad=True),
                "b2": Tensor(np.zeros(n_out), requires_grad=True),
            }
        return bank

    def validate(self) -> None:
        cfg = self.config
        maxima = {"emb": cfg.d_e, "attn": cfg.n_h, "ffn": cfg.d_int}
        for axis in ("emb", "attn", "ffn"):
            vals = list(self.sets[axis])
            if vals != sorted(set(vals)) or vals[0] < 1 or vals[-1] > maxima[axis]:
                raise ValueError(f"config set {axis}={vals} must be ascending within [1, {maxima[axis]}]")
        pairs = [tuple(p) for p in self.sets["mamba"]]
        if pairs != sorted(set(pairs)):
            raise ValueError(f"config set mamba={pairs} must be ascending")
        for h, c in pairs:
            if not (1 <= h <= cfg.m_h and 1 <= c <= cfg.m_d) or h % cfg.g:
                raise ValueError(f"mamba option ({h}, {c}) outside maxima or not a multiple of g={cfg.g}")
        for axis, mode in self.modes.items():
            if mode not in (HOMOGENEOUS, HETEROGENEOUS):
                raise ValueError(f"unknown router mode {mode!r} for axis {axis}")
            if mode == HETEROGENEOUS and axis not in WIDTH_AXES:
                raise ValueError(f"axis {axis} only supports homogeneous routing")
        if not 1 <= self.min_depth <= cfg.N:
            raise ValueError(f"min_depth={self.min_depth} outside [1, {cfg.N}]")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    # configuration-space helpers

    def options(self, axis: str) -> tuple:
        if axis == "depth":
            return tuple(range(1, self.config.N + 1))
        return tuple(self.sets[axis])

    def rows(self, axis: str) -> int:
        if self.modes.get(axis) == HETEROGENEOUS:
            return len(self.config.layers_of(AXIS_KIND[axis]))
        return 1

    def n_out(self, axis: str) -> int:
        return len(self.options(axis)) * self.rows(axis)

    @property
    def n_targets(self) -> int:
        return len(self.budgets)

    def budget(self, key: int | str) -> BudgetSpec:
        for b in self.budgets:
            if b.id == key or b.label == key:
                return b
        raise KeyError(f"budget {key!r} is not among the trained budgets {[b.label for b in self.budgets]}")

    def onehot(self, budget: BudgetSpec | int | str) -> np.ndarray:
        b = budget if isinstance(budget, BudgetSpec) else self.budget(budget)
        e = np.zeros(self.n_targets)
        e[b.id] = 1.0
        return e

    def parameters(self) -> list[Tensor]:
        return [self.params[a][k] for a in AXES for k in ("W1", "b1", "W2", "b2")]

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def requires_grad_(self, flag: bool = True) -> "RouterBank":
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def set_step(self, step: int) -> None:
        self.tau, self.logit_scale = anneal(self.schedule, step)


def router_forward(bank: RouterBank, axis: str, onehot, scale: float | None = None) -> Tensor:
    """Logits ``scale * (W2 leaky_relu(W1 e + b1) + b2)`` for one axis."""
    if axis not in bank.params:
        raise KeyError(f"unknown router axis {axis!r}; expected one of {AXES}")
    p = bank.params[axis]
    e = ag.as_tensor(np.asarray(onehot, dtype=np.float64).reshape(-1, 1))
    h = ag.leaky_relu(ag.add(ag.matmul(p["W1"], e).reshape(-1), p["b1"]))
    z = ag.add(ag.matmul(p["W2"], h.reshape(-1, 1)).reshape(-1), p["b2"])
    return ag.mul(z, bank.logit_scale if scale is None else scale)


def gumbel_softmax(logits, tau: float, rng: np.random.Generator | int | None = None, deterministic: bool = False) -> Tensor:
    """Relaxed categorical sample along the last axis; ``deterministic`` drops the noise."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return ag.softmax(ag.mul(_perturb(logits, rng, deterministic), 1.0 / tau), axis=-1)


def _perturb(logits, rng, deterministic: bool) -> Tensor:
    z = ag.as_tensor(logits)
    return z if deterministic else ag.add(z, ag.gumbel_sample(z.shape, rng))


@dataclass
class AxisRoute:
    logits: Tensor  # (rows, n_options), scaled, disallowed entries at DISALLOWED_LOGIT
    probs: Tensor   # (rows, n_options)
    scores: np.ndarray | None = None  # logits plus the Gumbel noise actually drawn

    @property
    def choice(self) -> np.ndarray:
        # argmax of the perturbed logits; softmax can round near-ties to equal probabilities
        s = self.scores if self.scores is not None else self.probs.data
        return np.argmax(s, axis=-1)


def _depth_penalty(bank: RouterBank) -> np.ndarray:
    pen = np.zeros(bank.config.N)
    pen[: bank.min_depth - 1] = DISALLOWED_LOGIT
    return pen


def route(
    bank: RouterBank,
    budget: BudgetSpec | int | str,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
    tau: float | None = None,
    scale: float | None = None,
) -> dict[str, AxisRoute]:
    """Router forward plus Gumbel-Softmax for every axis at one budget."""
    e = bank.onehot(budget)
    tau = bank.tau if tau is None else tau
    out = {}
    for axis in AXES:
        z = router_forward(bank, axis, e, scale)
        if axis == "depth":
            z = ag.add(z, _depth_penalty(bank))
        z = z.reshape(bank.rows(axis), len(bank.options(axis)))
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        noisy = _perturb(z, rng, deterministic)
        out[axis] = AxisRoute(z, ag.softmax(ag.mul(noisy, 1.0 / tau), axis=-1), noisy.data.copy())
    return out


# ---------------------------------------------------------------------------
# selections and masks


@dataclass(frozen=True)
class Selection:
    """Retained counts for one sub-network.

    ``mamba`` holds (heads, channels per head) per Mamba layer; ``layers``
    lists active layer indices in stack order.
    """

    emb: int
    mamba: tuple[tuple[int, int], ...]
    attn: tuple[int, ...]
    ffn: tuple[int, ...]
    layers: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def dominated_by(self, other: "Selection") -> bool:
        """True when every count here is <= the matching count of ``other``."""
        return (
            self.emb <= other.emb
            and all(h <= h2 and c <= c2 for (h, c), (h2, c2) in zip(self.mamba, other.mamba))
            and all(a <= b for a, b in zip(self.attn, other.attn))
            and all(a <= b for a, b in zip(self.ffn, other.ffn))
            and set(self.layers) <= set(other.layers)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "emb": self.emb, "mamba": [list(p) for p in self.mamba], "attn": list(self.attn),
            "ffn": list(self.ffn), "layers": list(self.layers),
        }

    @classmethod
    def full(cls, cfg: ModelConfig) -> "Selection":
        nm, na, nf = (len(cfg.layers_of(k)) for k in (MAMBA, ATTN, FFN))
        return cls(
            emb=cfg.d_e,
            mamba=tuple((cfg.m_h_of(i), cfg.m_d_of(i)) for i in range(nm)),
            attn=tuple(cfg.n_h_of(i) for i in range(na)),
            ffn=tuple(cfg.d_int_of(i) for i in range(nf)),
            layers=tuple(range(cfg.N)),
        )


def selection_from_choices(bank: RouterBank, ranking: ImportanceRanking, choices: dict[str, np.ndarray]) -> Selection:
    """Turn per-axis option indices (one per router row) into retained counts."""
    cfg = bank.config

    def per_layer(axis):
        opts = bank.options(axis)
        idx = np.asarray(choices[axis]).reshape(-1)
        n = len(cfg.layers_of(AXIS_KIND[axis]))
        if len(idx) not in (1, n):
            raise ValueError(f"axis {axis}: {len(idx)} choices for {n} layers")
        return tuple(opts[int(idx[0 if len(idx) == 1 else i])] for i in range(n))

    L = bank.options("depth")[int(np.asarray(choices["depth"]).reshape(-1)[0])]
    return Selection(
        emb=bank.options("emb")[int(np.asarray(choices["emb"]).reshape(-1)[0])],
        mamba=tuple(tuple(p) for p in per_layer("mamba")),
        attn=per_layer("attn"),
        ffn=per_layer("ffn"),
        layers=tuple(sorted(int(j) for j in ranking.depth[:L])),
    )


def decode(bank: RouterBank, ranking: ImportanceRanking, budget: BudgetSpec | int | str) -> Selection:
    """Deployment decoding: no noise, logit scale 1, argmax on every axis."""
    with ag.no_grad():
        routes = route(bank, budget, deterministic=True, tau=1.0, scale=1.0)
    return selection_from_choices(bank, ranking, {a: r.choice for a, r in routes.items()})


def prefix_indices(ranking: ImportanceRanking, cfg: ModelConfig, sel: Selection) -> dict[str, Any]:
    """Retained index arrays per axis (in ranking order) for ``reindex``."""
    mh = []
    for i, (h, _c) in enumerate(sel.mamba):
        order = np.asarray(ranking.mamba_head[i])
        per = cfg.m_h_of(i) // cfg.g
        keep = h // cfg.g
        mh.append(np.concatenate([order[g * per : g * per + keep] for g in range(cfg.g)]))
    return {
        "emb": np.asarray(ranking.emb)[: sel.emb],
        "mamba_heads": mh,
        "mamba_channels": [np.asarray(ranking.mamba_ch[i])[:c] for i, (_h, c) in enumerate(sel.mamba)],
        "attn_heads": [np.asarray(ranking.attn[i])[:n] for i, n in enumerate(sel.attn)],
        "ffn": [np.asarray(ranking.ffn[i])[:f] for i, f in enumerate(sel.ffn)],
        "layers": list(sel.layers),
    }


def _indicator(n: int, idx) -> np.ndarray:
    m = np.zeros(n)
    m[np.asarray(idx, dtype=np.int64)] = 1.0
    return m


def _mamba_option_masks(cfg, ranking, i, h, c):
    """(per-channel mask of length m_h*m_d, per-head mask of length m_h)."""
    H, Pd = cfg.m_h_of(i), cfg.m_d_of(i)
    order = np.asarray(ranking.mamba_head[i])
    per = H // cfg.g
    heads = _indicator(H, np.concatenate([order[g * per : g * per + h // cfg.g] for g in range(cfg.g)]))
    chans = _indicator(Pd, np.asarray(ranking.mamba_ch[i])[:c])
    return np.outer(heads, chans).reshape(-1), heads


def option_matrices(bank: RouterBank, ranking: ImportanceRanking) -> dict[str, Any]:
    """Binary mask of every candidate option, stacked per axis (and per layer).

    Returns ``emb`` (n_opt, d_e), ``depth`` (N, N), and per-layer lists for
    ``mamba`` / ``mamba_heads`` / ``attn`` / ``ffn``.
    """
    cfg = bank.config
    out: dict[str, Any] = {
        "emb": np.stack([_indicator(cfg.d_e, np.asarray(ranking.emb)[:e]) for e in bank.options("emb")]),
        "depth": np.stack([_indicator(cfg.N, np.asarray(ranking.depth)[:L]) for L in bank.options("depth")]),
        "mamba": [], "mamba_heads": [], "attn": [], "ffn": [],
    }
    for i in range(len(cfg.layers_of(MAMBA))):
        pairs = [_mamba_option_masks(cfg, ranking, i, h, c) for h, c in bank.options("mamba")]
        out["mamba"].append(np.stack([p[0] for p in pairs]))
        out["mamba_heads"].append(np.stack([p[1] for p in pairs]))
    for i in range(len(cfg.layers_of(ATTN))):
        out["attn"].append(np.stack([
            np.repeat(_indicator(cfg.n_h_of(i), np.asarray(ranking.attn[i])[:n]), cfg.d_h) for n in bank.options("attn")
        ]))
    for i in range(len(cfg.layers_of(FFN))):
        out["ffn"].append(np.stack([_indicator(cfg.d_int_of(i), np.asarray(ranking.ffn[i])[:f]) for f in bank.options("ffn")]))
    return out


def selection_masks(cfg: ModelConfig, ranking: ImportanceRanking, sel: Selection, dtype=np.float64) -> MaskSet:
    """Discrete masks for a selection (the inference-time masks)."""
    idx = prefix_indices(ranking, cfg, sel)
    mamba, heads = [], []
    for i, (h, c) in enumerate(sel.mamba):
        m, hd = _mamba_option_masks(cfg, ranking, i, h, c)
        mamba.append(m.astype(dtype))
        heads.append(hd.astype(dtype))
    return MaskSet(
        emb=_indicator(cfg.d_e, idx["emb"]).astype(dtype),
        mamba=mamba,
        mamba_heads=heads,
        attn=[np.repeat(_indicator(cfg.n_h_of(i), a), cfg.d_h).astype(dtype) for i, a in enumerate(idx["attn_heads"])],
        ffn=[_indicator(cfg.d_int_of(i), f).astype(dtype) for i, f in enumerate(idx["ffn"])],
        gamma=_indicator(cfg.N, list(sel.layers)).astype(dtype),
    )


def _straight_through(r: AxisRoute) -> Tensor:
    onehot = np.zeros(r.probs.shape)
    onehot[np.arange(onehot.shape[0]), r.choice] = 1.0
    return ag.add(ag.sub(r.probs, r.probs.detach()), onehot)


def _row_weights(bank: RouterBank, routes: dict[str, AxisRoute], integration: str) -> dict[str, Tensor]:
    if integration == MODE2:
        return {a: r.probs for a, r in routes.items()}
    if integration == MODE1:
        return {a: _straight_through(r) for a, r in routes.items()}
    raise ValueError(f"unknown integration mode {integration!r}")


def _combine(weights: Tensor, row: int, matrix: np.ndarray) -> Tensor:
    w = ag.getitem(weights, (slice(row, row + 1), slice(None)))
    return ag.matmul(w, matrix).reshape(-1)


def generate_masks(
    bank: RouterBank,
    ranking: ImportanceRanking,
    routes: dict[str, AxisRoute],
    integration: str = MODE2,
    training: bool = True,
    dtype=np.float32,
    matrices: dict | None = None,
) -> tuple[MaskSet, Selection]:
    """Build the masks for one routed budget.

    Inference (``training=False``) returns discrete prefix masks of the argmax
    selection. MODE2 training masks are probability-weighted mixtures of the
    nested option masks; MODE1 training masks are the selected option's mask
    scaled by its logit, with a straight-through path to the probabilities.
    """
    cfg = bank.config
    for axis, r in routes.items():
        want = (bank.rows(axis), len(bank.options(axis)))
        if tuple(r.probs.shape) != want:
            raise ValueError(f"axis {axis}: probabilities shaped {r.probs.shape}, expected {want}")
    sel = selection_from_choices(bank, ranking, {a: r.choice for a, r in routes.items()})
    if not training:
        return selection_masks(cfg, ranking, sel, dtype), sel

    mats = matrices if matrices is not None else option_matrices(bank, ranking)
    W = _row_weights(bank, routes, integration)

    def row(axis, i):
        return 0 if bank.rows(axis) == 1 else i

    def build(axis, key, i=None):
        m = mats[key] if i is None else mats[key][i]
        return ag.cast(_combine(W[axis], 0 if i is None else row(axis, i), m), dtype)

    emb = build("emb", "emb")
    gamma = build("depth", "depth")
    mamba = [build("mamba", "mamba", i) for i in range(len(mats["mamba"]))]
    heads = [build("mamba", "mamba_heads", i) for i in range(len(mats["mamba_heads"]))]
    attn = [build("attn", "attn", i) for i in range(len(mats["attn"]))]
    ffn = [build("ffn", "ffn", i) for i in range(len(mats["ffn"]))]
    masks = MaskSet(emb=emb, mamba=mamba, mamba_heads=heads, attn=attn, ffn=ffn, gamma=gamma)
    if integration == MODE1:
        # scale each axis by the chosen option's logit; normalisation uses the binary support
        binary = selection_masks(cfg, ranking, sel, dtype)
        scale = {}
        for axis, r in routes.items():
            rows = np.arange(r.logits.shape[0])
            scale[axis] = ag.getitem(r.logits, (rows, r.choice))
        masks.logit_scale = {a: s.data.copy() for a, s in scale.items()}

        def sc(axis, t, i=0):
            s = scale[axis]
            return ag.mul(t, ag.cast(ag.getitem(s, row(axis, i) if s.shape[0] > 1 else 0), dtype))

        masks.emb_norm = binary.emb
        masks.mamba_norm = binary.mamba
        masks.emb = sc("emb", emb)
        masks.gamma = sc("depth", gamma)
        masks.mamba = [sc("mamba", m, i) for i, m in enumerate(mamba)]
        masks.attn = [sc("attn", m, i) for i, m in enumerate(attn)]
        masks.ffn = [sc("ffn", m, i) for i, m in enumerate(ffn)]
    return masks, sel


# ---------------------------------------------------------------------------
# cost model


def _param_terms(cfg: ModelConfig, emb, mamba_heads, mamba_inner, attn, ffn, gamma):
    """Parameter count as a multilinear expression in the retained counts.

    Arguments may be numbers or Tensors; ``gamma[j]`` weights layer j.
    """
    K, gs = cfg.conv_width, cfg.g * cfg.d_s
    total = 2 * cfg.vocab * emb + 2 * emb  # embedding, head, final norm
    for j, kind in enumerate(cfg.pattern):
        i = cfg.kind_index(j)
        layer = 2 * emb
        if kind == MAMBA:
            h, inner = mamba_heads[i], mamba_inner[i]
            layer = layer + 3 * inner * emb + 2 * gs * emb + h * emb + 2 * h + inner * K + 2 * gs * K + inner
        elif kind == ATTN:
            layer = layer + 4 * cfg.d_h * attn[i] * emb
        else:
            layer = layer + 2 * ffn[i] * emb
        total = total + gamma[j] * layer
    return total


def cost_param_count(cfg: ModelConfig, sel: Selection) -> int:
    """Exact parameter count of the sub-network described by ``sel``."""
    nm, na, nf = (len(cfg.layers_of(k)) for k in (MAMBA, ATTN, FFN))
    if len(sel.mamba) != nm or len(sel.attn) != na or len(sel.ffn) != nf:
        raise ValueError("selection layer counts do not match the config")
    if not 0 <= sel.emb <= cfg.d_e:
        raise ValueError(f"emb count {sel.emb} exceeds maximum {cfg.d_e}")
    for i, (h, c) in enumerate(sel.mamba):
        if not (0 <= h <= cfg.m_h_of(i) and 0 <= c <= cfg.m_d_of(i)):
            raise ValueError(f"mamba layer {i} counts ({h}, {c}) exceed maxima ({cfg.m_h_of(i)}, {cfg.m_d_of(i)})")
    for i, n in enumerate(sel.attn):
        if not 0 <= n <= cfg.n_h_of(i):
            raise ValueError(f"attention layer {i} head count {n} exceeds maximum {cfg.n_h_of(i)}")
    for i, f in enumerate(sel.ffn):
        if not 0 <= f <= cfg.d_int_of(i):
            raise ValueError(f"ffn layer {i} width {f} exceeds maximum {cfg.d_int_of(i)}")
    if any(not 0 <= j < cfg.N for j in sel.layers):
        raise ValueError(f"layer indices {sel.layers} outside [0, {cfg.N})")
    gamma = [1 if j in set(sel.layers) else 0 for j in range(cfg.N)]
    return int(_param_terms(
        cfg, sel.emb, [h for h, _ in sel.mamba], [h * c for h, c in sel.mamba], list(sel.attn), list(sel.ffn), gamma
    ))


@dataclass(frozen=True)
class CostModel:
    config: ModelConfig
    metric: str = PARAM_COUNT
    dtype_bytes: int = 4

    def __post_init__(self):
        if self.metric not in (PARAM_COUNT, MEMORY_BYTES):
            raise ValueError(f"unsupported cost metric {self.metric!r}")

    def _unit(self) -> int:
        return 1 if self.metric == PARAM_COUNT else self.dtype_bytes

    def cost(self, sel: Selection) -> int:
        return cost_param_count(self.config, sel) * self._unit()

    def expected(self, bank: RouterBank, weights: dict[str, Tensor], depth_order) -> Tensor:
        """Cost with every count replaced by its weight-averaged value.

        Axes are independent and the count is multilinear in them, so this
        equals the expectation of the cost under the routed distribution.
        ``depth_order`` lists layers most important first.
        """
        cfg = self.config
        rank_of = np.empty(cfg.N, dtype=np.int64)
        rank_of[np.asarray(depth_order)] = np.arange(cfg.N)

        def counts(axis, values, i=0):
            w = weights[axis]
            r = 0 if bank.rows(axis) == 1 else i
            return ag.matmul(ag.getitem(w, (slice(r, r + 1), slice(None))), np.asarray(values, dtype=np.float64).reshape(-1, 1)).reshape(())

        pairs = bank.options("mamba")
        nm, na, nf = (len(cfg.layers_of(k)) for k in (MAMBA, ATTN, FFN))
        depth_mat = np.stack([_indicator(cfg.N, np.arange(L)) for L in bank.options("depth")])
        gamma_rank = ag.matmul(weights["depth"], depth_mat).reshape(-1)  # by importance rank position
        gamma = [ag.getitem(gamma_rank, int(rank_of[j])) for j in range(cfg.N)]
        return ag.mul(
            _param_terms(
                cfg,
                counts("emb", bank.options("emb")),
                [counts("mamba", [h for h, _ in pairs], i) for i in range(nm)],
                [counts("mamba", [h * c for h, c in pairs], i) for i in range(nm)],
                [counts("attn", bank.options("attn"), i) for i in range(na)],
                [counts("ffn", bank.options("ffn"), i) for i in range(nf)],
                gamma,
            ),
            float(self._unit()),
        )


def expected_cost(bank: RouterBank, ranking: ImportanceRanking, routes: dict[str, AxisRoute],
                  integration: str = MODE2, metric: str = PARAM_COUNT, dtype_bytes: int = 4) -> Tensor:
    """Differentiable cost of the routed selection (expectation in MODE2, straight-through in MODE1)."""
    weights = _row_weights(bank, routes, integration)
    return CostModel(bank.config, metric, dtype_bytes).expected(bank, weights, ranking.depth)


def router_loss(cost, budget: BudgetSpec):
    """Relative L1 distance between achieved and target cost."""
    if isinstance(cost, Tensor):
        return ag.mul(ag.abs_(ag.sub(cost, budget.target_cost)), 1.0 / budget.target_cost)
    return abs(cost - budget.target_cost) / budget.target_cost


def router_overhead(bank: RouterBank, model_params: int) -> float:
    return bank.param_count() / model_params
