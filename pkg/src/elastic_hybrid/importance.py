"""Calibration-time importance scores and rankings for every elastic axis."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .model import ATTN, FFN, MAMBA, HybridModel, MaskSet, reindex, stack_forward


def descending_order(scores: np.ndarray) -> np.ndarray:
    """Indices by decreasing score; ties keep the lower index first."""
    return np.argsort(-np.asarray(scores), kind="stable")


@dataclass
class ImportanceRanking:
    """Per-axis orderings, most important first.

    ``mamba_head[i]`` lists heads group by group: positions
    ``g*hpg .. (g+1)*hpg`` hold the heads of group g in decreasing importance.
    ``depth`` lists layers most important first; ``depth_removal`` is the
    order in which the iterative search removed them.
    """

    emb: np.ndarray
    ffn: list[np.ndarray]
    mamba_ch: list[np.ndarray]
    mamba_head: list[np.ndarray]
    attn: list[np.ndarray]
    depth: np.ndarray
    scores: dict[str, object] = field(default_factory=dict)
    depth_removal: np.ndarray | None = None
    depth_step_scores: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def identity(cls, cfg) -> "ImportanceRanking":
        nm, na, nf = (len(cfg.layers_of(k)) for k in (MAMBA, ATTN, FFN))
        return cls(
            emb=np.arange(cfg.d_e),
            ffn=[np.arange(cfg.d_int_of(i)) for i in range(nf)],
            mamba_ch=[np.arange(cfg.m_d_of(i)) for i in range(nm)],
            mamba_head=[np.arange(cfg.m_h_of(i)) for i in range(nm)],
            attn=[np.arange(cfg.n_h_of(i)) for i in range(na)],
            depth=np.arange(cfg.N),
        )

    def width_identity(self) -> "ImportanceRanking":
        """Same depth order, identity width orders (the ranking of a re-sorted model)."""
        return replace(
            self,
            emb=np.arange(len(self.emb)),
            ffn=[np.arange(len(v)) for v in self.ffn],
            mamba_ch=[np.arange(len(v)) for v in self.mamba_ch],
            mamba_head=[np.arange(len(v)) for v in self.mamba_head],
            attn=[np.arange(len(v)) for v in self.attn],
        )

    def validate(self, cfg) -> None:
        def perm(v, n, what):
            v = np.asarray(v)
            if v.shape != (n,) or not np.array_equal(np.sort(v), np.arange(n)):
                raise ValueError(f"ranking {what} is not a permutation of range({n})")

        perm(self.emb, cfg.d_e, "emb")
        perm(self.depth, cfg.N, "depth")
        for i, v in enumerate(self.ffn):
            perm(v, cfg.d_int_of(i), f"ffn[{i}]")
        for i, v in enumerate(self.attn):
            perm(v, cfg.n_h_of(i), f"attn[{i}]")
        for i, v in enumerate(self.mamba_ch):
            perm(v, cfg.m_d_of(i), f"mamba_ch[{i}]")
        for i, v in enumerate(self.mamba_head):
            H = cfg.m_h_of(i)
            perm(v, H, f"mamba_head[{i}]")
            per = H // cfg.g
            if np.any(np.asarray(v) // per != np.arange(H) // per):
                raise ValueError(f"ranking mamba_head[{i}] moves a head across group boundaries")


# ---------------------------------------------------------------------------
# score formulas on collected activations


def _require(acts, what):
    if acts is None or len(acts) == 0:
        raise ValueError(f"empty calibration set for {what}")


def score_embedding(ln_outputs) -> np.ndarray:
    """Sum of |LN(X)| per channel over batch, positions and every supplied site.

    ``ln_outputs`` is an iterable of arrays shaped (..., d_e).
    """
    ln_outputs = list(ln_outputs)
    _require(ln_outputs, "embedding scores")
    return _ordered_sum([np.abs(a).reshape(-1, a.shape[-1]).sum(axis=0) for a in ln_outputs])


def score_ffn(x_ln: np.ndarray, W1: np.ndarray) -> np.ndarray:
    """Sum over batch/positions of |x W_1^T| per intermediate neuron."""
    _require(x_ln, "ffn scores")
    h = np.asarray(x_ln) @ np.asarray(W1).T
    return np.abs(h).reshape(-1, h.shape[-1]).sum(axis=0)


def score_attention(q: np.ndarray, n_heads: int) -> np.ndarray:
    """Sum over batch/positions of the L2 norm of each head's query slice."""
    _require(q, "attention scores")
    q = np.asarray(q)
    qh = q.reshape(-1, n_heads, q.shape[-1] // n_heads)
    return np.linalg.norm(qh, axis=-1).sum(axis=0)


def score_mamba(
    summed_x: np.ndarray, n_heads: int, n_groups: int, keep_channels: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Channel scores, head scores and group-constrained orders for one Mamba layer.

    ``summed_x`` is sum over batch/positions of LN(X) W_x^T, shape
    (m_h * m_d,). Returns ``(channel_scores, head_scores, channel_order,
    head_order)`` where ``head_order`` ranks heads within each group.
    """
    S = np.asarray(summed_x).reshape(n_heads, -1)
    m_d = S.shape[1]
    if keep_channels is None:
        keep_channels = m_d
    if not 1 <= keep_channels <= m_d:
        raise ValueError(f"keep_channels={keep_channels} outside [1, m_d={m_d}]")
    ch_scores = np.linalg.norm(S, axis=0)
    ch_order = descending_order(ch_scores)
    top = ch_order[:keep_channels]
    head_scores = np.linalg.norm(S[:, top], axis=1)
    per = n_heads // n_groups
    head_order = np.concatenate(
        [g * per + descending_order(head_scores[g * per : (g + 1) * per]) for g in range(n_groups)]
    )
    return ch_scores, head_scores, ch_order, head_order


def _ordered_sum(parts: list[np.ndarray]) -> np.ndarray:
    """Sum that does not depend on the order of ``parts`` (sorted before reducing)."""
    arr = np.stack(parts, axis=0)
    return np.sort(arr, axis=0).sum(axis=0)


# ---------------------------------------------------------------------------
# calibration over a token stream


def collect_activations(model: HybridModel, tokens: np.ndarray, batch_size: int = 32) -> dict:
    """Forward-only pass that accumulates per-axis activation statistics.

    Each batch contributes one partial sum per statistic; partials are then
    reduced order-independently so the result does not depend on batch order.
    """
    tokens = np.asarray(tokens)
    if tokens.size == 0 or len(tokens) == 0:
        raise ValueError("empty calibration set")
    cfg = model.config
    parts: dict[str, dict[int, list[np.ndarray]]] = {"emb": {}, "ffn": {}, "mamba_x": {}, "attn": {}}
    with ag.no_grad():
        for s in range(0, len(tokens), batch_size):
            trace: dict = {}
            stack_forward(model, None, tokens[s : s + batch_size], trace=trace)
            for j, ln in trace["ln"].items():
                ln = ln.astype(np.float64)
                parts["emb"].setdefault(j, []).append(np.abs(ln).reshape(-1, cfg.d_e).sum(axis=0))
            for j, h in trace.get("ffn_h", {}).items():
                parts["ffn"].setdefault(j, []).append(np.abs(h.astype(np.float64)).reshape(-1, h.shape[-1]).sum(axis=0))
            for j, x in trace.get("mamba_x", {}).items():
                parts["mamba_x"].setdefault(j, []).append(x.astype(np.float64).reshape(-1, x.shape[-1]).sum(axis=0))
            for j, q in trace.get("attn_q", {}).items():
                i = cfg.kind_index(j)
                n = cfg.n_h_of(i)
                qh = q.astype(np.float64).reshape(-1, n, q.shape[-1] // n)
                parts["attn"].setdefault(j, []).append(np.linalg.norm(qh, axis=-1).sum(axis=0))
    return {key: {j: _ordered_sum(v) for j, v in d.items()} for key, d in parts.items()}


def rank_width(model: HybridModel, stats: dict, keep_channels: int | None = None) -> ImportanceRanking:
    """Turn accumulated activation statistics into per-axis orders."""
    cfg = model.config
    emb_scores = _ordered_sum([stats["emb"][j] for j in sorted(stats["emb"])])
    ffn_scores = [stats["ffn"][j] for j in cfg.layers_of(FFN)]
    attn_scores = [stats["attn"][j] for j in cfg.layers_of(ATTN)]
    mamba = [
        score_mamba(stats["mamba_x"][j], cfg.m_h_of(cfg.kind_index(j)), cfg.g, keep_channels)
        for j in cfg.layers_of(MAMBA)
    ]
    return ImportanceRanking(
        emb=descending_order(emb_scores),
        ffn=[descending_order(s) for s in ffn_scores],
        mamba_ch=[m[2] for m in mamba],
        mamba_head=[m[3] for m in mamba],
        attn=[descending_order(s) for s in attn_scores],
        depth=np.arange(cfg.N),
        scores={
            "emb": emb_scores,
            "ffn": ffn_scores,
            "attn": attn_scores,
            "mamba_ch": [m[0] for m in mamba],
            "mamba_head": [m[1] for m in mamba],
        },
    )


def nmse(full_logits: np.ndarray, ablated_logits: np.ndarray) -> float:
    """Squared logit deviation normalised by the full model's logit energy."""
    f = np.asarray(full_logits, dtype=np.float64)
    a = np.asarray(ablated_logits, dtype=np.float64)
    return float(((f - a) ** 2).sum() / (f**2).sum())


def _logits_with_gamma(model: HybridModel, tokens: np.ndarray, gamma: np.ndarray, batch_size: int) -> np.ndarray:
    masks = MaskSet.full(model.config)
    masks.gamma = gamma
    outs = []
    with ag.no_grad():
        for s in range(0, len(tokens), batch_size):
            outs.append(stack_forward(model, masks, tokens[s : s + batch_size]).data.astype(np.float64))
    return np.concatenate(outs, axis=0)


def rank_depth(
    model: HybridModel, tokens: np.ndarray, mode: str = "iterative", batch_size: int = 32
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Order layers by how much removing them perturbs the full model's logits.

    Returns ``(order, removal, step_scores)``: ``order`` is most important
    first, ``removal`` is the order layers were dropped (least important
    first) and ``step_scores[k]`` holds the NMSE of every layer candidate at
    removal step k (NaN for layers already removed).

    ``single_pass`` scores each layer once against the full stack;
    ``iterative`` re-scores the remaining layers after each removal, always
    relative to the full model. Ties remove the lower index first.
    """
    N = model.config.N
    if N < 2:
        raise ValueError(f"depth ranking needs at least 2 layers, got {N}")
    tokens = np.asarray(tokens)
    if tokens.size == 0 or len(tokens) == 0:
        raise ValueError("empty calibration batch")
    if mode not in ("iterative", "single_pass"):
        raise ValueError(f"unknown depth ranking mode {mode!r}")

    full = _logits_with_gamma(model, tokens, np.ones(N), batch_size)
    if mode == "single_pass":
        scores = np.empty(N)
        for j in range(N):
            gamma = np.ones(N)
            gamma[j] = 0
            scores[j] = nmse(full, _logits_with_gamma(model, tokens, gamma, batch_size))
        removal = np.lexsort((np.arange(N), scores))
        return removal[::-1].copy(), removal, [scores]

    removed: list[int] = []
    step_scores: list[np.ndarray] = []
    while len(removed) < N:
        scores = np.full(N, np.nan)
        for j in range(N):
            if j in removed:
                continue
            gamma = np.ones(N)
            gamma[removed + [j]] = 0
            scores[j] = nmse(full, _logits_with_gamma(model, tokens, gamma, batch_size))
        step_scores.append(scores)
        candidates = np.where(~np.isnan(scores))[0]
        removed.append(int(candidates[np.argmin(scores[candidates])]))
    removal = np.array(removed)
    return removal[::-1].copy(), removal, step_scores


def calibrate(
    model: HybridModel,
    tokens: np.ndarray,
    depth_mode: str = "iterative",
    keep_channels: int | None = None,
    batch_size: int = 32,
    depth_tokens: np.ndarray | None = None,
) -> ImportanceRanking:
    """Score every width axis and rank depth on a calibration stream."""
    stats = collect_activations(model, tokens, batch_size)
    ranking = rank_width(model, stats, keep_channels)
    order, removal, steps = rank_depth(
        model, tokens if depth_tokens is None else depth_tokens, depth_mode, batch_size
    )
    ranking.depth = order
    ranking.depth_removal = removal
    ranking.depth_step_scores = steps
    ranking.validate(model.config)
    return ranking


def apply_ranking(model: HybridModel, ranking: ImportanceRanking) -> HybridModel:
    """Physically permute parameters so every width order becomes index order.

    The returned model computes the same function; afterwards every width
    mask is a prefix (use ``ranking.width_identity()`` to build masks).
    """
    ranking.validate(model.config)
    return reindex(
        model,
        emb=ranking.emb,
        mamba_heads=ranking.mamba_head,
        mamba_channels=ranking.mamba_ch,
        attn_heads=ranking.attn,
        ffn=ranking.ffn,
    )
