import numpy as np
import pytest

from elastic_hybrid.model import ModelConfig, HybridModel, MaskSet


def prefix(n, k, dtype=np.float64):
    m = np.zeros(n, dtype)
    m[:k] = 1.0
    return m


def prefix_masks(cfg: ModelConfig, emb, mamba_heads, mamba_ch, attn, ffn, gamma=None, dtype=np.float64) -> MaskSet:
    """Prefix masks built directly from counts (an oracle independent of the router)."""
    nm, na, nf = (len(cfg.layers_of(k)) for k in ("M", "A", "F"))
    per_group = cfg.m_h // cfg.g
    keep_per_group = mamba_heads // cfg.g
    head = np.zeros(cfg.m_h, dtype)
    for g in range(cfg.g):
        head[g * per_group : g * per_group + keep_per_group] = 1.0
    ch = prefix(cfg.m_d, mamba_ch, dtype)
    return MaskSet(
        emb=prefix(cfg.d_e, emb, dtype),
        mamba=[np.kron(head, ch) for _ in range(nm)],
        mamba_heads=[head.copy() for _ in range(nm)],
        attn=[np.kron(prefix(cfg.n_h, attn, dtype), np.ones(cfg.d_h, dtype)) for _ in range(na)],
        ffn=[prefix(cfg.d_int, ffn, dtype) for _ in range(nf)],
        gamma=np.ones(cfg.N, dtype) if gamma is None else np.asarray(gamma, dtype),
    )


SMALL = ModelConfig(d_e=12, d_int=16, n_h=4, d_h=3, m_h=4, m_d=4, g=2, d_s=3,
                    pattern=("M", "A", "F", "M"), vocab=20)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return HybridModel.init(SMALL, seed=0, dtype=np.float64)


@pytest.fixture
def tokens():
    return np.random.default_rng(0).integers(0, SMALL.vocab, size=(3, 10))
