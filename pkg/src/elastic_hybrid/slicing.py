"""NEMELAST/1 checkpoints and zero-shot extraction of nested sub-models.

File layout (little-endian)::

    magic   b"NEMELAST"
    u32     header length, then UTF-8 ``key = value`` lines
    u32     tensor count
    entries name_len:u16, name, dtype:u8, rank:u8, extents:u64[rank], offset:u64
    payload row-major tensor bytes, offsets relative to the payload start
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .importance import ImportanceRanking
from .model import HybridModel, ModelConfig, parameter_shapes, reindex, stack_forward
from .router import (
    AXES, AnnealSchedule, BudgetSpec, RouterBank, Selection, cost_param_count, decode, prefix_indices,
    selection_masks,
)

MAGIC = b"NEMELAST"
VERSION = "NEMELAST/1"
MAX_ROUTER_OVERHEAD = 0.02
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


@dataclass
class Checkpoint:
    header: dict[str, str]
    model: HybridModel
    bank: RouterBank | None = None
    ranking: ImportanceRanking | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def budgets(self) -> list[BudgetSpec]:
        return self.bank.budgets if self.bank is not None else []

    def budget(self, key) -> BudgetSpec:
        if isinstance(key, BudgetSpec):
            key = key.label
        for b in self.budgets:
            if b.label == key or b.id == key:
                return b
        raise KeyError(f"budget {key!r} is not in the checkpoint's trained budgets {[b.label for b in self.budgets]}")


def router_bytes(bank: RouterBank) -> int:
    return int(sum(t.data.nbytes for t in bank.parameters()))


def model_bytes(model: HybridModel) -> int:
    return int(sum(t.data.nbytes for t in model.parameters()))


# ---------------------------------------------------------------------------
# header encoding


def _header(model: HybridModel, bank: RouterBank | None, metadata: dict | None) -> dict[str, str]:
    h: dict[str, str] = {"format": VERSION}
    for k, v in model.config.to_dict().items():
        h[f"model.{k}"] = str(v)
    h["model.params"] = str(model.param_count())
    h["model.bytes"] = str(model_bytes(model))
    if bank is not None:
        h["router.d_router"] = str(bank.d_router)
        h["router.min_depth"] = str(bank.min_depth)
        h["router.modes"] = json.dumps(bank.modes, sort_keys=True)
        h["router.sets"] = json.dumps({a: [list(x) if isinstance(x, tuple) else x for x in v] for a, v in bank.sets.items()}, sort_keys=True)
        h["router.budgets"] = json.dumps([[b.id, b.label, b.target_cost] for b in bank.budgets])
        s = bank.schedule
        h["router.schedule"] = json.dumps([s.horizon, s.tau_start, s.tau_end, s.scale_start, s.scale_end])
        h["router.tau"] = repr(float(bank.tau))
        h["router.logit_scale"] = repr(float(bank.logit_scale))
        h["router.params"] = str(bank.param_count())
        h["router.bytes"] = str(router_bytes(bank))
        h["router.overhead"] = repr(router_bytes(bank) / model_bytes(model))
    for k, v in (metadata or {}).items():
        h[f"meta.{k}"] = str(v)
    return h


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if " = " not in line:
            raise ValueError(f"malformed checkpoint header line {n}: {line!r}")
        k, v = line.split(" = ", 1)
        out[k] = v
    return out


def _config_from_header(h: dict[str, str]) -> ModelConfig:
    d = {k[len("model."):]: v for k, v in h.items() if k.startswith("model.") and k not in ("model.params", "model.bytes")}
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------------------
# save / load


def _tensors(model, bank, ranking, extra) -> dict[str, np.ndarray]:
    t = {f"model/{k}": v.data for k, v in model.params.items()}
    if bank is not None:
        for a in AXES:
            for k in ("W1", "b1", "W2", "b2"):
                t[f"router/{a}/{k}"] = bank.params[a][k].data
    if ranking is not None:
        t.update(_tensors_ranking(ranking))
    for k, v in (extra or {}).items():
        t[f"extra/{k}"] = np.asarray(v)
    return t


def _tensors_ranking(ranking: ImportanceRanking) -> dict[str, np.ndarray]:
    t = {
        "ranking/emb": np.asarray(ranking.emb, dtype=np.int64),
        "ranking/depth": np.asarray(ranking.depth, dtype=np.int64),
    }
    if ranking.depth_removal is not None:
        t["ranking/depth_removal"] = np.asarray(ranking.depth_removal, dtype=np.int64)
    for key in ("ffn", "mamba_ch", "mamba_head", "attn"):
        for i, v in enumerate(getattr(ranking, key)):
            t[f"ranking/{key}/{i}"] = np.asarray(v, dtype=np.int64)
    return t


def save(model: HybridModel, bank: RouterBank | None, ranking: ImportanceRanking | None, path: str | Path,
         metadata: dict | None = None, extra: dict | None = None) -> Checkpoint:
    """Write a checkpoint; refuses router overhead at or above 2% of model bytes."""
    expected = parameter_shapes(model.config)
    if set(expected) != set(model.params):
        raise ValueError("model parameters do not match the config's inventory")
    if ranking is not None:
        ranking.validate(model.config)
    header = _header(model, bank, metadata)
    if bank is not None and router_bytes(bank) >= MAX_ROUTER_OVERHEAD * model_bytes(model):
        raise ValueError(f"router overhead {header['router.overhead']} is not below {MAX_ROUTER_OVERHEAD}")
    write_tensors(header, _tensors(model, bank, ranking, extra), path)
    return Checkpoint(header, model, bank, ranking, dict(extra or {}))


def write_tensors(header: dict[str, str], tensors: dict[str, np.ndarray], path: str | Path) -> None:
    """Low-level writer shared by checkpoints and ranking files."""
    header = {"format": VERSION, **{k: v for k, v in header.items() if k != "format"}}
    head_bytes = "".join(f"{k} = {v}\n" for k, v in header.items()).encode("utf-8")
    directory = bytearray()
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise ValueError(f"tensor {name} has unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        nb = name.encode("utf-8")
        directory += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_CODES[dt], arr.ndim)
        directory += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<Q", offset)
        payloads.append(data)
        offset += len(data)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head_bytes)))
        f.write(head_bytes)
        f.write(struct.pack("<I", len(tensors)))
        f.write(bytes(directory))
        for p in payloads:
            f.write(p)


def ranking_tensors(ranking: ImportanceRanking) -> dict[str, np.ndarray]:
    return _tensors_ranking(ranking)


def ranking_from_tensors(t: dict[str, np.ndarray]) -> ImportanceRanking:
    def per_layer(key):
        out, i = [], 0
        while f"ranking/{key}/{i}" in t:
            out.append(t[f"ranking/{key}/{i}"])
            i += 1
        return out

    return ImportanceRanking(
        emb=t["ranking/emb"], ffn=per_layer("ffn"), mamba_ch=per_layer("mamba_ch"),
        mamba_head=per_layer("mamba_head"), attn=per_layer("attn"), depth=t["ranking/depth"],
        depth_removal=t.get("ranking/depth_removal"),
    )


def read_tensors(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a NEMELAST checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = _parse_header(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    version = header.get("format")
    if version != VERSION:
        raise ValueError(f"checkpoint version mismatch: file has {version!r}, reader supports {VERSION!r}")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        (off,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries.append((name, DTYPES[code], shape, off))
    tensors = {}
    for name, dt, shape, off in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=dt, count=n, offset=pos + off).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return header, tensors


def load(path: str | Path) -> Checkpoint:
    header, t = read_tensors(path)
    cfg = _config_from_header(header)
    model = HybridModel(cfg, {k[len("model/"):]: v for k, v in t.items() if k.startswith("model/")})
    bank = None
    if "router.d_router" in header:
        sets = {a: tuple(tuple(x) if isinstance(x, list) else x for x in v) for a, v in json.loads(header["router.sets"]).items()}
        budgets = [BudgetSpec(int(i), float(c), str(lab)) for i, lab, c in json.loads(header["router.budgets"])]
        sched = json.loads(header["router.schedule"])
        bank = RouterBank(
            config=cfg, budgets=budgets, sets=sets, modes=json.loads(header["router.modes"]),
            d_router=int(header["router.d_router"]), min_depth=int(header["router.min_depth"]),
            params={a: {k: Tensor(t[f"router/{a}/{k}"]) for k in ("W1", "b1", "W2", "b2")} for a in AXES},
            schedule=AnnealSchedule(int(sched[0]), *map(float, sched[1:])),
            tau=float(header["router.tau"]), logit_scale=float(header["router.logit_scale"]),
        )
        bank.validate()
    ranking = None
    if "ranking/emb" in t:
        ranking = ranking_from_tensors(t)
        ranking.validate(cfg)
    extra = {k[len("extra/"):]: v for k, v in t.items() if k.startswith("extra/")}
    return Checkpoint(header, model, bank, ranking, extra)


# ---------------------------------------------------------------------------
# extraction


@dataclass
class Extraction:
    model: HybridModel
    selection: Selection
    budget: BudgetSpec
    allocated_bytes: int


def _require_routable(ckpt: Checkpoint):
    if ckpt.bank is None or ckpt.ranking is None:
        raise ValueError("checkpoint has no router or ranking; it cannot be sliced by budget")


def extract_submodel(ckpt: Checkpoint, budget) -> Extraction:
    """Decode the budget's selection deterministically and copy the retained parameters."""
    _require_routable(ckpt)
    b = ckpt.budget(budget)
    sel = decode(ckpt.bank, ckpt.ranking, b)
    sub, sel, allocated = slice_selection(ckpt, sel)
    return Extraction(sub, sel, b, allocated)


def slice_selection(ckpt: Checkpoint, sel: Selection) -> tuple[HybridModel, Selection, int]:
    """Copy the parameters ``sel`` retains; returns (sub-model, selection, allocated bytes)."""
    idx = prefix_indices(ckpt.ranking, ckpt.model.config, sel)
    sub = reindex(ckpt.model, emb=idx["emb"], mamba_heads=idx["mamba_heads"], mamba_channels=idx["mamba_channels"],
                  attn_heads=idx["attn_heads"], ffn=idx["ffn"], layers=idx["layers"])
    allocated = model_bytes(sub)
    if allocated > model_bytes(ckpt.model):
        raise AssertionError("extraction allocated more than the full model")
    return sub, sel, allocated


def relative_logit_diff(reference: np.ndarray, other: np.ndarray) -> float:
    """max |reference - other| / max |reference|."""
    ref = np.asarray(reference, dtype=np.float64)
    diff = float(np.max(np.abs(ref - np.asarray(other, dtype=np.float64))))
    return 0.0 if diff == 0.0 else diff / float(np.max(np.abs(ref)))


@dataclass
class EquivalenceReport:
    budget: str
    max_rel_diff: float
    threshold: float
    passed: bool
    params: int
    expected_params: int

    def to_text(self) -> str:
        return (f"budget = {self.budget}\nmax_rel_diff = {self.max_rel_diff!r}\nthreshold = {self.threshold!r}\n"
                f"pass = {str(self.passed).lower()}\nparams = {self.params}\nexpected_params = {self.expected_params}\n")


def verify_equivalence(ckpt: Checkpoint, budget, prompts: np.ndarray, dtype=np.float64,
                       submodel: HybridModel | None = None) -> EquivalenceReport:
    """Compare the masked full model with the extracted sub-model on ``prompts``.

    Passes below 1e-10 relative difference in double precision, 1e-5 in single.
    ``submodel`` overrides the freshly extracted model (for sensitivity checks).
    """
    ext = extract_submodel(ckpt, budget)
    sub = (submodel if submodel is not None else ext.model).astype(dtype)
    full = ckpt.model.astype(dtype)
    masks = selection_masks(ckpt.model.config, ckpt.ranking, ext.selection, dtype)
    prompts = np.asarray(prompts)
    with ag.no_grad():
        a = stack_forward(full, masks, prompts).data
        b = stack_forward(sub, None, prompts).data
    diff = relative_logit_diff(a, b)
    threshold = 1e-10 if np.dtype(dtype) == np.float64 else 1e-5
    return EquivalenceReport(
        ext.budget.label, diff, threshold, bool(diff < threshold), sub.param_count(),
        cost_param_count(ckpt.model.config, ext.selection),
    )
