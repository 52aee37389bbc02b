"""Command-line entry point: pretrain, calibrate, train, slice, verify, eval, report-costs.

Every command reads ``--config`` and works inside one run directory::

    pretrained.ckpt  rankings.bin  base.ckpt  elastic.ckpt  metrics.csv
    slices/<label>.ckpt  reports/
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import costmodel, slicing
from .config import ConfigError, RunConfig
from .corpus import CorpusSpec, generate, to_batch
from .importance import apply_ranking, calibrate
from .model import HybridModel
from .router import RouterBank, cost_param_count
from .training import eval_ce, pretrain, train

log = logging.getLogger("elastic_hybrid")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


class MissingArtifact(RuntimeError):
    pass


def _need(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"missing prerequisite artifact: {path}")
    return path


def _budget_labels(ckpt: slicing.Checkpoint, label: str | None) -> list[str]:
    labels = [b.label for b in ckpt.budgets]
    if label is None:
        return labels
    if label not in labels:
        raise ConfigError("--budget", f"{label!r} is not a trained budget ({', '.join(labels)})")
    return [label]


def _base_model(cfg: RunConfig) -> HybridModel:
    if cfg["paths.base"] is not None:
        return slicing.load(cfg["paths.base"]).model
    pre = cfg.run_dir / "pretrained.ckpt"
    if pre.is_file():
        return slicing.load(pre).model
    return HybridModel.init(cfg.model_config(), cfg.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: RunConfig, args) -> None:
    """CE-train the full model on short sequences and long copies (the teacher)."""
    model = HybridModel.init(cfg.model_config(), cfg.seed)
    s1, _ = cfg.corpus_specs()
    long = CorpusSpec(weights={"markov": 0.2, "copy": 0.6, "modchain": 0.2}, seq_len=cfg["pretrain.long_seq_len"],
                      copy_k=(2, (cfg["pretrain.long_seq_len"] - 1) // 2 - 1), seed=cfg.seed)
    pretrain(model, [s1, long], cfg["pretrain.steps"], [cfg["train.stage1.batch_size"], cfg["train.stage2.batch_size"]],
             lr=cfg["pretrain.lr"], seed=cfg.seed,
             log=lambda s, l: log.info("pretrain step %d loss %.4f", s, l) if s % 100 == 0 else None)
    slicing.save(model, None, None, cfg.run_dir / "pretrained.ckpt", metadata={"stage": "pretrained"})


def cmd_calibrate(cfg: RunConfig, args) -> None:
    model = _base_model(cfg)
    s1, _ = cfg.corpus_specs()
    rng = np.random.default_rng([cfg.seed, 0xCA1])
    tokens, _ = to_batch(generate(s1, cfg["calib.samples"], rng))
    ranking = calibrate(model, tokens, depth_mode=cfg["calib.depth_mode"], keep_channels=cfg["calib.keep_channels"],
                        depth_tokens=tokens[: cfg["calib.depth_samples"]])
    slicing.write_tensors({"content": "rankings"}, slicing.ranking_tensors(ranking), cfg.run_dir / "rankings.bin")
    sorted_model = apply_ranking(model, ranking)
    slicing.save(sorted_model, None, ranking.width_identity(), cfg.run_dir / "base.ckpt", metadata={"stage": "calibrated"})
    log.info("depth order (most important first): %s", ranking.depth.tolist())


def cmd_train(cfg: RunConfig, args) -> None:
    base = slicing.load(_need(cfg.run_dir / "base.ckpt"))
    if base.ranking is None:
        raise MissingArtifact(f"{cfg.run_dir / 'base.ckpt'} carries no ranking; run calibrate first")
    student = base.model
    mcfg = student.config
    bank = RouterBank.create(
        mcfg, cfg.budgets(student.param_count()), d_router=cfg["router.d_router"], sets=cfg.router_sets(),
        modes=cfg.router_modes(), min_depth=cfg["router.min_depth"], schedule=cfg.anneal_schedule(), seed=cfg.seed,
    )
    teacher = student.copy()
    tcfg = cfg.train_config()
    result = train(student, bank, base.ranking, tcfg, teacher=teacher, corpus=cfg.corpus_specs(),
                   metrics_path=cfg.run_dir / "metrics.csv")
    slicing.save(result.model, result.bank, result.ranking, cfg.run_dir / "elastic.ckpt",
                 metadata={"stage": "elastic", "steps": result.steps})
    log.info("trained %d steps; router overhead %s", result.steps,
             slicing.router_bytes(result.bank) / slicing.model_bytes(result.model))


def cmd_slice(cfg: RunConfig, args) -> None:
    ckpt = slicing.load(_need(cfg.run_dir / "elastic.ckpt"))
    out = cfg.run_dir / "slices"
    out.mkdir(parents=True, exist_ok=True)
    for label in _budget_labels(ckpt, args.budget):
        ext = slicing.extract_submodel(ckpt, label)
        meta = {"budget": label, "selection": ext.selection.to_dict()}
        slicing.save(ext.model, None, None, out / f"{label}.ckpt", metadata=meta)
        log.info("budget %s: %d parameters", label, ext.model.param_count())


def _prompts(cfg: RunConfig, n: int) -> np.ndarray:
    s1, _ = cfg.corpus_specs()
    return to_batch(generate(s1, n, np.random.default_rng([cfg.seed, 0x5E7])))[0]


def cmd_verify(cfg: RunConfig, args) -> bool:
    ckpt = slicing.load(_need(cfg.run_dir / "elastic.ckpt"))
    reports = cfg.run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    prompts = _prompts(cfg, cfg["verify.prompts"])
    ok = True
    for label in _budget_labels(ckpt, args.budget):
        rep = slicing.verify_equivalence(ckpt, label, prompts, np.float64)
        (reports / f"verify_{label}.txt").write_text(rep.to_text())
        print(f"{label}: max relative logit difference {rep.max_rel_diff:.3e} -> {'PASS' if rep.passed else 'FAIL'}")
        ok &= rep.passed and rep.params == rep.expected_params
    return ok


def cmd_eval(cfg: RunConfig, args) -> None:
    ckpt = slicing.load(_need(cfg.run_dir / "elastic.ckpt"))
    reports = cfg.run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    s1, _ = cfg.corpus_specs()
    x, y = to_batch(generate(s1, cfg["eval.samples"], np.random.default_rng([cfg.seed, 0xE7A1])))
    lines = ["budget,params,ce"]
    for label in _budget_labels(ckpt, args.budget):
        ext = slicing.extract_submodel(ckpt, label)
        ce = eval_ce(ext.model, None, x, y)
        lines.append(f"{label},{cost_param_count(ckpt.model.config, ext.selection)},{ce!r}")
        print(f"{label}: CE {ce:.4f} nats ({ext.model.param_count()} parameters)")
    (reports / "eval.csv").write_text("\n".join(lines) + "\n")


def cmd_report_costs(cfg: RunConfig, args) -> None:
    reports = cfg.run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "costs.csv").write_text(costmodel.sweep_csv(costmodel.sweep()))
    tok = costmodel.reference_token_table()
    mem = costmodel.reference_memory_table()
    table = (
        "table,row,value\n"
        f"tokens,minitron_6b_9b,{tok[costmodel.MINITRON]:.0f}\n"
        f"tokens,elastic_6b_9b,{tok[costmodel.ELASTIC]:.0f}\n"
        f"memory,nested_6b_9b_12b,{mem[costmodel.NESTED]:.0f}\n"
        f"memory,separate_9b_12b,{mem[costmodel.SEPARATE]:.0f}\n"
    )
    (reports / "cost_tables.csv").write_text(table)
    print(f"tokens: minitron {tok['minitron'] / 1e9:.0f}B vs elastic {tok['elastic'] / 1e9:.0f}B "
          f"({tok['minitron'] / tok['elastic']:.1f}x)")
    print(f"memory: nested {mem['nested'] / 1e9:.0f} GB vs separate {mem['separate'] / 1e9:.0f} GB")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "slice": cmd_slice,
    "verify": cmd_verify,
    "eval": cmd_eval,
    "report-costs": cmd_report_costs,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastic-hybrid", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key = value run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--budget", help="restrict slice/verify/eval to one budget label")
    p.add_argument("--out", help="override the run directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.load(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["paths.run_dir"] = str(Path(args.out).resolve())
        if overrides:
            cfg = cfg.with_overrides(**overrides)
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        ok = COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(str(e), file=sys.stderr)
        return EXIT_MISSING
    return EXIT_FAILED if ok is False else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
