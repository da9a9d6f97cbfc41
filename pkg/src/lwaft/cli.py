"""Command-line entry point.

Every command writes into its own run directory (``--out``, or a directory
under ``$LWAFT_HOME`` named after the command and config digest) holding a
``config.toml`` snapshot, its artifacts and one ``manifest.json``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, config as cfgmod
from .delta import delta_histogram, layer_profile, write_profile_csv
from .errors import LwaftError, StageError, ValidationError
from .manifest import MANIFEST_NAME, RunManifest, file_sha256, now, verify
from .masks import save_mask
from .models import build_model
from .params import ParamStore, check_layout
from .scoring import R_LEVELS, V_LEVELS, write_predictions
from .tasks import TaskSuite, gen_suite, uniform_counts
from .training import SeqDataset, train
from .tuner import check_disjoint, evaluate_cases, finetune, predict, retention_eval, RetentionReport

log = logging.getLogger("lwaft")

HOME_ENV = "LWAFT_HOME"
SUITE_FILES = {"base": "suites/base.ndjson", "target": "suites/target.ndjson"}


# ---------------------------------------------------------------- helpers


def workspace() -> Path:
    return Path(os.environ.get(HOME_ENV, "lwaft-runs"))


def _run_dir(out: str | None, command: str, cfg: dict) -> Path:
    path = Path(out) if out else workspace() / f"{command}-{cfgmod.digest(cfg)}"
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"output directory {path} is not writable: {exc.strerror or exc}") from None
    return path


def _start(command: str, cfg: dict, seeds: dict, run_dir: Path) -> RunManifest:
    (run_dir / "config.toml").write_text(cfgmod.dumps(cfg), encoding="utf-8")
    man = RunManifest(
        run_id=f"{command}-{cfgmod.digest(cfg)}",
        command=command,
        config=cfg,
        seeds=seeds,
        tool_version=__version__,
        started=now(),
    )
    man.write(run_dir)
    return man


def _finish(man: RunManifest, run_dir: Path, status: str = "ok") -> None:
    man.status = status
    man.finished = now()
    man.record_outputs(run_dir)
    man.write(run_dir)


def _check_against_producer(path: Path) -> None:
    """If ``path`` was written by an earlier run, its recorded hash must still match."""
    path = path.resolve()
    for parent in list(path.parents)[:3]:
        mpath = parent / MANIFEST_NAME
        if mpath.is_file():
            man = RunManifest.read(parent)
            rel = str(path.relative_to(parent))
            if rel in man.outputs and man.outputs[rel] != file_sha256(path):
                raise ValidationError(f"{path} does not match the hash recorded by its producing run")
            return


def _load_suites(tasks_dir: Path) -> tuple[TaskSuite, TaskSuite, dict]:
    suites, hashes = {}, {}
    for role, rel in SUITE_FILES.items():
        p = tasks_dir / rel
        if not p.is_file():
            raise ValidationError(f"missing suite file {p}; run gen-tasks first")
        _check_against_producer(p)
        suites[role] = TaskSuite.load(p)
        hashes[f"{role}_suite_sha256"] = file_sha256(p)
    return suites["base"], suites["target"], hashes


def _eval_sets(cfg: dict, base_suite: TaskSuite, target_suite: TaskSuite):
    return base_suite.eval_cases()[:: cfg["tasks"]["base_eval_stride"]], target_suite.eval_cases()


def _load_base(path: Path, spec) -> ParamStore:
    if not path.is_file():
        raise ValidationError(f"base checkpoint not found: {path}")
    _check_against_producer(path)
    base = ParamStore.load(path)
    check_layout(build_model(spec), base, "model config and base checkpoint")
    return base


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            log.info("stage %s", name)
            self.t = time.perf_counter()

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, StageError):
                raise StageError(name, ev) from ev
            log.info("stage %s done in %.1fs", name, time.perf_counter() - self.t)

    return _Ctx()


# ---------------------------------------------------------------- commands


def cmd_gen_tasks(cfg: dict, out: str | None = None) -> Path:
    t = cfg["tasks"]
    run_dir = _run_dir(out, "gen-tasks", cfg)
    man = _start("gen-tasks", cfg, {"base_seed": t["base_seed"], "target_seed": t["target_seed"]}, run_dir)
    base_domains = cfg.get("domains") or [t["base_domain"]]
    base = gen_suite(uniform_counts(t["base_per_cell"]), base_domains, t["base_seed"], t["eval_fraction"])
    target = gen_suite(uniform_counts(t["target_per_cell"]), [t["target_domain"]], t["target_seed"],
                       t["eval_fraction"])
    check_disjoint(base.cases, target.cases)
    limit = cfg["model"]["context_len"]
    for c in base.cases + target.cases:
        if len(c.prompt) + len(c.ground_truth) > limit:
            raise ValidationError(f"case {c.case_id} does not fit context_len {limit}")
    (run_dir / "suites").mkdir(exist_ok=True)
    base.save(run_dir / SUITE_FILES["base"])
    target.save(run_dir / SUITE_FILES["target"])
    _finish(man, run_dir)
    return run_dir


def cmd_train_base(cfg: dict, tasks_dir: Path, out: str | None = None) -> Path:
    spec = cfgmod.model_spec(cfg)
    optim = cfgmod.optim_config(cfg, "pretrain")
    run_dir = _run_dir(out, "train-base", cfg)
    man = _start("train-base", cfg, {"model_seed": spec.seed, "pretrain_seed": cfg["pretrain"]["seed"]}, run_dir)
    base_suite, target_suite, hashes = _load_suites(tasks_dir)
    for rel in SUITE_FILES.values():
        man.add_input(tasks_dir / rel)
    ds = SeqDataset.from_cases(base_suite.train_cases(), spec.context_len)
    with _stage("pretrain"):
        params, tlog = train(build_model(spec), spec, ds, optim, seed=cfg["pretrain"]["seed"])
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    params.save(run_dir / "checkpoints/base.ckpt")
    (run_dir / "logs").mkdir(exist_ok=True)
    tlog.save(run_dir / "logs/pretrain.ndjson")
    with _stage("evaluate"):
        base_eval, target_eval = _eval_sets(cfg, base_suite, target_suite)
        rep = retention_eval(params, spec, base_eval, target_eval, "base", cfgmod.digest(cfg),
                             provenance={**hashes, "base_ckpt_sha256": params.digest()},
                             max_len=cfg["tasks"]["max_answer_len"])
    _write_json(run_dir / "reports/retention.json", rep.to_dict())
    _finish(man, run_dir)
    return run_dir


def cmd_pipeline(cfg: dict, base_ckpt: Path, tasks_dir: Path, out: str | None = None) -> Path:
    """Fine-tune the base by ``tuner.method`` and report retention.

    Masked methods persist the expert checkpoint, delta profiles and mask.
    A failing stage aborts with its name; artifacts written so far remain.
    """
    spec = cfgmod.model_spec(cfg)
    tcfg = cfgmod.tune_config(cfg)
    run_dir = _run_dir(out, f"pipeline-{tcfg.method}", cfg)
    man = _start("pipeline", cfg, {"tuner_seed": tcfg.seed}, run_dir)
    try:
        with _stage("load"):
            base = _load_base(Path(base_ckpt), spec)
            man.add_input(base_ckpt)
            base_suite, target_suite, hashes = _load_suites(tasks_dir)
            for rel in SUITE_FILES.values():
                man.add_input(tasks_dir / rel)
            ds = SeqDataset.from_cases(target_suite.train_cases(), spec.context_len)
            base_eval, target_eval = _eval_sets(cfg, base_suite, target_suite)
            check_disjoint(target_suite.train_cases(), base_eval + target_eval)
        with _stage("finetune"):
            res = finetune(base, spec, ds, tcfg)
        for d in ("checkpoints", "logs", "reports"):
            (run_dir / d).mkdir(exist_ok=True)
        res.params.save(run_dir / "checkpoints/tuned.ckpt")
        res.log.save(run_dir / "logs/finetune.ndjson")
        provenance = {**hashes, "base_ckpt_sha256": base.digest(), "tuned_ckpt_sha256": res.params.digest(),
                      **res.extra}
        if res.mask is not None:
            with _stage("mask"):
                (run_dir / "masks").mkdir(exist_ok=True)
                provenance["mask_sha256"] = save_mask(res.mask, run_dir / "masks/mask.lwmsk")
                provenance["mask"] = res.mask.provenance
                provenance["unfrozen"] = res.mask.total_unfrozen
        if res.expert is not None:
            with _stage("delta"):
                (run_dir / "delta").mkdir(exist_ok=True)
                res.expert.save(run_dir / "checkpoints/expert.ckpt")
                res.expert_log.save(run_dir / "logs/expert.ndjson")
                write_profile_csv(layer_profile(res.stats), run_dir / "delta/layer_profile.csv")
                hist = delta_histogram(res.stats)
                hist.to_csv(run_dir / "delta/histogram.csv")
                provenance["fraction_above_marker"] = hist.fraction_above
        with _stage("evaluate"):
            max_len = cfg["tasks"]["max_answer_len"]
            ref = retention_eval(base, spec, base_eval, target_eval, "base", max_len=max_len)
            rep = retention_eval(res.params, spec, base_eval, target_eval, tcfg.method, tcfg.digest(), ref,
                                 provenance, max_len=max_len)
        _write_json(run_dir / "reports/retention.json", rep.to_dict())
    except StageError as exc:
        man.failed_stage = exc.stage
        _finish(man, run_dir, "failed")
        raise
    _finish(man, run_dir)
    return run_dir


def _sweep_one(args) -> tuple[dict | None, str]:
    cfg, base_ckpt, tasks_dir, out = args
    try:
        run_dir = cmd_pipeline(cfg, Path(base_ckpt), Path(tasks_dir), out)
        rep = json.loads((run_dir / "reports/retention.json").read_text("utf-8"))
        return rep, "ok"
    except LwaftError as exc:
        return None, f"failed: {exc}"


def sweep_configs(cfg: dict, param: str) -> list[tuple[float, dict]]:
    if param == "alpha":
        values, section_key = cfg["sweep"]["alpha_values"], ("tuner", "alpha")
    elif param == "freeze_rate":
        values, section_key = cfg["sweep"]["freeze_rate_values"], ("tuner", "freeze_rate")
    else:
        raise ValidationError(f"unknown sweep parameter {param!r}; expected alpha or freeze_rate")
    out = []
    for v in sorted(values):
        over = {section_key[0]: {section_key[1]: v}}
        if param == "freeze_rate":
            over["tuner"]["global_count"] = 0
        out.append((v, cfgmod.merge(over, cfg)))
    return out


def cmd_sweep(cfg: dict, param: str, base_ckpt: Path, tasks_dir: Path, out: str | None = None,
              parallel: int = 1) -> Path:
    runs = sweep_configs(cfg, param)
    run_dir = _run_dir(out, f"sweep-{param}", cfg)
    man = _start("sweep", cfg, {"tuner_seed": cfg["tuner"]["seed"], "param": param}, run_dir)
    man.add_input(base_ckpt)
    jobs = [(c, str(base_ckpt), str(tasks_dir), str(run_dir / "runs" / f"{param}-{v:g}")) for v, c in runs]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["param", "value", "base_retention", "target_score", "status"])
    for (v, _), (rep, status) in zip(runs, results):
        if rep is None:
            writer.writerow([param, f"{v:g}", "", "", status])
        else:
            writer.writerow([param, f"{v:g}", f"{rep['base_domain_score']:.6f}", f"{rep['target_domain_score']:.6f}",
                             status])
    (run_dir / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    _finish(man, run_dir)
    return run_dir


def cmd_evaluate(cfg: dict, model: Path, suite_path: Path, split: str = "eval", out: str | None = None) -> Path:
    spec = cfgmod.model_spec(cfg)
    run_dir = _run_dir(out, "evaluate", cfg)
    man = _start("evaluate", cfg, {}, run_dir)
    params = _load_base(Path(model), spec)
    man.add_input(model)
    _check_against_producer(Path(suite_path))
    suite = TaskSuite.load(suite_path)
    man.add_input(suite_path)
    cases = {"eval": suite.eval_cases, "train": suite.train_cases, "all": lambda: suite.cases}[split]()
    preds = predict(params, spec, cases, cfg["tasks"]["max_answer_len"])
    write_predictions(run_dir / "predictions.jsonl", preds)
    rep = evaluate_cases(params, spec, cases, cfg["tasks"]["max_answer_len"])
    _write_json(run_dir / "reports/bench.json", rep.to_dict())
    (run_dir / "reports/bench.txt").write_text(rep.table() + "\n", encoding="utf-8")
    _finish(man, run_dir)
    return run_dir


CELLS = [r + v for r in R_LEVELS for v in V_LEVELS]


def report_table(run_dirs: list[Path]) -> str:
    """Methods as rows; base/target overall and target grid cells as columns."""
    rows, suite_hashes = [], set()
    for d in run_dirs:
        RunManifest.read(d)
        path = Path(d) / "reports/retention.json"
        if not path.is_file():
            raise ValidationError(f"{d} has no reports/retention.json")
        rep = RetentionReport.from_dict(json.loads(path.read_text("utf-8")))
        suite_hashes.add((rep.provenance.get("base_suite_sha256"), rep.provenance.get("target_suite_sha256")))
        rows.append((Path(d).name, rep))
    if len(suite_hashes) > 1:
        raise ValidationError("runs were evaluated on different suites; suite hashes must match to compare")
    cells = [c for c in CELLS if any(rep.target_domain.cell(c[:2], c[2:]) is not None for _, rep in rows)]
    header = ["run", "method", "base", "target"] + [f"T:{c}" for c in cells]
    lines = [header]
    for name, rep in rows:
        line = [name, rep.method, f"{rep.base_domain_score:.3f}", f"{rep.target_domain_score:.3f}"]
        for c in cells:
            cell = rep.target_domain.cell(c[:2], c[2:])
            line.append("-" if cell is None else f"{cell:.3f}")
        lines.append(line)
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in lines)


def cmd_report(run_dirs: list[Path], out: str | None = None) -> str:
    table = report_table(run_dirs)
    if out:
        run_dir = _run_dir(out, "report", {})
        man = _start("report", {}, {}, run_dir)
        for d in run_dirs:
            man.add_input(Path(d) / "reports/retention.json")
        (run_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
        _finish(man, run_dir)
    return table


# ---------------------------------------------------------------- argparse


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lwaft", description="Layer-wise adaptive freeze-tuning on toy models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", help="config file or preset name (toy, paper-scale, mixture)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the command's seed(s)")
        if out:
            sp.add_argument("--out", help=f"run directory (default: under ${HOME_ENV})")
        sp.add_argument("--verify", action="store_true",
                        help="check the hashes recorded in an existing run directory instead of running")

    common(sub.add_parser("gen-tasks", help="generate base and target task suites"))
    sp = sub.add_parser("train-base", help="pretrain the base model on the base suite")
    common(sp)
    sp.add_argument("--tasks", required=True, help="gen-tasks run directory")
    sp = sub.add_parser("pipeline", help="fine-tune a base checkpoint and report retention")
    common(sp)
    sp.add_argument("--base", required=True, help="base checkpoint")
    sp.add_argument("--tasks", required=True, help="gen-tasks run directory")
    sp.add_argument("--method", help="lwaft, full, lora, random_mask, global_topk or layer_uniform")
    sp = sub.add_parser("sweep", help="repeat the pipeline over alpha or freeze-rate values")
    common(sp)
    sp.add_argument("--param", required=True, choices=["alpha", "freeze_rate"])
    sp.add_argument("--base", required=True)
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--method", help="masked method to sweep (default from config)")
    sp.add_argument("--parallel", type=int, default=1, metavar="N")
    sp = sub.add_parser("evaluate", help="score a checkpoint on a suite")
    common(sp, seed=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--suite", required=True, help="suite .ndjson file")
    sp.add_argument("--split", choices=["eval", "train", "all"], default="eval")
    sp = sub.add_parser("report", help="compare retention reports across run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out")
    sp.add_argument("--verify", action="store_true")
    sp = sub.add_parser("config", help="configuration helpers")
    csub = sp.add_subparsers(dest="config_command", required=True)
    dp = csub.add_parser("dump-defaults", help="print the effective configuration")
    dp.add_argument("--config")
    return p


def _apply_seed(cfg: dict, command: str, seed: int | None) -> dict:
    if seed is None:
        return cfg
    if command == "gen-tasks":
        over = {"tasks": {"base_seed": seed, "target_seed": seed + 1}}
    elif command == "train-base":
        over = {"model": {"seed": seed}, "pretrain": {"seed": seed}}
    else:
        over = {"tuner": {"seed": seed}}
    return cfgmod.merge(over, cfg)


def _verify_dirs(dirs) -> int:
    bad = 0
    for d in dirs:
        problems = verify(d)
        for msg in problems:
            print(f"{d}: {msg}")
        bad += len(problems)
        if not problems:
            print(f"{d}: ok")
    return 0 if bad == 0 else 2


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "config":
        print(cfgmod.dumps(cfgmod.load(args.config)), end="")
        return 0
    if args.command == "report":
        if args.verify:
            return _verify_dirs(args.runs)
        print(cmd_report([Path(r) for r in args.runs], args.out))
        return 0
    if args.verify:
        if not args.out:
            raise ValidationError("--verify needs --out pointing at an existing run directory")
        return _verify_dirs([args.out])
    cfg = _apply_seed(cfgmod.load(args.config), args.command, getattr(args, "seed", None))
    if getattr(args, "method", None):
        cfg = cfgmod.merge({"tuner": {"method": args.method}}, cfg)
    if args.command == "gen-tasks":
        d = cmd_gen_tasks(cfg, args.out)
    elif args.command == "train-base":
        d = cmd_train_base(cfg, Path(args.tasks), args.out)
    elif args.command == "pipeline":
        d = cmd_pipeline(cfg, Path(args.base), Path(args.tasks), args.out)
        rep = json.loads((d / "reports/retention.json").read_text("utf-8"))
        print(f"{rep['method']}: base-domain {rep['base_domain_score']:.3f}  target {rep['target_domain_score']:.3f}")
    elif args.command == "sweep":
        d = cmd_sweep(cfg, args.param, Path(args.base), Path(args.tasks), args.out, args.parallel)
        print((d / "sweep.csv").read_text("utf-8"), end="")
    elif args.command == "evaluate":
        d = cmd_evaluate(cfg, Path(args.model), Path(args.suite), args.split, args.out)
        print((d / "reports/bench.txt").read_text("utf-8"), end="")
    print(f"run directory: {d}")
    return 0


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code(exc.cause)
    if isinstance(exc, ValidationError):
        return 1
    return 2


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (LwaftError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
