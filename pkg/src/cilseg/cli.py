"""Command-line entry point: gen-data, run, eval, report."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import data as D
from . import evaluation as E
from . import report as R
from . import training as TR
from .model import ModelSnapshot, NetConfig

CLI_METHODS = TR.METHODS


@dataclass
class RunConfig:
    spec: D.SceneSpec
    plan: D.StagePlan
    net: NetConfig
    stages: list[dict]
    output_dir: Path
    dataset_path: Path | None


def load_config(path, seed_override: int | None = None) -> RunConfig:
    raw = json.loads(Path(path).read_text())
    ds = raw.get("dataset", {})
    partition = tuple(tuple(p) for p in ds.get(
        "class_partition", [[0, 1, 2], [3, 4, 5], [6, 7, 8]]))
    seed = seed_override if seed_override is not None else ds.get("seed", 0)
    plan = D.StagePlan(partition, tuple(ds.get("sizes", [120, 120, 120, 60])), seed)
    universe = plan.universe
    spec = D.SceneSpec(
        image_size=tuple(ds.get("image_size", [64, 64])),
        class_universe=tuple(ds.get("class_universe", sorted(universe))),
        background_classes=tuple(ds.get("background_classes", list(universe)[:3])),
        shapes_per_image=tuple(ds.get("shapes_per_image", [5, 9])),
        noise_level=float(ds.get("noise_level", 10.0)),
    )
    if set(universe) - set(spec.class_universe):
        raise ValueError("plan classes missing from the scene class universe")
    net_raw = raw.get("net", {})
    net = NetConfig(class_count=len(partition[0]),
                    base_width=int(net_raw.get("base_width", 16)),
                    depth=int(net_raw.get("depth", 3)))
    h, w = spec.image_size
    if h % 2 ** net.depth or w % 2 ** net.depth:
        raise ValueError("image extents must be divisible by 2^depth")
    stages = raw.get("stages", [{}])
    if not isinstance(stages, list) or not stages:
        raise ValueError("config needs a non-empty stages list")
    while len(stages) < len(partition):
        stages.append(dict(stages[-1]))
    dataset_path = Path(ds["path"]) if ds.get("path") else None
    return RunConfig(spec, plan, net, stages, Path(raw.get("output_dir", "runs")),
                     dataset_path)


def _stage_configs(cfg: RunConfig, method: str, base_seed: int) -> list[TR.StageConfig]:
    out = []
    for k, st in enumerate(cfg.stages):
        out.append(TR.StageConfig(
            method=method,
            epochs=int(st.get("epochs", 30)),
            batch_size=int(st.get("batch_size", 6)),
            lr0=float(st.get("lr0", 5e-4)),
            power=float(st.get("power", 0.9)),
            seed=base_seed + k,
            weight_decay=float(st.get("weight_decay", 3e-4)),
            entropy_weights=bool(st.get("entropy_weights", True)),
            memory_budget=int(st.get("memory_budget", 20)),
            crop_size=tuple(st["crop_size"]) if st.get("crop_size") else None,
            flip=bool(st.get("flip", True)),
        ))
    return out


def _load_or_generate(cfg: RunConfig) -> dict[str, D.Subset]:
    if cfg.dataset_path is not None:
        subsets, plan = D.load_dataset(cfg.dataset_path)
        if plan is not None and plan.class_partition != cfg.plan.class_partition:
            raise ValueError("dataset plan disagrees with the config class partition")
        return subsets
    return D.generate(cfg.spec, cfg.plan)


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out) if args.out else cfg.output_dir / "dataset"
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists; pass --force to overwrite", file=sys.stderr)
        return 1
    subsets = D.generate(cfg.spec, cfg.plan)
    D.save_dataset(out, subsets, cfg.plan)
    print(f"wrote {sum(len(s) for s in subsets.values())} images to {out}")
    return 0


def _run_method(method: str, cfg: RunConfig, subsets: dict[str, D.Subset],
                base_seed: int, out_dir: Path) -> list[dict[str, str]]:
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = _stage_configs(cfg, method, base_seed)
    snapshots, reports = TR.run_protocol(method, subsets, cfg.plan, configs,
                                         net=cfg.net)
    for snap in snapshots:
        snap.save(out_dir / f"snap_{snap.stage_tag}.bin")
    for rep in reports:
        (out_dir / f"train_{rep.stage_tag}.json").write_text(rep.to_json() + "\n")

    test = subsets["test"]
    rows: list[dict[str, str]] = []
    evals = [(snapshots[-1], 3, "ss")] if method == "ss" else \
        [(s, i + 1, ",".join(f"t{j + 1}" for j in range(i + 1)))
         for i, s in enumerate(snapshots) if i >= 1]
    for snap, stages_done, tag in evals:
        iou = E.evaluate_snapshot(snap, test.images, test.labels,
                                  cfg.plan.class_partition, stages_done)
        rows.append(R.metric_row(method, tag, iou))
        R.write_report_json(out_dir / f"iou_{snap.stage_tag}.json", method, tag, iou)
    R.write_metrics_csv(out_dir / "metrics.csv", rows)
    return rows


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    methods = list(CLI_METHODS) if args.all_methods else [args.method]
    if not all(m in CLI_METHODS for m in methods):
        print(f"error: unknown method {args.method!r}; choose from "
              f"{{{', '.join(CLI_METHODS)}}}", file=sys.stderr)
        return 2
    out_root = Path(args.out) if args.out else cfg.output_dir
    base_seed = args.seed if args.seed is not None else cfg.plan.seed
    for m in methods:
        target = out_root / m
        if target.exists() and any(target.iterdir()) and not args.force:
            print(f"error: {target} exists; pass --force to overwrite",
                  file=sys.stderr)
            return 1
    subsets = _load_or_generate(cfg)
    final_rows: list[dict[str, str]] = []
    for m in methods:
        rows = _run_method(m, cfg, subsets, base_seed, out_root / m)
        final_rows.append(rows[-1])
        print(f"{m}: " + "  ".join(
            f"{c}={rows[-1][c]}" for c in E.METRIC_COLUMNS if rows[-1].get(c)))
    if args.all_methods:
        R.write_metrics_csv(out_root / "combined_metrics.csv", final_rows)
    return 0


def _stages_done(snap: ModelSnapshot, partition) -> int:
    if snap.stage_tag.startswith("t") and snap.stage_tag[1:].isdigit():
        return int(snap.stage_tag[1:])
    classes = set(snap.class_list)
    done = 0
    covered: set[int] = set()
    for part in partition:
        covered |= set(part)
        if classes >= covered:
            done += 1
    return max(done, 3 if snap.stage_tag == "ss" else 0)


def cmd_eval(args) -> int:
    subsets, plan = D.load_dataset(args.data)
    if plan is None:
        print(f"error: {args.data}/plan.json missing", file=sys.stderr)
        return 1
    if "test" not in subsets:
        print(f"error: no test subset under {args.data}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path(args.data).parent
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.snapshots:
        snap = ModelSnapshot.load(path)
        if set(snap.class_list) - set(plan.universe):
            print(f"error: {path}: snapshot classes not in the dataset plan",
                  file=sys.stderr)
            return 1
        stages_done = _stages_done(snap, plan.class_partition)
        if stages_done < 2:
            print(f"error: {path}: metrics are defined from stage 2 on",
                  file=sys.stderr)
            return 1
        iou = E.evaluate_snapshot(snap, subsets["test"].images,
                                  subsets["test"].labels,
                                  plan.class_partition, stages_done)
        tag = snap.stage_tag or f"stage{stages_done}"
        rows.append(R.metric_row(Path(path).stem, tag, iou))
        R.write_report_json(out / f"iou_{Path(path).stem}.json",
                            Path(path).stem, tag, iou)
    R.write_metrics_csv(out / "eval_metrics.csv", rows)
    print(f"wrote {out / 'eval_metrics.csv'}")
    return 0


def cmd_report(args) -> int:
    written = R.render_run_report(args.run, args.out)
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cilseg",
                                description="staged class-incremental "
                                            "segmentation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic dataset to disk")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train one or all methods and evaluate")
    r.add_argument("--config", required=True)
    grp = r.add_mutually_exclusive_group(required=True)
    grp.add_argument("--method", choices=CLI_METHODS)
    grp.add_argument("--all-methods", action="store_true")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate saved snapshots on a dataset")
    e.add_argument("snapshots", nargs="+")
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="combine a run directory into CSV + figures")
    rp.add_argument("--run", required=True)
    rp.add_argument("--out", default=None)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
