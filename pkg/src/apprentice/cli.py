"""Command-line entry points for dataset generation, training, evaluation,
tree distillation, exports, comparisons, and full reproduction runs.

Exit codes: 0 success, 1 run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from apprentice import dataset as ds_mod
from apprentice import harness, pairwise as pw, pddt as pddt_mod, pnn as pnn_mod
from apprentice.diffcore import TrainingError
from apprentice.envs import LowDimConfig, generate_lowdim, generate_scheduling
from apprentice.envs.scheduling import generate_scheduling_multilabel
from apprentice.harness import ConfigError, ExperimentConfig, MetricsReport, RunError

OUTPUT_ROOT_ENV = "APPRENTICE_OUTPUT_ROOT"

TRAINABLE_VIA_CLI = ("pnn", "pddt", "nn", "ddt", "dt")


def output_root(explicit=None) -> Path:
    root = Path(explicit or os.environ.get(OUTPUT_ROOT_ENV, "apprentice-out"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None


def _apply_overrides(cfg: dict, pairs) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return cfg


# -- subcommand implementations ----------------------------------------------

def cmd_generate(args) -> int:
    cfg = _apply_overrides(_load_config_file(args.config), args.set)
    count = int(cfg.get("schedule_count", args.count))
    seed = int(cfg.get("seed", args.seed))
    if args.domain == "lowdim":
        keys = {k: cfg[k] for k in
                ("observations_per_schedule", "lambda_distribution", "x_one_probability")
                if k in cfg}
        dset = generate_lowdim(LowDimConfig(schedule_count=count, seed=seed, **keys))
    elif args.domain == "scheduling":
        dset = generate_scheduling(count, seed=seed)
    else:
        dset = generate_scheduling_multilabel(count, seed=seed)
    ds_mod.save(dset, args.out)
    print(f"wrote {dset.observation_count()} observations "
          f"({len(dset.schedules)} schedules) to {args.out}")
    return 0


def _split_for_eval(dset, args):
    if args.train_fraction is None:
        return None, dset
    return ds_mod.split(dset, args.train_fraction, args.split_seed)


def cmd_train(args) -> int:
    if args.model not in TRAINABLE_VIA_CLI:
        raise ConfigError(
            f"model {args.model!r} is not trainable from this subcommand; "
            f"use `apprentice reproduce` (supported here: {TRAINABLE_VIA_CLI})"
        )
    dset = ds_mod.load(args.data)
    config = ExperimentConfig(
        domain=dset.domain_tag if dset.domain_tag in harness.DOMAINS else "lowdim",
        model=args.model,
        framing=args.framing,
        seeds=[args.seed],
        hyperparameters=_apply_overrides(_load_config_file(args.config), args.set),
    )
    hyper = harness.resolve_hyper(config)
    train_ds, _ = (dset, None) if args.train_fraction is None else \
        ds_mod.split(dset, args.train_fraction, args.split_seed)
    mask_fn = harness.mask_fn_for(dset)
    framing = config.framing
    if args.model == "dt":
        arrays = pw.framed_arrays(train_ds, "standard")
        from apprentice import baselines
        tree = baselines.fit_cart(arrays.features, arrays.labels.astype(np.int64),
                                  n_classes=train_ds.action_count,
                                  max_depth=hyper.get("max_depth"))
        Path(args.out).write_text(json.dumps(tree.state_dict()), encoding="utf-8")
    elif args.model in ("pnn", "nn"):
        if args.model == "nn":
            hyper = {**hyper, "d": 0}
        model, curve = harness._train_pnn(train_ds, hyper, args.seed, framing, mask_fn)
        pnn_mod.save_checkpoint(model, args.out)
        print(f"final training loss {curve[-1]:.6f}")
    else:
        names = harness.feature_names_for(dset, framing, int(hyper.get("d", 2)))
        if args.model == "ddt":
            hyper = {**hyper, "d": 0, "embedding_init_std": 0.0}
        model, curve = harness._train_pddt(train_ds, hyper, args.seed, framing,
                                           mask_fn, names)
        pnn_mod.save_checkpoint(model, args.out)
        print(f"final training loss {curve[-1]:.6f} "
              f"({model.restart_attempts} restart(s))")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = pnn_mod.load_checkpoint(args.checkpoint)
    dset = ds_mod.load(args.data)
    _, test_ds = _split_for_eval(dset, args)
    mask_fn = harness.mask_fn_for(dset)
    hyper = _apply_overrides(_load_config_file(args.config), args.set)
    adapt_cfg, mode, passes, starts = harness._adapt_config(hyper, args.split_seed)

    if hasattr(model, "table") and model.d > 0:
        acc, confusion, _ = harness.adapt_and_eval(
            model, test_ds, adapt_cfg, mode, passes, mask_fn, starts)
    elif hasattr(model, "table"):
        def predict_fn(obs, sched, mask):
            return pnn_mod.predict(model, obs, np.zeros(0), mask=mask)
        acc, confusion = harness.evaluate_policy(predict_fn, test_ds, mask_fn)
    else:
        def predict_fn(obs, sched, mask):
            ex = pw.build_standard(obs, ())
            pred = model.predict(ex.features[None, :])[0]
            probs = np.zeros(test_ds.action_count)
            probs[pred] = 1.0
            return probs
        acc, confusion = harness.evaluate_policy(predict_fn, test_ds, mask_fn)
    result = {
        "accuracy": acc,
        "observations": int(np.sum(confusion)),
        "dataset_fingerprint": harness.dataset_fingerprint(dset),
        "version": harness.version_string(),
    }
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def cmd_crispify(args) -> int:
    model = pnn_mod.load_checkpoint(args.checkpoint)
    if not isinstance(model, pddt_mod.PddtModel):
        raise ConfigError("crispify needs a soft-tree checkpoint")
    tree = pddt_mod.crispify(model)
    state = {
        "format": pnn_mod.CHECKPOINT_HEADER,
        "kind": "crisp-tree",
        "depth": tree.depth,
        "features": tree.features.tolist(),
        "weights": tree.weights.tolist(),
        "thresholds": tree.thresholds.tolist(),
        "leaf_classes": tree.leaf_classes.tolist(),
        "feature_names": tree.feature_names,
        "embedding_width": tree.embedding_width,
        "n_classes": tree.n_classes,
        "framing": tree.framing,
    }
    Path(args.out).write_text(json.dumps(state), encoding="utf-8")
    print(f"crisp tree written to {args.out}")
    return 0


def load_crisp(path) -> pddt_mod.CrispTree:
    state = json.loads(Path(path).read_text(encoding="utf-8"))
    if state.get("kind") != "crisp-tree":
        raise ConfigError(f"{path}: not a crisp-tree checkpoint")
    return pddt_mod.CrispTree(
        depth=state["depth"],
        features=np.array(state["features"], dtype=np.int64),
        weights=np.array(state["weights"]),
        thresholds=np.array(state["thresholds"]),
        leaf_classes=np.array(state["leaf_classes"], dtype=np.int64),
        feature_names=state["feature_names"],
        embedding_width=state["embedding_width"],
        n_classes=state["n_classes"],
        framing=state["framing"],
    )


def cmd_export_tree(args) -> int:
    state = json.loads(Path(args.checkpoint).read_text(encoding="utf-8"))
    if state.get("kind") == "crisp-tree":
        tree = load_crisp(args.checkpoint)
    elif state.get("kind") == "pddt":
        tree = pddt_mod.crispify(pnn_mod.load_checkpoint(args.checkpoint))
    else:
        raise ConfigError("export-tree needs a pddt or crisp-tree checkpoint")
    rendering = pddt_mod.export_tree(tree, format=args.format)
    if args.out:
        Path(args.out).write_text(rendering + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(rendering)
    return 0


def cmd_compare(args) -> int:
    reports = [MetricsReport.load(p) for p in args.reports]
    table = harness.compare(reports)
    text = table.to_text()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    if args.tsv:
        harness.emit_plot_data(reports, args.tsv)
        print(f"plot data written to {args.tsv}")
    if args.plot:
        from apprentice import report as report_mod
        report_mod.comparison_bar_chart(reports, args.plot)
        print(f"figure written to {args.plot}")
    return 0


REPRODUCE_MODELS = {
    "lowdim": [("pnn", "pairwise"), ("pddt", "pairwise"), ("nn", "standard"),
               ("ddt", "standard"), ("dt", "standard"), ("kmeans-nn", "standard"),
               ("gmm-nn", "standard"), ("em-dt", "standard"),
               ("dt-pnn-emb", "standard")],
    "scheduling": [("pnn", "pairwise"), ("pnn", "standard"), ("pddt", "pairwise"),
                   ("nn", "standard"), ("ddt", "standard"), ("dt", "standard"),
                   ("kmeans-nn", "standard"), ("gmm-nn", "standard"),
                   ("em-dt", "standard"), ("dt-pnn-emb", "standard")],
    "scheduling-multilabel": [("pnn", "pairwise"), ("pddt", "pairwise")],
}


def cmd_reproduce(args) -> int:
    root = output_root(args.out)
    seeds = list(range(1, args.seeds + 1))
    overall = {}
    failures = 0
    for domain in args.domains:
        domain_dir = root / domain
        domain_dir.mkdir(parents=True, exist_ok=True)
        reports = []
        for model, framing in REPRODUCE_MODELS[domain]:
            hyper = {}
            if args.quick:
                hyper["data"] = {"schedule_count": 20 if domain == "lowdim" else 30}
            config = ExperimentConfig(domain=domain, model=model, framing=framing,
                                      seeds=seeds, hyperparameters=hyper,
                                      output_dir=str(domain_dir))
            print(f"[{domain}] running {model}+{framing} ...", flush=True)
            report = harness.run(config)
            if report.status != "ok":
                failures += 1
                print(f"  FAILED: {report.status}")
            else:
                print(f"  mean {report.metric} {report.mean:.4f} "
                      f"(std {report.std:.4f}, {report.wall_clock_s:.0f}s)")
            reports.append(report)
        ok = [r for r in reports if r.status == "ok" and r.per_seed]
        if len(ok) >= 2:
            table = harness.compare(ok)
            (domain_dir / "comparison.txt").write_text(table.to_text() + "\n",
                                                       encoding="utf-8")
            harness.emit_plot_data(ok, domain_dir / "results.tsv")
            from apprentice import report as report_mod
            report_mod.comparison_bar_chart(ok, domain_dir / "results.png")
        overall[domain] = {
            f"{r.model}+{r.framing}": {"mean": r.mean, "std": r.std,
                                       "metric": r.metric, "status": r.status}
            for r in reports
        }
    (root / "summary.json").write_text(json.dumps(overall, indent=2), encoding="utf-8")
    print(f"summary written to {root / 'summary.json'}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apprentice",
        description="Personalized apprenticeship learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic demonstration dataset")
    p.add_argument("--domain", choices=harness.DOMAINS, required=True)
    p.add_argument("--count", type=int, default=50, help="number of schedules")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--set", nargs="*", metavar="KEY=VAL", help="config overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=harness.MODELS, required=True)
    p.add_argument("--framing", choices=harness.FRAMINGS)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--train-fraction", type=float, default=None,
                   help="train on this fraction (schedule-level split)")
    p.add_argument("--split-seed", type=int, default=1)
    p.add_argument("--config", help="JSON hyperparameter file")
    p.add_argument("--set", nargs="*", metavar="KEY=VAL")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-fraction", type=float, default=None,
                   help="evaluate on the held-out side of this split")
    p.add_argument("--split-seed", type=int, default=1)
    p.add_argument("--config", help="JSON adaptation settings")
    p.add_argument("--set", nargs="*", metavar="KEY=VAL")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crispify", help="convert a soft tree to a crisp tree")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crispify)

    p = sub.add_parser("export-tree", help="render a tree as text or dot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=("text", "dot"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_tree)

    p = sub.add_parser("compare", help="rank completed runs on one dataset")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--out", help="write the ranking table here")
    p.add_argument("--tsv", help="write per-seed plot data here")
    p.add_argument("--plot", help="write a bar chart here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce", help="run the full comparison suites")
    p.add_argument("--domains", nargs="+", choices=harness.DOMAINS,
                   default=["lowdim", "scheduling"])
    p.add_argument("--seeds", type=int, default=5, help="seeds 1..N")
    p.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV} "
                                 "or ./apprentice-out)")
    p.add_argument("--quick", action="store_true",
                   help="small datasets for a fast smoke run")
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (RunError, TrainingError, OSError, ValueError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
