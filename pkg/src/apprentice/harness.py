"""Experiment runner: dataset generation, training, evaluation, comparisons,
and reproduction of the headline result tables as metric files.

A run is fully determined by its config and seeds: datasets are generated
per (domain, seed), models train on an 0.8 schedule split, personalized
models infer an embedding for each test schedule before being scored on it,
and every report carries fingerprints of both the config and the data.
"""

from __future__ import annotations

import hashlib
import io
import json
import subprocess
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from apprentice import __version__, baselines, dataset as ds_mod
from apprentice import pairwise as pw
from apprentice import pddt as pddt_mod
from apprentice import pnn as pnn_mod
from apprentice.diffcore import SgdConfig, TrainingError, renyi_loss, splitmix64
from apprentice.envs import generate_lowdim, generate_scheduling, LowDimConfig
from apprentice.envs import lowdim as lowdim_mod
from apprentice.envs import scheduling as sched_mod
from apprentice.envs.scheduling import FEASIBLE_COLUMN, generate_scheduling_multilabel

DOMAINS = ("lowdim", "scheduling", "scheduling-multilabel")
MODELS = ("pnn", "pddt", "nn", "ddt", "dt", "kmeans-nn", "gmm-nn", "em-dt", "dt-pnn-emb")
FRAMINGS = ("pairwise", "pointwise", "standard")
DEFAULT_SEEDS = [1, 2, 3, 4, 5]

# models whose raw scores are not probabilities; pairing them with the
# marginalized pairwise prediction needs an explicit opt-in
UNCALIBRATED = ("dt", "em-dt", "dt-pnn-emb")

DEFAULT_FRAMING = {
    "pnn": "pairwise",
    "pddt": "pairwise",
    "nn": "standard",
    "ddt": "standard",
    "dt": "standard",
    "kmeans-nn": "standard",
    "gmm-nn": "standard",
    "em-dt": "standard",
    "dt-pnn-emb": "standard",
}


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    domain: str
    model: str
    framing: Optional[str] = None
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    hyperparameters: dict = field(default_factory=dict)
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.framing is None:
            self.framing = DEFAULT_FRAMING[self.model]
        if self.framing not in FRAMINGS:
            raise ConfigError(f"unknown framing {self.framing!r}")
        if (self.model in UNCALIBRATED and self.framing != "standard"
                and not self.hyperparameters.get("allow_uncalibrated_scores")):
            raise ConfigError(
                f"model {self.model!r} with framing {self.framing!r} needs the "
                "allow_uncalibrated_scores hyperparameter (its scores are not "
                "calibrated probabilities)"
            )
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.domain == "scheduling-multilabel" and self.model not in ("pnn", "pddt", "nn"):
            raise ConfigError(f"model {self.model!r} has no multi-label evaluation path")

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"domain": self.domain, "model": self.model, "framing": self.framing,
             "seeds": self.seeds, "hyperparameters": self.hyperparameters},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    domain: str
    model: str
    framing: str
    metric: str                      # "accuracy" (higher better) or "loss"
    seeds: list
    per_seed: list
    mean: float
    std: float
    confusion: Optional[list]        # summed over seeds; None for loss metric
    wall_clock_s: float
    config_fingerprint: str
    dataset_fingerprint: str
    version: str
    extras: dict = field(default_factory=dict)
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"apprentice {__version__}" + (f" ({described})" if described else "")


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

_DATASET_CACHE: dict = {}


def dataset_text(dset) -> str:
    buf = io.StringIO()
    buf.write(f"{ds_mod.FORMAT_HEADER}\t{dset.domain_tag}\t{dset.action_count}"
              f"\t{dset.context_dim}\t{dset.action_dim}\n")
    for s in dset.schedules:
        for o in s.observations:
            buf.write("\t".join([
                s.schedule_id, s.demonstrator_id, str(o.timestep),
                ",".join(repr(float(v)) for v in o.context),
                ";".join(",".join(repr(float(v)) for v in row)
                         for row in o.action_features),
                ",".join(str(a) for a in o.taken_actions),
            ]) + "\n")
    return buf.getvalue()


def dataset_fingerprint(dset) -> str:
    return hashlib.sha256(dataset_text(dset).encode()).hexdigest()[:16]


def build_dataset(domain: str, seed: int, hyper: Optional[dict] = None):
    hyper = hyper or {}
    key = (domain, seed, json.dumps(hyper.get("data", {}), sort_keys=True))
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    data_cfg = hyper.get("data", {})
    if domain == "lowdim":
        dset = generate_lowdim(LowDimConfig(
            schedule_count=int(data_cfg.get("schedule_count", 50)), seed=seed))
    elif domain == "scheduling":
        dset = generate_scheduling(int(data_cfg.get("schedule_count", 150)), seed=seed)
    else:
        dset = generate_scheduling_multilabel(
            int(data_cfg.get("schedule_count", 60)), seed=seed)
    _DATASET_CACHE[key] = dset
    return dset


def mask_fn_for(dset) -> Optional[Callable]:
    if dset.domain_tag.startswith("scheduling"):
        def feasible(obs):
            return obs.action_features[:, FEASIBLE_COLUMN] == 1.0
        return feasible
    return None


def feature_names_for(dset, framing: str, d: int) -> list[str]:
    if dset.domain_tag == "lowdim":
        ctx, act = lowdim_mod.CONTEXT_NAMES, lowdim_mod.ACTION_FEATURE_NAMES
    elif dset.domain_tag.startswith("scheduling"):
        ctx, act = sched_mod.CONTEXT_NAMES, sched_mod.ACTION_FEATURE_NAMES
    else:
        ctx = [f"ctx{i}" for i in range(dset.context_dim)]
        act = [f"af{i}" for i in range(dset.action_dim)]
    return pw.feature_names(framing, d, ctx, act, dset.action_count)


# ---------------------------------------------------------------------------
# Per-domain hyperparameter defaults
# ---------------------------------------------------------------------------

DEFAULTS: dict = {
    "lowdim": {
        "pnn": {
            "d": 2, "hidden": [32, 32], "epochs": 150, "lr": 0.1, "momentum": 0.9,
            "batch_size": 64, "optimizer": "sgd",
            "adapt": {"mode": "online", "passes": 2, "lr_embedding": 0.5, "epochs": 1},
        },
        "pddt": {
            "d": 2, "depth": 5, "epochs": 160, "lr": 0.1, "momentum": 0.9,
            "batch_size": 64, "optimizer": "adam", "warmup_fraction": 0.7,
            "embedding_init_std": 0.5, "restarts": 6, "restart_loss_target": 0.15,
            "adapt": {"mode": "online", "passes": 2, "lr_embedding": 0.5, "epochs": 1},
        },
        "nn": {"hidden": [32, 32], "epochs": 150, "lr": 0.1, "momentum": 0.9,
               "batch_size": 64, "optimizer": "sgd"},
        "ddt": {"depth": 5, "epochs": 160, "lr": 0.1, "momentum": 0.9,
                "batch_size": 64, "optimizer": "adam", "warmup_fraction": 0.7},
        "dt": {"max_depth": None},
        "kmeans-nn": {"k": 2, "hidden": [32, 32], "epochs": 100, "lr": 0.1,
                      "momentum": 0.9, "batch_size": 64},
        "gmm-nn": {"k": 2, "hidden": [32, 32], "epochs": 100, "lr": 0.1,
                   "momentum": 0.9, "batch_size": 64},
        "em-dt": {"iterations": 10, "max_depth": None},
        "dt-pnn-emb": {"max_depth": None},
    },
    "scheduling": {
        "pnn": {
            "d": 3, "hidden": [32, 32], "epochs": 120, "lr": 0.1, "momentum": 0.9,
            "batch_size": 128, "optimizer": "sgd",
            "adapt": {"mode": "batch", "passes": 1, "lr_embedding": 1.0,
                      "epochs": 200, "starts": 3},
        },
        "pddt": {
            "d": 3, "depth": 6, "epochs": 120, "lr": 0.1, "momentum": 0.9,
            "batch_size": 128, "optimizer": "adam", "warmup_fraction": 0.7,
            "embedding_init_std": 0.5, "restarts": 6, "restart_loss_target": 0.1,
            "adapt": {"mode": "batch", "passes": 1, "lr_embedding": 1.0,
                      "epochs": 200, "starts": 3},
        },
        "nn": {"hidden": [64, 64], "epochs": 150, "lr": 0.1, "momentum": 0.9,
               "batch_size": 64, "optimizer": "sgd"},
        "ddt": {"depth": 6, "epochs": 120, "lr": 0.1, "momentum": 0.9,
                "batch_size": 64, "optimizer": "adam", "warmup_fraction": 0.7},
        "dt": {"max_depth": None},
        "kmeans-nn": {"k": 2, "hidden": [64, 64], "epochs": 100, "lr": 0.1,
                      "momentum": 0.9, "batch_size": 64},
        "gmm-nn": {"k": 2, "hidden": [64, 64], "epochs": 100, "lr": 0.1,
                   "momentum": 0.9, "batch_size": 64},
        "em-dt": {"iterations": 8, "max_depth": 12},
        "dt-pnn-emb": {"max_depth": None},
    },
    "scheduling-multilabel": {
        "pnn": {
            "d": 3, "hidden": [64, 64], "epochs": 120, "lr": 0.1, "momentum": 0.9,
            "batch_size": 128, "optimizer": "sgd",
            "adapt": {"mode": "batch", "passes": 1, "lr_embedding": 1.0, "epochs": 200},
        },
        "pddt": {
            "d": 3, "depth": 6, "epochs": 120, "lr": 0.1, "momentum": 0.9,
            "batch_size": 128, "optimizer": "adam", "warmup_fraction": 0.7,
            "embedding_init_std": 0.5, "restarts": 4, "restart_loss_target": 0.1,
            "adapt": {"mode": "batch", "passes": 1, "lr_embedding": 1.0, "epochs": 200},
        },
        "nn": {"hidden": [64, 64], "epochs": 120, "lr": 0.1, "momentum": 0.9,
               "batch_size": 128, "optimizer": "sgd"},
    },
}


def resolve_hyper(config: ExperimentConfig) -> dict:
    base = dict(DEFAULTS.get(config.domain, {}).get(config.model, {}))
    for key, value in config.hyperparameters.items():
        if key == "adapt" and isinstance(value, dict):
            merged = dict(base.get("adapt", {}))
            merged.update(value)
            base["adapt"] = merged
        elif key != "data":
            base[key] = value
    return base


def _sgd_config(hyper: dict, seed: int) -> SgdConfig:
    return SgdConfig(
        learning_rate_model=float(hyper.get("lr", 0.1)),
        learning_rate_embedding=float(hyper["lr_embedding"]) if "lr_embedding" in hyper
        else (float(hyper.get("lr", 0.1)) if hyper.get("optimizer") == "adam" else None),
        momentum=float(hyper.get("momentum", 0.9)),
        batch_size=int(hyper.get("batch_size", 64)),
        epochs=int(hyper.get("epochs", 100)),
        seed=seed,
        optimizer=hyper.get("optimizer", "sgd"),
    )


def _adapt_config(hyper: dict, seed: int) -> tuple[SgdConfig, str, int, int]:
    a = hyper.get("adapt", {})
    cfg = SgdConfig(
        learning_rate_model=0.1,
        learning_rate_embedding=float(a.get("lr_embedding", 0.5)),
        momentum=float(a.get("momentum", 0.0)),
        batch_size=int(a.get("batch_size", 64)),
        epochs=int(a.get("epochs", 1)),
        seed=seed,
        optimizer=a.get("optimizer", "sgd"),
    )
    return cfg, a.get("mode", "online"), int(a.get("passes", 1)), int(a.get("starts", 1))


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def evaluate_policy(predict_fn, test_ds, mask_fn=None):
    """Top-1 accuracy over all test timesteps plus confusion counts."""
    n = test_ds.action_count
    confusion = np.zeros((n, n), dtype=np.int64)
    hits = total = 0
    for sched in test_ds.schedules:
        for obs in sched.observations:
            mask = mask_fn(obs) if mask_fn is not None else None
            probs = predict_fn(obs, sched, mask)
            pred = int(np.argmax(probs))
            truth = obs.taken_action
            confusion[truth, pred] += 1
            hits += int(pred == truth)
            total += 1
    return hits / total, confusion


def multilabel_loss(score_fn, test_ds, mask_fn=None, alpha: float = 1.0) -> float:
    """Mean divergence between the normalized multi-hot target and the
    marginalized action distribution, over all test timesteps."""
    losses = []
    for sched in test_ds.schedules:
        for obs in sched.observations:
            mask = mask_fn(obs) if mask_fn is not None else None
            probs = pw.predict_action(score_fn, obs, np.zeros(0), mask=mask) \
                if score_fn.__class__.__name__ == "function" else score_fn(obs, sched, mask)
            target = np.zeros(test_ds.action_count)
            target[list(obs.taken_actions)] = 1.0 / len(obs.taken_actions)
            losses.append(renyi_loss(probs, target, alpha=alpha))
    return float(np.mean(losses))


def adapt_and_eval(model, test_ds, adapt_cfg, adapt_mode, passes, mask_fn, starts=1):
    """Two-phase protocol: infer each test schedule's embedding from its
    observed decisions (weights frozen), then score next-action accuracy."""
    embeddings = adapt_all(model, test_ds, adapt_cfg, adapt_mode, passes, mask_fn, starts)

    def predict_fn(obs, sched, mask):
        return pnn_mod.predict(model, obs, embeddings[sched.schedule_id], mask=mask)

    acc, confusion = evaluate_policy(predict_fn, test_ds, mask_fn)
    return acc, confusion, embeddings


def adapt_all(model, test_ds, adapt_cfg, adapt_mode, passes, mask_fn, starts=1) -> dict:
    return {
        sched.schedule_id: pnn_mod.adapt_embedding(
            model, sched, adapt_cfg, mode=adapt_mode, passes=passes,
            mask_fn=mask_fn, starts=starts)
        for sched in test_ds.schedules
    }


# ---------------------------------------------------------------------------
# Model runners (one seed each)
# ---------------------------------------------------------------------------

def _train_pnn(train_ds, hyper, seed, framing, mask_fn):
    model = pnn_mod.PnnModel(
        train_ds.context_dim, train_ds.action_dim, train_ds.action_count,
        framing=framing, d=int(hyper.get("d", 2)),
        hidden=tuple(hyper.get("hidden", (32, 32))), seed=seed,
    )
    curve = pnn_mod.train(model, train_ds, framing, _sgd_config(hyper, seed),
                          mask_fn=mask_fn)
    return model, curve


def _train_pddt(train_ds, hyper, seed, framing, mask_fn, feature_names):
    """Best-of-restarts training; restarts stop early once the final training
    loss clears the target."""
    restarts = int(hyper.get("restarts", 1))
    target = float(hyper.get("restart_loss_target", 0.0))
    best = None
    attempts = 0
    for r in range(max(restarts, 1)):
        attempts += 1
        sub_seed = splitmix64(seed, 101 + r) % (2 ** 31)
        model = pddt_mod.PddtModel(
            train_ds.context_dim, train_ds.action_dim, train_ds.action_count,
            framing=framing, d=int(hyper.get("d", 2)), depth=int(hyper.get("depth", 5)),
            seed=sub_seed, feature_names=feature_names,
        )
        model.table.init_std = float(hyper.get("embedding_init_std", 0.5))
        try:
            curve = pddt_mod.train(
                model, train_ds, framing, _sgd_config(hyper, sub_seed),
                mask_fn=mask_fn,
                warmup_fraction=float(hyper.get("warmup_fraction", 0.7)),
            )
        except TrainingError:
            continue
        if best is None or curve[-1] < best[1]:
            best = (model, curve[-1], curve)
        if best[1] < target:
            break
    if best is None:
        raise RunError(f"all {restarts} tree restarts diverged (seed {seed})")
    model, final_loss, curve = best
    model.restart_attempts = attempts
    return model, curve


def run_seed(config: ExperimentConfig, seed: int) -> dict:
    """One (config, seed) cell: returns metric value, confusion, extras."""
    hyper = resolve_hyper(config)
    dset = build_dataset(config.domain, seed, config.hyperparameters)
    train_frac = float(config.hyperparameters.get("train_fraction", 0.8))
    train_ds, test_ds = ds_mod.split(dset, train_frac, seed)
    mask_fn = mask_fn_for(dset)
    framing = config.framing
    extras: dict = {}
    multilabel = config.domain == "scheduling-multilabel"

    if config.model in ("pnn", "nn"):
        if config.model == "nn":
            hyper = {**hyper, "d": 0}
        model, curve = _train_pnn(train_ds, hyper, seed, framing, mask_fn)
        extras["final_train_loss"] = curve[-1]
        adapt_cfg, mode, passes, starts = _adapt_config(hyper, seed)
        if config.model == "nn":
            def predict_fn(obs, sched, mask):
                return pnn_mod.predict(model, obs, np.zeros(0), mask=mask)
            if multilabel:
                value = multilabel_loss(predict_fn, test_ds, mask_fn)
                return {"value": value, "confusion": None, "extras": extras}
            acc, confusion = evaluate_policy(predict_fn, test_ds, mask_fn)
            return {"value": acc, "confusion": confusion, "extras": extras}
        if multilabel:
            embeddings = adapt_all(model, test_ds, adapt_cfg, mode, passes,
                                   mask_fn, starts)
            def predict_fn(obs, sched, mask):
                return pnn_mod.predict(model, obs, embeddings[sched.schedule_id], mask=mask)
            value = multilabel_loss(predict_fn, test_ds, mask_fn)
            return {"value": value, "confusion": None, "extras": extras}
        acc, confusion, _ = adapt_and_eval(model, test_ds, adapt_cfg, mode, passes,
                                           mask_fn, starts)
        return {"value": acc, "confusion": confusion, "extras": extras}

    if config.model in ("pddt", "ddt"):
        names = feature_names_for(dset, framing, int(hyper.get("d", 2)))
        if config.model == "ddt":
            hyper = {**hyper, "d": 0, "restarts": hyper.get("restarts", 3),
                     "restart_loss_target": hyper.get("restart_loss_target", 0.1),
                     "embedding_init_std": 0.0}
        model, curve = _train_pddt(train_ds, hyper, seed, framing, mask_fn, names)
        extras["final_train_loss"] = curve[-1]
        extras["restart_attempts"] = model.restart_attempts
        adapt_cfg, mode, passes, starts = _adapt_config(hyper, seed)
        crisp = pddt_mod.crispify(model)
        if config.model == "ddt":
            def predict_fn(obs, sched, mask):
                return pnn_mod.predict(model, obs, np.zeros(0), mask=mask)
            if multilabel:
                value = multilabel_loss(predict_fn, test_ds, mask_fn)
                return {"value": value, "confusion": None, "extras": extras}
            acc, confusion = evaluate_policy(predict_fn, test_ds, mask_fn)
            return {"value": acc, "confusion": confusion, "extras": extras}
        embeddings = adapt_all(model, test_ds, adapt_cfg, mode, passes, mask_fn, starts)

        def predict_continuous(obs, sched, mask):
            return pnn_mod.predict(model, obs, embeddings[sched.schedule_id], mask=mask)

        def predict_crisp(obs, sched, mask):
            emb = embeddings[sched.schedule_id]
            def scorer(F):
                return crisp.score_matrix(F)
            return pw.predict_action(scorer, obs, emb, mask=mask)

        if multilabel:
            value = multilabel_loss(predict_continuous, test_ds, mask_fn)
            extras["crisp_loss"] = multilabel_loss(predict_crisp, test_ds, mask_fn)
            extras["loss_gap_relative"] = (
                abs(extras["crisp_loss"] - value) / max(value, 1e-12))
            return {"value": value, "confusion": None, "extras": extras}
        acc, confusion = evaluate_policy(predict_continuous, test_ds, mask_fn)
        crisp_acc, _ = evaluate_policy(predict_crisp, test_ds, mask_fn)
        extras["crisp_accuracy"] = crisp_acc
        return {"value": acc, "confusion": confusion, "extras": extras}

    if config.model == "dt":
        arrays = pw.framed_arrays(train_ds, "standard")
        tree = baselines.fit_cart(arrays.features, arrays.labels.astype(np.int64),
                                  n_classes=train_ds.action_count,
                                  max_depth=hyper.get("max_depth"))

        def predict_fn(obs, sched, mask):
            ex = pw.build_standard(obs, ())
            pred = tree.predict(ex.features[None, :])[0]
            probs = np.zeros(test_ds.action_count)
            probs[pred] = 1.0
            if mask is not None and not probs[mask].sum():
                probs = np.where(mask, 1.0 / mask.sum(), 0.0)
            return probs

        acc, confusion = evaluate_policy(predict_fn, test_ds, mask_fn)
        extras["tree_depth"] = tree.depth()
        extras["tree_nodes"] = tree.node_count()
        return {"value": acc, "confusion": confusion, "extras": extras}

    if config.model in ("kmeans-nn", "gmm-nn"):
        method = "kmeans" if config.model == "kmeans-nn" else "gmm"
        cluster = baselines.fit_clustered(
            train_ds, method, int(hyper.get("k", 2)), _sgd_config(hyper, seed),
            framing=framing, hidden=tuple(hyper.get("hidden", (32, 32))),
        )
        extras["effective_k"] = cluster.effective_k
        extras["dropped_clusters"] = cluster.dropped_clusters

        def predict_fn(obs, sched, mask):
            return cluster.predict(obs, sched, mask=mask)

        acc, confusion = evaluate_policy(predict_fn, test_ds, mask_fn)
        return {"value": acc, "confusion": confusion, "extras": extras}

    if config.model == "em-dt":
        em = baselines.fit_em_dt(train_ds, modes=2,
                                 iterations=int(hyper.get("iterations", 10)),
                                 seed=seed, max_depth=hyper.get("max_depth"))
        extras["iterations_run"] = em.iterations_run
        extras["oscillated"] = em.oscillated

        def predict_with_mode(obs, mode):
            ex = pw.build_standard(obs, ())
            onehot = np.zeros(2)
            onehot[mode] = 1.0
            return int(em.tree.predict(np.concatenate([ex.features, onehot])[None, :])[0])

        n = test_ds.action_count
        confusion = np.zeros((n, n), dtype=np.int64)
        hits = total = 0
        for sched in test_ds.schedules:
            # pick the mode hypothesis that explains the observed schedule best
            mode_acc = [0.0, 0.0]
            for m in (0, 1):
                right = sum(int(predict_with_mode(o, m) == o.taken_action)
                            for o in sched.observations)
                mode_acc[m] = right / len(sched.observations)
            mode = int(np.argmax(mode_acc))
            for obs in sched.observations:
                pred = predict_with_mode(obs, mode)
                confusion[obs.taken_action, pred] += 1
                hits += int(pred == obs.taken_action)
                total += 1
        return {"value": hits / total, "confusion": confusion, "extras": extras}

    if config.model == "dt-pnn-emb":
        # the backing network trains with the pnn defaults of this domain so
        # the inferred embeddings match the pnn run bit for bit
        pnn_hyper = resolve_hyper(ExperimentConfig(
            domain=config.domain, model="pnn",
            hyperparameters=config.hyperparameters, seeds=[seed]))
        model, _ = _train_pnn(train_ds, pnn_hyper, seed, "pairwise", mask_fn)
        tree = baselines.fit_dt_on_pnn_embeddings(model, train_ds,
                                                  max_depth=hyper.get("max_depth"))
        adapt_cfg, mode, passes, starts = _adapt_config(pnn_hyper, seed)
        embeddings = adapt_all(model, test_ds, adapt_cfg, mode, passes, mask_fn, starts)

        def predict_fn(obs, sched, mask):
            ex = pw.build_standard(obs, embeddings[sched.schedule_id])
            pred = tree.predict(ex.features[None, :])[0]
            probs = np.zeros(test_ds.action_count)
            probs[pred] = 1.0
            if mask is not None and not probs[mask].sum():
                probs = np.where(mask, 1.0 / mask.sum(), 0.0)
            return probs

        acc, confusion = evaluate_policy(predict_fn, test_ds, mask_fn)
        extras["tree_depth"] = tree.depth()
        return {"value": acc, "confusion": confusion, "extras": extras}

    raise ConfigError(f"unhandled model {config.model!r}")


def run(config: ExperimentConfig) -> MetricsReport:
    """Execute every seed of the experiment and aggregate a report."""
    t0 = time.time()
    metric = "loss" if config.domain == "scheduling-multilabel" else "accuracy"
    per_seed = []
    confusion_total = None
    extras_per_seed = []
    fingerprints = set()
    status = "ok"
    try:
        for seed in config.seeds:
            dset = build_dataset(config.domain, seed, config.hyperparameters)
            fingerprints.add(dataset_fingerprint(dset))
            cell = run_seed(config, seed)
            per_seed.append(float(cell["value"]))
            extras_per_seed.append(cell["extras"])
            if cell["confusion"] is not None:
                if confusion_total is None:
                    confusion_total = np.zeros_like(cell["confusion"])
                confusion_total += cell["confusion"]
    except (TrainingError, RunError) as e:
        status = f"failed: {e}"
    arr = np.array(per_seed) if per_seed else np.array([np.nan])
    extras = {"per_seed": extras_per_seed}
    for key in ("crisp_accuracy", "crisp_loss", "loss_gap_relative"):
        vals = [e[key] for e in extras_per_seed if key in e]
        if vals:
            extras[key + "_mean"] = float(np.mean(vals))
    report = MetricsReport(
        domain=config.domain,
        model=config.model,
        framing=config.framing,
        metric=metric,
        seeds=list(config.seeds[:len(per_seed)]),
        per_seed=per_seed,
        mean=float(arr.mean()),
        std=float(arr.std()),
        confusion=None if confusion_total is None else confusion_total.tolist(),
        wall_clock_s=time.time() - t0,
        config_fingerprint=config.fingerprint(),
        dataset_fingerprint="+".join(sorted(fingerprints)),
        version=version_string(),
        extras=extras,
        status=status,
    )
    if config.output_dir:
        outdir = Path(config.output_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        name = f"{config.domain}-{config.model}-{config.framing}.report.json"
        report.save(outdir / name)
    return report


# ---------------------------------------------------------------------------
# Comparison and plot data
# ---------------------------------------------------------------------------

@dataclass
class ComparisonTable:
    rows: list          # (model label, mean, std, per-seed values)
    diffs: list         # pairwise mean differences, diffs[i][j] = mean_i - mean_j
    win_counts: list    # win_counts[i][j] = #seeds where i beats j
    metric: str

    def to_text(self) -> str:
        lines = [f"{'rank':>4}  {'model':<28} {'mean':>8}  {'std':>7}  per-seed"]
        for i, (label, mean, std, per_seed) in enumerate(self.rows, start=1):
            seeds = " ".join(f"{v:.4f}" for v in per_seed)
            lines.append(f"{i:>4}  {label:<28} {mean:>8.4f}  {std:>7.4f}  {seeds}")
        lines.append("")
        lines.append("pairwise mean differences (row - column):")
        labels = [r[0] for r in self.rows]
        header = " " * 30 + "  ".join(f"{l[:12]:>12}" for l in labels)
        lines.append(header)
        for i, label in enumerate(labels):
            cells = "  ".join(f"{self.diffs[i][j]:>12.4f}" for j in range(len(labels)))
            lines.append(f"{label:<30}{cells}")
        lines.append("")
        lines.append("per-seed win counts (row beats column):")
        lines.append(header)
        for i, label in enumerate(labels):
            cells = "  ".join(f"{self.win_counts[i][j]:>12d}" for j in range(len(labels)))
            lines.append(f"{label:<30}{cells}")
        return "\n".join(lines)


def compare(reports: list[MetricsReport]) -> ComparisonTable:
    """Rank completed runs that share a dataset; higher accuracy first (or
    lower loss first)."""
    if len(reports) < 2:
        raise ConfigError("need at least two reports to compare")
    prints = {r.dataset_fingerprint for r in reports}
    if len(prints) != 1:
        raise ConfigError(f"dataset fingerprints differ: {sorted(prints)}")
    metric = reports[0].metric
    lower_better = metric == "loss"
    labeled = [(f"{r.model}+{r.framing}", r) for r in reports]
    order = sorted(range(len(labeled)),
                   key=lambda i: labeled[i][1].mean,
                   reverse=not lower_better)
    rows = [(labeled[i][0], labeled[i][1].mean, labeled[i][1].std,
             labeled[i][1].per_seed) for i in order]
    n = len(order)
    diffs = [[rows[i][1] - rows[j][1] for j in range(n)] for i in range(n)]
    win_counts = [[0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = rows[i][3], rows[j][3]
            pairs = zip(a, b)
            if lower_better:
                win_counts[i][j] = sum(1 for x, y in pairs if x < y)
            else:
                win_counts[i][j] = sum(1 for x, y in pairs if x > y)
    return ComparisonTable(rows, diffs, win_counts, metric)


PLOT_COLUMNS = ["domain", "model", "framing", "seed", "metric", "value",
                "mean", "std", "wall_clock_s", "dataset_fingerprint"]


def emit_plot_data(reports: list[MetricsReport], path) -> Path:
    """Tab-separated table, one row per (model, seed), for external plotting."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\t".join(PLOT_COLUMNS) + "\n")
        for r in reports:
            for seed, value in zip(r.seeds, r.per_seed):
                fh.write("\t".join([
                    r.domain, r.model, r.framing, str(seed), r.metric,
                    repr(float(value)), repr(float(r.mean)), repr(float(r.std)),
                    repr(float(r.wall_clock_s)), r.dataset_fingerprint,
                ]) + "\n")
    return path


def parse_plot_data(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    if header != PLOT_COLUMNS:
        raise ConfigError(f"unexpected plot-data columns: {header}")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        row = dict(zip(header, line.split("\t")))
        for key in ("value", "mean", "std", "wall_clock_s"):
            row[key] = float(row[key])
        row["seed"] = int(row["seed"])
        out.append(row)
    return out
