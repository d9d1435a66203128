"""Desk-scale separation experiment: baseline vs TCM vs TCM without CLS
enrichment, over several corpus seeds, reporting per-seed and median EER.

Each seed draws a fresh corpus; the three variants train on the same
corpus with identical protocol, so any median gap is attributable to the
architecture. Runs are deterministic given the config.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import CorpusSpec, generate_corpus
from .metrics import TdcfCosts, evaluate
from .model import Model, ModelConfig, TcmToggles
from .train import TrainConfig, load_into_model, train

VARIANTS = (
    ("baseline", TcmToggles(use_tcm=False)),
    ("tcm", TcmToggles()),
    ("no_cls_enrichment", TcmToggles(add_mean_ht_to_cls=False,
                                     add_mean_tt_to_cls=False)),
)


@dataclass
class DeskConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(
        n_train=2000, n_dev=500, n_eval=1000, feature_dim=64,
        t_min=150, t_max=250, seg_len=150, amplitude=0.7))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        feature_dim=64, dim=32, heads=4, blocks=2, dropout=0.1))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=3e-3, max_epochs=2, target_T=100, top_k_average=1))
    # Eval-time crop length; None means reuse the training crop. Scoring
    # longer windows than were trained on is cheap and reduces eval noise.
    eval_target_T: int | None = 125
    costs: TdcfCosts | None = None


def run_variant(corpus, model_config, train_config, costs=None, target_T=None):
    """Train one model on a generated corpus and score its eval split."""
    model = Model(model_config, seed=train_config.seed)
    result = train(model, corpus["train"], corpus["dev"], train_config)
    load_into_model(model, result.final)
    report, _ = evaluate(model, corpus["eval"], costs=costs,
                         target_T=target_T or train_config.target_T)
    report["val_loss"] = result.final.val_loss
    report["epochs"] = len(result.history)
    return report


def median(values):
    ordered = sorted(values)
    n = len(ordered)
    mid = ordered[n // 2]
    return mid if n % 2 else (ordered[n // 2 - 1] + mid) / 2.0


def run_desk_experiment(config: DeskConfig, log=None):
    """Full sweep: every seed x every variant. Returns a result dict with
    per-run reports, per-variant medians, and total wall-clock seconds."""
    started = time.time()
    runs = []
    for seed in config.seeds:
        corpus = generate_corpus(replace(config.corpus, seed=seed))
        for name, toggles in VARIANTS:
            t0 = time.time()
            mc = replace(config.model, toggles=toggles)
            tc = replace(config.train, seed=seed)
            report = run_variant(corpus, mc, tc, costs=config.costs,
                                 target_T=config.eval_target_T)
            row = {"seed": seed, "variant": name,
                   "elapsed": time.time() - t0, **report}
            runs.append(row)
            if log:
                log(f"seed={seed} {name}: eer={row['eer']:.4f} "
                    f"val_loss={row['val_loss']:.4f} {row['elapsed']:.1f}s")
    medians = {
        name: median([r["eer"] for r in runs if r["variant"] == name])
        for name, _ in VARIANTS
    }
    return {"runs": runs, "median_eer": medians,
            "total_seconds": time.time() - started}


def write_results(results, path):
    Path(path).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
