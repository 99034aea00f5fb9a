"""Desk-scale ablations on the synthetic benchmark.

A GeM baseline is first trained end to end on a disjoint synthetic source set
(standing in for a backbone pretrained on a large landmark collection). Each
ablation config then starts from that model and fine-tunes with the backbone
frozen, so only SOA blocks, whitening and p move.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .backbones import BackboneSpec, DescriptorModel, transfer
from .evaluation import evaluate, p_sweep, query_images
from .synthetic import generate_synthetic_benchmark
from .training import DESK_PROFILE, ImageSet, train

SOURCE_SEED = 12345
SOURCE_CLASSES = 16
BASE_EPOCHS = 10
SWEEP_P = (1, 2, 3, 5, 10, 20, 50, 100)

# name -> (SOA insertions, SOS weight)
ABLATION = {
    "gem": ((), 0.0),
    "gem+sos": ((), DESK_PROFILE.lam),
    "gem+soa45": ((4, 5), 0.0),
    "solar": ((4, 5), DESK_PROFILE.lam),
}


def image_set(bench):
    return ImageSet(bench.train_images, bench.train_labels, bench.train_ids)


def source_benchmark(n_classes=SOURCE_CLASSES, seed=SOURCE_SEED):
    return generate_synthetic_benchmark(n_classes=n_classes, seed=seed)


def pretrain_base(source, seed, epochs=BASE_EPOCHS, profile=DESK_PROFILE):
    """GeM baseline trained end to end (first-order loss only) on ``source``."""
    model = DescriptorModel(BackboneSpec(seed=seed))
    cfg = profile.replace(epochs=epochs, lam=0.0, freeze_backbone=False, seed=seed)
    model, _ = train(model, image_set(source), cfg)
    return model


def finetune(base, bench, insertions, lam, seed, profile=DESK_PROFILE):
    spec = BackboneSpec(soa_insertions=insertions, seed=seed)
    model = transfer(base, spec)
    return train(model, image_set(bench), profile.replace(lam=lam, seed=seed, freeze_backbone=True))


def bench_metrics(model, bench, scales=(1.0,)):
    queries = query_images(bench.query_images, bench.query_ids, bench.gt)
    return evaluate(model, queries, bench.query_ids, bench.db_images, bench.db_ids, bench.gt, scales)


@dataclass
class AblationResult:
    # config -> list over seeds of {protocol: {"mAP", "mP@10"}}
    runs: dict = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, config, protocol="medium", metric="mAP"):
        return float(np.mean([r[protocol][metric] for r in self.runs[config]]))


def run_ablation(bench, seeds=(0, 1, 2), configs=ABLATION, source=None, profile=DESK_PROFILE,
                 base_epochs=BASE_EPOCHS, log=None):
    start = time.perf_counter()
    source = source_benchmark() if source is None else source
    result = AblationResult({name: [] for name in configs})
    for seed in seeds:
        base = pretrain_base(source, seed, base_epochs, profile)
        for name, (insertions, lam) in configs.items():
            model, _ = finetune(base, bench, insertions, lam, seed, profile)
            metrics = bench_metrics(model, bench)
            result.runs[name].append(metrics)
            if log:
                log(f"seed {seed} {name}: medium mAP {metrics['medium']['mAP']:.4f} "
                    f"hard mAP {metrics['hard']['mAP']:.4f}")
    result.seconds = time.perf_counter() - start
    return result


def sweep_trained(bench, seed=0, p_values=SWEEP_P, source=None, profile=DESK_PROFILE,
                  base_epochs=BASE_EPOCHS):
    """Fine-tuned GeM baseline swept over ``p_values``; returns ``(model, SweepResult)``."""
    source = source_benchmark() if source is None else source
    base = pretrain_base(source, seed, base_epochs, profile)
    model, _ = finetune(base, bench, (), 0.0, seed, profile)
    queries = query_images(bench.query_images, bench.query_ids, bench.gt)
    sweep = p_sweep(model, queries, bench.query_ids, bench.db_images, bench.db_ids, bench.gt,
                    sorted(set(p_values) | {round(model.gem.p.item(), 6)}))
    return model, sweep


def rise_then_fall(sweep, protocol="medium"):
    """True when mAP at the learned p beats both ends of the sweep."""
    table = dict((p, m[protocol]) for p, m in sweep.rows)
    learned = min(table, key=lambda p: abs(p - sweep.learned_p))
    lo, hi = min(table), max(table)
    return table[learned] > table[lo] and table[learned] > table[hi] and not math.isclose(learned, lo)
