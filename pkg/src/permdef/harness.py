"""Transfer-attack evaluation protocol and grid reports.

The experiment, per dataset and attack row: train a classical network and a
key-defended network on the same data; let the attacker (who knows the
architecture and data but never the key) train an undefended surrogate and
craft adversarial examples against it; score both victims on the clean test
head and on the adversarial batch.  Surrogate work runs inside
``attacker_context`` so any reach for key material trips the guard.

With identical seeds the gray-box surrogate's training run is bitwise
identical to the classical victim's, so the model cache trains it once;
the classical-victim cell is then the degenerate case of attacking the
victim's own undefended network.
"""

from __future__ import annotations

import hashlib
import json
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attacks as A
from . import data as Dio
from . import defence as Dfc
from . import network as N
from .rng import derive_seed

ROW_ORDER = ("cw-l2", "cw-l0", "cw-linf", "fgsm")
DATASET_ORDER = ("mnist", "fashion-mnist")


def _tag(s: str) -> int:
    """Stable integer for seed derivation from a config string."""
    return zlib.crc32(s.encode())


def classification_error(predict, ds: Dio.LabeledDataset) -> float:
    """Percent of samples where predict(images) disagrees with the labels."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    predicted = np.asarray(predict(ds.images))
    return 100.0 * float((predicted != ds.labels).mean())


@dataclass
class ThreatScenario:
    knowledge: str               # black-box | gray-box
    surrogate_arch: str
    victim_arch: str
    victim_kind: str             # classical | defended
    attack: A.AttackSpec
    dataset: str
    sample_count: int
    key_seed: int | None = None  # victim-side only; never shown to the attacker

    def __post_init__(self):
        if self.knowledge not in ("black-box", "gray-box"):
            raise ValueError(f"unknown knowledge level {self.knowledge!r}")
        if self.victim_kind not in ("classical", "defended"):
            raise ValueError(f"unknown victim kind {self.victim_kind!r}")
        if self.knowledge == "gray-box" and self.surrogate_arch != self.victim_arch:
            raise ValueError(
                f"gray-box surrogate architecture {self.surrogate_arch!r} must equal "
                f"victim architecture {self.victim_arch!r}")
        if self.victim_kind == "defended" and self.key_seed is None:
            raise ValueError("defended victim needs key_seed")
        if self.victim_kind == "classical" and self.key_seed is not None:
            raise ValueError("classical victim carries no key seed")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


@dataclass
class EvalCell:
    dataset: str
    attack: str                  # row name: cw-l2 | cw-l0 | cw-linf | fgsm
    victim: str                  # classical | defended
    knowledge: str
    surrogate_arch: str
    victim_arch: str
    clean_error_pct: float
    attacked_error_pct: float
    n_clean: int
    n_attacked: int
    attack_success_rate_pct: float
    seeds: dict
    fingerprints: dict
    config_hash: str
    attack_spec: dict
    wall_clock_s: float


@dataclass
class EvalReport:
    preset: str
    scale_note: str
    cells: list[EvalCell] = field(default_factory=list)
    config: dict = field(default_factory=dict)


@dataclass
class HarnessConfig:
    preset: str = "desk"
    train_size: int | None = 8000    # None: canonical 55000
    val_size: int = 1000
    test_size: int = 500
    epochs: dict = field(default_factory=lambda: {"mnist": 3, "fashion-mnist": 3})
    batch_size: int = 128
    arch_map: dict = field(default_factory=lambda: {"fgsm": "cw-arch-small",
                                                    "cw": "cw-arch-small"})
    fgsm_epsilon: float = 0.3
    cw_kappa: float = 0.0
    cw_iterations: int = 100
    cw_c_steps: int = 5
    cw_c_initial: float = 1e-2
    cw_l0_iterations: int | None = None    # default: cw_iterations
    attack_samples: int | None = None      # default: test_size
    chunk_size: int = 100
    master_seed: int = 20240901
    optimizer: str = "adam"
    learning_rate: float = 1e-3

    def epochs_for(self, dataset: str) -> int:
        if isinstance(self.epochs, int):
            return self.epochs
        return self.epochs.get(dataset, next(iter(self.epochs.values())))

    def attack_spec(self, row: str) -> A.AttackSpec:
        if row == "fgsm":
            return A.AttackSpec(family="fgsm", mode="nontargeted",
                                epsilon=self.fgsm_epsilon)
        if row not in ("cw-l2", "cw-l0", "cw-linf"):
            raise ValueError(f"unknown attack row {row!r}")
        norm = row.split("-", 1)[1]
        iters = self.cw_iterations if row != "cw-l0" or self.cw_l0_iterations is None \
            else self.cw_l0_iterations
        return A.AttackSpec(family="cw", norm=norm, mode="targeted",
                            kappa=self.cw_kappa, iterations=iters,
                            c_steps=self.cw_c_steps, c_initial=self.cw_c_initial)

    def arch_for(self, row: str) -> str:
        return self.arch_map["fgsm" if row == "fgsm" else "cw"]

    def to_jsonable(self) -> dict:
        return asdict(self)


def preset_config(name: str) -> HarnessConfig:
    """full: the complete evaluation protocol; desk: scaled-down grid that
    fits a CPU half hour; smoke: synthetic end-to-end structural run."""
    if name == "full":
        return HarnessConfig(
            preset="full", train_size=None, val_size=5000, test_size=1000,
            epochs={"mnist": 10, "fashion-mnist": 20},
            arch_map={"fgsm": "fgsm-arch", "cw": "cw-arch-small"},
            cw_iterations=1000, cw_c_steps=9, cw_c_initial=1e-3,
            cw_l0_iterations=200)
    if name == "desk":
        return HarnessConfig(preset="desk")
    if name == "smoke":
        return HarnessConfig(
            preset="smoke", train_size=360, val_size=40, test_size=60,
            epochs=12, batch_size=32,
            arch_map={"fgsm": "tiny-arch", "cw": "tiny-arch"},
            cw_iterations=60, cw_c_steps=5, chunk_size=60)
    raise ValueError(f"unknown preset {name!r}; known: full, desk, smoke")


@dataclass
class ExperimentData:
    dataset: str
    pool_images: np.ndarray      # train pool with the validation tail at the end
    pool_labels: np.ndarray
    val_size: int
    eval_ds: Dio.LabeledDataset

    def key(self) -> str:
        h = hashlib.sha256()
        h.update(self.pool_images.tobytes())
        h.update(self.pool_labels.tobytes())
        return f"{self.dataset}/{len(self.pool_labels)}/{h.hexdigest()[:12]}"


def load_experiment_data(cfg: HarnessConfig, dataset: str, data_dir=None) -> ExperimentData:
    """Assemble train pool + evaluation head for one dataset name.

    ``synthetic/<kind>`` generates data; anything else loads IDX files and
    slices order-preserving subsets per the config sizes.
    """
    if dataset.startswith("synthetic/"):
        kind = dataset.split("/", 1)[1]
        n_pool = (cfg.train_size or 360) + cfg.val_size
        pool = Dio.synthetic_dataset(derive_seed(cfg.master_seed, _tag("data"), _tag(dataset)),
                                     n_pool + cfg.test_size, kind)
        return ExperimentData(
            dataset=dataset,
            pool_images=pool.images[:n_pool].copy(),
            pool_labels=pool.labels[:n_pool].copy(),
            val_size=cfg.val_size,
            eval_ds=pool.slice(n_pool, n_pool + cfg.test_size, "eval"))
    train = Dio.load_named_dataset(Dio.resolve_data_dir(data_dir), dataset, "train")
    test = Dio.load_named_dataset(Dio.resolve_data_dir(data_dir), dataset, "test")
    if cfg.train_size is None:
        tr = Dio.canonical_split(train, "train")
        va = Dio.canonical_split(train, "val")
        pool_images = np.concatenate([tr.images, va.images])
        pool_labels = np.concatenate([tr.labels, va.labels])
        val_size = len(va)
    else:
        need = cfg.train_size + cfg.val_size
        if len(train) < need:
            raise ValueError(
                f"{dataset} training set has {len(train)} samples, "
                f"need {need} for train+val")
        head = train.slice(0, cfg.train_size, "train-head")
        tail = train.slice(len(train) - cfg.val_size, len(train), "val-tail")
        pool_images = np.concatenate([head.images, tail.images])
        pool_labels = np.concatenate([head.labels, tail.labels])
        val_size = cfg.val_size
    eval_ds = test.slice(0, min(cfg.test_size, len(test)), f"test[0:{cfg.test_size}]")
    return ExperimentData(dataset=dataset, pool_images=pool_images,
                          pool_labels=pool_labels, val_size=val_size,
                          eval_ds=eval_ds)


# -- model construction (cached) ------------------------------------------------

def _train_cfg(cfg: HarnessConfig, exp: ExperimentData, seed: int) -> N.TrainConfig:
    return N.TrainConfig(
        epochs=cfg.epochs_for(exp.dataset), batch_size=cfg.batch_size,
        optimizer=cfg.optimizer, learning_rate=cfg.learning_rate,
        seed=seed, val_size=exp.val_size)


def _get_classical(cfg, exp, arch, cache, log):
    """Undefended network for (dataset, arch); trains on first use.

    The same weights serve as the attacker's gray-box surrogate, so the
    training run happens inside attacker_context: it must never touch key
    material.
    """
    ck = ("model", exp.key(), arch, "classical")
    if ck not in cache:
        seed = derive_seed(cfg.master_seed, _tag("train"), _tag(exp.dataset), _tag(arch))
        net = N.build_network(arch)
        if log:
            log(f"[{exp.dataset}] training classical {arch} "
                f"({len(exp.pool_labels) - exp.val_size} train / {exp.val_size} val, "
                f"{cfg.epochs_for(exp.dataset)} epochs)")
        with Dfc.attacker_context():
            _, history = N.train(net, exp.pool_images, exp.pool_labels,
                                 _train_cfg(cfg, exp, seed))
        cache[ck] = (net, history, seed)
        if log:
            log(f"[{exp.dataset}] classical {arch} val error "
                f"{history[-1].val_error_pct:.2f}%")
    return cache[ck]


def _get_defended(cfg, exp, arch, cache, log):
    """Key-defended classifier for (dataset, arch); trains on permuted data."""
    key_seed = derive_seed(cfg.master_seed, _tag("key"), _tag(exp.dataset))
    ck = ("model", exp.key(), arch, "defended", key_seed)
    if ck not in cache:
        dim = int(np.prod(exp.pool_images.shape[1:]))
        key = Dfc.keygen(key_seed, dim)
        seed = derive_seed(cfg.master_seed, _tag("train"), _tag(exp.dataset),
                           _tag(arch), _tag("defended"))
        net = N.build_network(arch)
        if log:
            log(f"[{exp.dataset}] training defended {arch} (permuted inputs)")
        permuted = Dfc.apply_transform_batch(key, exp.pool_images)
        _, history = N.train(net, permuted, exp.pool_labels,
                             _train_cfg(cfg, exp, seed))
        dc = Dfc.DefendedClassifier(key, net)
        cache[ck] = (dc, history, seed, key_seed)
        if log:
            log(f"[{exp.dataset}] defended {arch} val error "
                f"{history[-1].val_error_pct:.2f}% (on permuted val)")
    return cache[ck]


def _get_adversarial_batch(cfg, exp, spec, surrogate_arch, cache, log):
    """Adversarial examples for (dataset, spec, surrogate); crafted once and
    reused against every victim.  Generation runs inside attacker_context."""
    row = "fgsm" if spec.family == "fgsm" else f"cw-{spec.norm}"
    ck = ("attack", exp.key(), surrogate_arch, row,
          json.dumps(spec.echo(), sort_keys=True))
    if ck not in cache:
        surrogate, _, _ = _get_classical(cfg, exp, surrogate_arch, cache, log)
        n = min(cfg.attack_samples or cfg.test_size, len(exp.eval_ds))
        images = exp.eval_ds.images[:n]
        labels = exp.eval_ds.labels[:n]
        target_seed = derive_seed(cfg.master_seed, _tag("targets"),
                                  _tag(exp.dataset), _tag(row))
        if log:
            log(f"[{exp.dataset}] crafting {row} on {surrogate_arch} surrogate, n={n}")
        t0 = time.time()
        with Dfc.attacker_context():
            if spec.family == "fgsm":
                results = A.fgsm_batch(surrogate, images, labels, spec)
            else:
                targets = A.pick_targets(labels, surrogate.num_classes, target_seed)
                results = A.cw_attack_batch(surrogate, images, targets, spec,
                                            true_labels=labels,
                                            chunk_size=cfg.chunk_size)
        adv = np.stack([r.adversarial_input for r in results])
        success = np.array([r.success for r in results])
        if log:
            log(f"[{exp.dataset}] {row}: surrogate success "
                f"{100.0 * success.mean():.1f}% in {time.time() - t0:.0f}s")
        cache[ck] = (adv, labels, success, target_seed, spec)
    return cache[ck]


def run_transfer_attack(scenario: ThreatScenario, exp: ExperimentData,
                        cfg: HarnessConfig, cache: dict | None = None,
                        log=None) -> EvalCell:
    """Execute one scenario cell: surrogate attack crafted undefended,
    evaluated on the scenario's victim."""
    cache = cache if cache is not None else {}
    t0 = time.time()
    row = ("fgsm" if scenario.attack.family == "fgsm"
           else f"cw-{scenario.attack.norm}")

    if scenario.victim_kind == "classical":
        victim_net, _, victim_seed = _get_classical(cfg, exp, scenario.victim_arch,
                                                    cache, log)
        predict = victim_net.decode_batch
        fingerprints = {"victim": victim_net.fingerprint()}
        key_seed = None
    else:
        dc, _, victim_seed, key_seed = _get_defended(cfg, exp, scenario.victim_arch,
                                                     cache, log)
        predict = dc.classify_batch
        fingerprints = {
            "victim": dc.net.fingerprint(),
            "key": hashlib.sha256(Dfc.save_key_bytes(dc.key)).hexdigest()[:16],
        }

    adv, labels, success, target_seed, spec = _get_adversarial_batch(
        cfg, exp, scenario.attack, scenario.surrogate_arch, cache, log)
    surrogate, _, surrogate_seed = _get_classical(cfg, exp, scenario.surrogate_arch,
                                                  cache, log)
    fingerprints["surrogate"] = surrogate.fingerprint()

    n_att = min(scenario.sample_count, adv.shape[0])
    clean = classification_error(predict, exp.eval_ds)
    attacked = 100.0 * float((np.asarray(predict(adv[:n_att])) != labels[:n_att]).mean())

    scen_echo = {
        "dataset": exp.dataset, "row": row, "victim": scenario.victim_kind,
        "knowledge": scenario.knowledge, "surrogate_arch": scenario.surrogate_arch,
        "victim_arch": scenario.victim_arch, "spec": spec.echo(),
        "preset": cfg.preset, "train_size": len(exp.pool_labels) - exp.val_size,
        "val_size": exp.val_size, "test_size": len(exp.eval_ds),
    }
    config_hash = hashlib.sha256(
        json.dumps(scen_echo, sort_keys=True).encode()).hexdigest()[:12]

    return EvalCell(
        dataset=exp.dataset, attack=row, victim=scenario.victim_kind,
        knowledge=scenario.knowledge, surrogate_arch=scenario.surrogate_arch,
        victim_arch=scenario.victim_arch,
        clean_error_pct=clean, attacked_error_pct=attacked,
        n_clean=len(exp.eval_ds), n_attacked=n_att,
        attack_success_rate_pct=100.0 * float(success[:n_att].mean()),
        seeds={"master": cfg.master_seed, "model": victim_seed,
               "surrogate": surrogate_seed, "targets": target_seed,
               "key": key_seed},
        fingerprints=fingerprints, config_hash=config_hash,
        attack_spec=spec.echo(), wall_clock_s=time.time() - t0)


def evaluate_defence_grid(cfg: HarnessConfig, datasets=("mnist",), rows=ROW_ORDER,
                          data_dir=None, log=None) -> EvalReport:
    """Run the grid datasets x rows x {classical, defended} under gray-box
    transfer.  Missing dataset files raise FileNotFoundError with the
    expected paths; synthetic/<kind> dataset names never need files."""
    scale = ("full protocol" if cfg.train_size is None else
             f"scaled: train {cfg.train_size} / val {cfg.val_size} / "
             f"test {cfg.test_size}")
    report = EvalReport(preset=cfg.preset, scale_note=scale,
                        config=cfg.to_jsonable())
    cache: dict = {}
    for dataset in datasets:
        exp = load_experiment_data(cfg, dataset, data_dir)
        for row in rows:
            n = min(cfg.attack_samples or cfg.test_size, len(exp.eval_ds))
            arch = cfg.arch_for(row)
            key_seed = derive_seed(cfg.master_seed, _tag("key"), _tag(exp.dataset))
            for victim_kind in ("classical", "defended"):
                scenario = ThreatScenario(
                    knowledge="gray-box", surrogate_arch=arch, victim_arch=arch,
                    victim_kind=victim_kind, attack=cfg.attack_spec(row),
                    dataset=dataset, sample_count=n,
                    key_seed=key_seed if victim_kind == "defended" else None)
                cell = run_transfer_attack(scenario, exp, cfg, cache, log)
                report.cells.append(cell)
                if log:
                    log(f"[{dataset}] {row} {victim_kind}: clean "
                        f"{cell.clean_error_pct:.2f}% attacked "
                        f"{cell.attacked_error_pct:.2f}% "
                        f"({cell.wall_clock_s:.0f}s)")
    return report


# -- report emission ------------------------------------------------------------

def report_text(report: EvalReport) -> str:
    """Aligned grid, one attack row per line, classical and defended columns."""
    lines = [
        f"Classification error (%) -- preset {report.preset} ({report.scale_note})",
    ]
    by = {}
    for c in report.cells:
        by.setdefault((c.dataset, c.attack), {})[c.victim] = c
    datasets = list(dict.fromkeys(c.dataset for c in report.cells))
    for dataset in datasets:
        sample = next(c for c in report.cells if c.dataset == dataset)
        lines.append("")
        lines.append(f"{dataset} (clean n={sample.n_clean}, attacked n={sample.n_attacked})")
        lines.append(f"  {'attack':<8}  {'classical':>20}  {'defended':>20}")
        lines.append(f"  {'':<8}  {'clean':>9} {'attacked':>10}  {'clean':>9} {'attacked':>10}")
        for row in ROW_ORDER:
            cells = by.get((dataset, row))
            if not cells:
                continue
            cl = cells.get("classical")
            df = cells.get("defended")
            def fmt(cell, attr):
                return f"{getattr(cell, attr):9.2f}" if cell else f"{'-':>9}"
            lines.append(
                f"  {row:<8}  {fmt(cl, 'clean_error_pct')} "
                f"{fmt(cl, 'attacked_error_pct'):>10}  {fmt(df, 'clean_error_pct')} "
                f"{fmt(df, 'attacked_error_pct'):>10}")
    lines.append("")
    for c in report.cells:
        fp = ", ".join(f"{k}={v}" for k, v in sorted(c.fingerprints.items()))
        lines.append(
            f"# {c.dataset}/{c.attack}/{c.victim}: config {c.config_hash}, "
            f"seeds {json.dumps(c.seeds, sort_keys=True)}, {fp}, "
            f"{c.wall_clock_s:.1f}s")
    return "\n".join(lines) + "\n"


def report_json(report: EvalReport) -> str:
    payload = {
        "preset": report.preset,
        "scale_note": report.scale_note,
        "config": report.config,
        "cells": [asdict(c) for c in report.cells],
    }
    return json.dumps(payload, indent=2, sort_keys=True, default=float)


def report_invariant_failures(report: EvalReport, *, clean_cost_bound: float = 5.0,
                              gap_points: float | None = None) -> list[str]:
    """Check the defence-ordering and clean-cost properties on a completed
    grid; returns human-readable failures (empty list = all hold)."""
    failures = []
    by = {}
    for c in report.cells:
        if not (0.0 <= c.clean_error_pct <= 100.0 and
                0.0 <= c.attacked_error_pct <= 100.0):
            failures.append(f"{c.dataset}/{c.attack}/{c.victim}: error out of [0,100]")
        if c.n_clean < 1 or c.n_attacked < 1:
            failures.append(f"{c.dataset}/{c.attack}/{c.victim}: missing sample count")
        by.setdefault((c.dataset, c.attack), {})[c.victim] = c
    for (dataset, row), cells in sorted(by.items()):
        cl, df = cells.get("classical"), cells.get("defended")
        if cl is None or df is None:
            failures.append(f"{dataset}/{row}: incomplete victim pair")
            continue
        if not df.attacked_error_pct < cl.attacked_error_pct:
            failures.append(
                f"{dataset}/{row}: defended attacked error {df.attacked_error_pct:.2f}% "
                f"not below classical {cl.attacked_error_pct:.2f}%")
        cost = df.clean_error_pct - cl.clean_error_pct
        if cost > clean_cost_bound:
            failures.append(
                f"{dataset}/{row}: clean-accuracy cost {cost:.2f} points exceeds "
                f"{clean_cost_bound}")
        if gap_points is not None:
            gap = cl.attacked_error_pct - df.attacked_error_pct
            if gap < gap_points:
                failures.append(
                    f"{dataset}/{row}: defended-vs-classical gap {gap:.2f} points "
                    f"below {gap_points}")
    return failures
