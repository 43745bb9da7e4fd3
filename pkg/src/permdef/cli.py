"""Command-line front end: keygen, train, attack, evaluate, report.

The config-driven subcommands (train / attack / evaluate) read an INI file
with these sections (all keys lowercase; flags override file values; the
only environment variable consulted is the dataset-directory fallback
PERMDEF_DATA_DIR):

  [run]       dataset, data_dir, out_dir, seed
  [train]     arch, epochs, batch_size, optimizer, learning_rate, momentum,
              train_size, val_size, defended
  [victim]    key_file                      (victim-side material only)
  [attack]    model, family, norm, mode, epsilon, kappa, iterations,
              learning_rate, c_initial, c_steps, c_max, abort_early,
              samples, chunk_size
  [evaluate]  preset, datasets, rows, arch, gap_points, and any scalar
              harness knob (train_size, epochs, cw_iterations, ...)

The [victim] and [attack] sections must not share keys, and [attack] can
never reference key material; the attacker-side commands run with the
defence operations fenced off and work with the key file unreadable.

Output files are content-addressed: the name carries a hash of the resolved
config (plus input-file fingerprints), so artifacts from different configs
cannot be mixed up silently.  Artifact bytes are deterministic given the
config and seed; wall-clock timings and timestamps go to a .log sidecar.

Exit codes: 0 ok, 2 config error, 3 IO error, 4 invariant failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attacks as A
from . import data as Dio
from . import defence as Dfc
from . import harness as H
from . import network as N
from .rng import derive_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4

_SECTIONS = ("run", "train", "victim", "attack", "evaluate")


class ConfigError(ValueError):
    """Bad config file, flag, or value combination."""


def _tag(s: str) -> int:
    return zlib.crc32(s.encode())


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- config loading -------------------------------------------------------------

@dataclass
class RunConfig:
    subcommand: str
    dataset: str | None
    data_dir: str | None
    out_dir: Path
    seed: int
    sections: dict                   # {section: {key: str}} after overrides

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})


def _read_config(path) -> dict:
    import configparser

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def _apply_override(sections: dict, item: str) -> None:
    head, eq, value = item.partition("=")
    sec, dot, key = head.partition(".")
    if not eq or not dot or not sec or not key:
        raise ConfigError(f"override {item!r} is not SECTION.KEY=VALUE")
    sections.setdefault(sec.strip(), {})[key.strip().lower()] = value.strip()


def _validate_sections(sections: dict) -> None:
    unknown = [s for s in sections if s not in _SECTIONS]
    if unknown:
        raise ConfigError(
            f"unknown config section(s) {sorted(unknown)}; known: {list(_SECTIONS)}")
    shared = set(sections.get("victim", {})) & set(sections.get("attack", {}))
    if shared:
        raise ConfigError(
            f"[victim] and [attack] must not share keys, both define: {sorted(shared)}")
    keyish = [k for k in sections.get("attack", {}) if "key" in k]
    if keyish:
        raise ConfigError(
            f"the [attack] section cannot reference key material, found: {sorted(keyish)}")


def load_run_config(args) -> RunConfig:
    sections = _read_config(args.config)
    for item in args.overrides:
        _apply_override(sections, item)
    run = sections.setdefault("run", {})
    # dedicated flags are shorthand for [run] overrides
    if args.dataset:
        run["dataset"] = args.dataset
    if args.data_dir:
        run["data_dir"] = args.data_dir
    if args.out_dir:
        run["out_dir"] = args.out_dir
    if args.seed is not None:
        run["seed"] = str(args.seed)
    _validate_sections(sections)
    return RunConfig(
        subcommand=args.command,
        dataset=run.get("dataset"),
        data_dir=run.get("data_dir"),
        out_dir=Path(run.get("out_dir", "runs")),
        seed=_as_int(run, "run", "seed", 20240901),
        sections=sections)


def _as_int(sec: dict, name: str, key: str, default=None):
    if key not in sec:
        return default
    try:
        return int(sec[key])
    except ValueError:
        raise ConfigError(f"[{name}] {key} = {sec[key]!r} is not an integer") from None


def _as_float(sec: dict, name: str, key: str, default=None):
    if key not in sec:
        return default
    try:
        return float(sec[key])
    except ValueError:
        raise ConfigError(f"[{name}] {key} = {sec[key]!r} is not a number") from None


def _as_bool(sec: dict, name: str, key: str, default=False):
    if key not in sec:
        return default
    v = sec[key].strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{name}] {key} = {sec[key]!r} is not a boolean")


def _require(value, message: str):
    if value is None or value == "":
        raise ConfigError(message)
    return value


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sidecar(path: Path, lines: list[str]) -> None:
    stamp = time.strftime("%Y-%m-%d %H:%M:%S")
    path.write_text(f"# written {stamp}\n" + "\n".join(lines) + "\n")


# -- data plumbing shared by train and attack -------------------------------------

def _experiment(run: RunConfig, test_size: int) -> H.ExperimentData:
    tr = run.section("train")
    dataset = _require(run.dataset, "need [run] dataset (or --dataset)")
    hcfg = H.HarnessConfig(
        preset="cli",
        train_size=_as_int(tr, "train", "train_size", 360),
        val_size=_as_int(tr, "train", "val_size", 40),
        test_size=test_size,
        master_seed=run.seed)
    return H.load_experiment_data(hcfg, dataset, run.data_dir)


# -- subcommands ------------------------------------------------------------------

def cmd_keygen(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        print(f"refusing to overwrite {out}; pass --force to replace it",
              file=sys.stderr)
        return EXIT_IO
    if args.dim < 2:
        raise ConfigError(f"--dim must be >= 2, got {args.dim}")
    key = Dfc.keygen(args.seed, args.dim)
    out.parent.mkdir(parents=True, exist_ok=True)
    Dfc.save_key(key, out)
    digest = hashlib.sha256(Dfc.save_key_bytes(key)).hexdigest()[:16]
    print(f"key: {out}")
    print(f"seed {args.seed}  dim {args.dim}  fingerprint {digest}")
    return EXIT_OK


def cmd_train(run: RunConfig) -> int:
    tr = run.section("train")
    arch = _require(tr.get("arch"),
                    f"need [train] arch, one of {list(N.ARCH_TAGS)}")
    defended = _as_bool(tr, "train", "defended", False)
    tcfg_kwargs = dict(
        epochs=_as_int(tr, "train", "epochs", 3),
        batch_size=_as_int(tr, "train", "batch_size", 64),
        optimizer=tr.get("optimizer", "adam"),
        learning_rate=_as_float(tr, "train", "learning_rate", 1e-3),
        momentum=_as_float(tr, "train", "momentum", 0.9))

    exp = _experiment(run, test_size=2)
    images, labels = exp.pool_images, exp.pool_labels

    key_id = None
    if defended:
        key_file = _require(
            run.section("victim").get("key_file"),
            "defended training needs [victim] key_file; create one with "
            "`permdef keygen`")
        key = Dfc.load_key(key_file)
        images = Dfc.apply_transform_batch(key, images)
        key_id = {"seed": key.seed, "dim": key.dim}

    kind = "defended" if defended else "classical"
    model_seed = derive_seed(run.seed, _tag("train"), _tag(exp.dataset),
                             _tag(arch), _tag(kind))
    payload = {"command": "train", "dataset": exp.dataset, "arch": arch,
               "seed": run.seed, "kind": kind, "key": key_id,
               "data": exp.key(), **tcfg_kwargs}
    stem = f"model-{_config_hash(payload)}"

    net = N.build_network(arch, input_shape=images.shape[1:])
    tcfg = N.TrainConfig(seed=model_seed, val_size=exp.val_size, **tcfg_kwargs)
    _log(f"training {kind} {arch} on {exp.dataset} "
         f"({len(labels) - exp.val_size} train / {exp.val_size} val, "
         f"{tcfg.epochs} epochs)")

    def epoch_log(st):
        ve = f"  val {st.val_error_pct:.2f}%" if st.val_error_pct is not None else ""
        _log(f"epoch {st.epoch:>3}  loss {st.train_loss:.4f}  "
             f"train {st.train_error_pct:.2f}%{ve}")

    t0 = time.time()
    net, history = N.train(net, images, labels, tcfg, log=epoch_log)

    run.out_dir.mkdir(parents=True, exist_ok=True)
    model_path = run.out_dir / f"{stem}.pclk"
    N.save_model_file(net, model_path)
    _sidecar(run.out_dir / f"{stem}.log",
             [f"# {json.dumps(payload, sort_keys=True, default=str)}",
              f"# wall clock {time.time() - t0:.1f}s",
              N.history_text(history).rstrip()])

    last = history[-1]
    print(f"model: {model_path}")
    print(f"fingerprint: {net.fingerprint()}")
    ve = f"{last.val_error_pct:.2f}%" if last.val_error_pct is not None else "-"
    print(f"final train error {last.train_error_pct:.2f}%  val error {ve}")
    return EXIT_OK


def cmd_attack(run: RunConfig) -> int:
    at = run.section("attack")
    model_path = _require(
        at.get("model"),
        "need [attack] model = path to a surrogate model file "
        "(produce one with `permdef train`)")
    if not Path(model_path).is_file():
        raise FileNotFoundError(
            f"surrogate model {model_path} not found; produce it with `permdef train`")
    try:
        spec = A.AttackSpec(
            family=at.get("family", "fgsm"),
            norm=at.get("norm", "l2"),
            mode=at.get("mode", "nontargeted"),
            epsilon=_as_float(at, "attack", "epsilon", 0.3),
            kappa=_as_float(at, "attack", "kappa", 0.0),
            c_initial=_as_float(at, "attack", "c_initial", 1e-3),
            c_max=_as_float(at, "attack", "c_max", 1e10),
            c_steps=_as_int(at, "attack", "c_steps", 9),
            iterations=_as_int(at, "attack", "iterations", 1000),
            learning_rate=_as_float(at, "attack", "learning_rate", 1e-2),
            abort_early=_as_bool(at, "attack", "abort_early", True))
    except ValueError as exc:
        raise ConfigError(f"bad attack spec: {exc}") from None
    samples = _as_int(at, "attack", "samples", 100)
    chunk = _as_int(at, "attack", "chunk_size", 100)

    net = N.load_model_file(model_path)
    exp = _experiment(run, test_size=samples)
    n = min(samples, len(exp.eval_ds))
    images = exp.eval_ds.images[:n]
    labels = exp.eval_ds.labels[:n]
    target_seed = derive_seed(run.seed, _tag("targets"), _tag(exp.dataset),
                              _tag(spec.family), _tag(spec.norm))

    _log(f"{spec.family} {spec.norm if spec.family == 'cw' else ''} "
         f"{spec.mode} on {n} samples of {exp.dataset}")
    t0 = time.time()
    with Dfc.attacker_context():
        if spec.family == "fgsm":
            sent = A.pick_targets(labels, net.num_classes, target_seed) \
                if spec.mode == "targeted" else labels
            results = A.fgsm_batch(net, images, sent, spec)
        elif spec.mode == "targeted":
            targets = A.pick_targets(labels, net.num_classes, target_seed)
            results = A.cw_attack_batch(net, images, targets, spec,
                                        true_labels=labels, chunk_size=chunk)
        else:
            results = []
            for i in range(n):
                r = A.cw_attack(net, images[i], int(labels[i]), spec)
                r.original_index = i
                results.append(r)

    payload = {"command": "attack", "dataset": exp.dataset, "seed": run.seed,
               "samples": n, "spec": spec.echo(), "data": exp.key(),
               "model": net.fingerprint()}
    run.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = run.out_dir / f"adv-{_config_hash(payload)}.padv"
    A.save_adversarial_batch_file(out_path, results, spec)
    _sidecar(out_path.with_suffix(".log"),
             [f"# {json.dumps(payload, sort_keys=True, default=str)}",
              f"# wall clock {time.time() - t0:.1f}s"])

    wins = [r for r in results if r.success]
    print(f"batch: {out_path}")
    print(f"success rate: {100.0 * len(wins) / n:.1f}%  ({len(wins)}/{n})")
    if wins:
        means = np.array([r.distortion_norms for r in wins]).mean(axis=0)
        print(f"mean distortion over successes: "
              f"l0 {means[0]:.1f}  l2 {means[1]:.4f}  linf {means[2]:.4f}")
    else:
        print("mean distortion over successes: n/a (no successes)")
    return EXIT_OK


_EVAL_INTS = ("train_size", "val_size", "test_size", "batch_size", "epochs",
              "cw_iterations", "cw_c_steps", "cw_l0_iterations",
              "attack_samples", "chunk_size")
_EVAL_FLOATS = ("fgsm_epsilon", "cw_kappa", "cw_c_initial", "learning_rate")


def cmd_evaluate(run: RunConfig) -> int:
    ev = run.section("evaluate")
    try:
        hcfg = H.preset_config(ev.get("preset", "desk"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    hcfg.master_seed = run.seed
    for key in _EVAL_INTS:
        if key in ev:
            setattr(hcfg, key, _as_int(ev, "evaluate", key))
    for key in _EVAL_FLOATS:
        if key in ev:
            setattr(hcfg, key, _as_float(ev, "evaluate", key))
    if "arch" in ev:
        if ev["arch"] not in N.ARCH_TAGS:
            raise ConfigError(f"[evaluate] arch must be one of {list(N.ARCH_TAGS)}")
        hcfg.arch_map = {"fgsm": ev["arch"], "cw": ev["arch"]}

    datasets = tuple(s.strip() for s in
                     ev.get("datasets", run.dataset or "").split(",") if s.strip())
    if not datasets:
        raise ConfigError("need [evaluate] datasets or [run] dataset")
    rows = tuple(s.strip() for s in
                 ev.get("rows", ",".join(H.ROW_ORDER)).split(",") if s.strip())
    bad = [r for r in rows if r not in H.ROW_ORDER]
    if bad:
        raise ConfigError(f"unknown attack row(s) {bad}; known: {list(H.ROW_ORDER)}")

    t0 = time.time()
    report = H.evaluate_defence_grid(hcfg, datasets, rows, data_dir=run.data_dir,
                                log=_log)
    failures = H.report_invariant_failures(
        report, gap_points=_as_float(ev, "evaluate", "gap_points", None))

    payload = {"command": "evaluate", "datasets": datasets, "rows": rows,
               "config": hcfg.to_jsonable()}
    stem = f"report-{_config_hash(payload)}"
    # artifacts must be byte-identical across reruns: timings go to the sidecar
    frozen = replace(report,
                     cells=[replace(c, wall_clock_s=0.0) for c in report.cells])
    run.out_dir.mkdir(parents=True, exist_ok=True)
    (run.out_dir / f"{stem}.json").write_text(H.report_json(frozen))
    (run.out_dir / f"{stem}.txt").write_text(H.report_text(frozen))
    _sidecar(run.out_dir / f"{stem}.log",
             [f"# {json.dumps(payload, sort_keys=True, default=str)}",
              f"# wall clock {time.time() - t0:.1f}s"]
             + [f"{c.dataset}/{c.attack}/{c.victim}: {c.wall_clock_s:.1f}s"
                for c in report.cells])

    print(H.report_text(report))
    print(f"report: {run.out_dir / stem}.json")
    if failures:
        for f in failures:
            print(f"invariant failure: {f}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise FileNotFoundError(f"report file {path} not found")
    try:
        payload = json.loads(path.read_text())
        report = H.EvalReport(
            preset=payload["preset"], scale_note=payload["scale_note"],
            cells=[H.EvalCell(**c) for c in payload["cells"]],
            config=payload.get("config", {}))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path} is not an evaluation report: {exc}") from None
    text = H.report_text(report)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="permdef",
        description="secret-permutation defence lab: keys, training, attacks, "
                    "transfer evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    kg = sub.add_parser("keygen", help="generate a secret permutation key file")
    kg.add_argument("--seed", type=int, required=True)
    kg.add_argument("--dim", type=int, default=784,
                    help="values permuted per sample (default 784)")
    kg.add_argument("--out", required=True)
    kg.add_argument("--force", action="store_true",
                    help="overwrite an existing key file")
    kg.set_defaults(func=cmd_keygen, config_driven=False)

    for name, fn, blurb in (
            ("train", cmd_train, "train a classical or defended model"),
            ("attack", cmd_attack, "craft an adversarial batch on a surrogate"),
            ("evaluate", cmd_evaluate, "run the transfer-attack grid")):
        sp = sub.add_parser(name, help=blurb)
        sp.add_argument("--config", required=True, help="INI config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--dataset", help="override [run] dataset")
        sp.add_argument("--data-dir", help="override [run] data_dir")
        sp.add_argument("--out-dir", help="override [run] out_dir")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.set_defaults(func=fn, config_driven=True)

    rp = sub.add_parser("report", help="re-render a saved evaluation report")
    rp.add_argument("input", help="report-*.json produced by evaluate")
    rp.add_argument("--out", help="also write the text grid to this path")
    rp.set_defaults(func=cmd_report, config_driven=False)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        target = load_run_config(args) if args.config_driven else args
        return args.func(target)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Dfc.ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (N.ModelFormatError, Dio.IdxFormatError, A.BatchFormatError,
            Dfc.KeyFormatError) as exc:
        print(f"unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
