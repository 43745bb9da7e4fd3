"""Command-line flows: keygen, config machinery, training, attack batches,
the evaluation grid, and artifact stability."""

import json
import re
import textwrap
from types import SimpleNamespace

import numpy as np
import pytest

from permdef import harness as H
from permdef import network as N
from permdef.attacks import load_adversarial_batch_file
from permdef.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO, EXIT_OK, main
from permdef.defence import load_key

DATASET = "synthetic/striped-digits"


def _ini(path, body):
    path.write_text(textwrap.dedent(body))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One keygen + one classical training run shared by the module."""
    root = tmp_path_factory.mktemp("cliws")
    out = root / "runs"
    cfg = root / "base.ini"
    _ini(cfg, f"""\
        [run]
        dataset = {DATASET}
        out_dir = {out}
        seed = 777

        [train]
        arch = tiny-arch
        epochs = 3
        batch_size = 64
        train_size = 120
        val_size = 20
        """)
    key = root / "key.pkey"
    assert main(["keygen", "--seed", "5", "--dim", "784", "--out", str(key)]) == EXIT_OK
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    (model,) = out.glob("model-*.pclk")
    return SimpleNamespace(root=root, out=out, cfg=cfg, key=key, model=model)


# -- keygen ------------------------------------------------------------------------

def test_keygen_deterministic_and_guarded(tmp_path, capsys):
    a, b = tmp_path / "a.pkey", tmp_path / "b.pkey"
    assert main(["keygen", "--seed", "9", "--dim", "64", "--out", str(a)]) == EXIT_OK
    assert main(["keygen", "--seed", "9", "--dim", "64", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    fp = re.findall(r"fingerprint (\w+)", capsys.readouterr().out)
    assert len(fp) == 2 and fp[0] == fp[1]
    key = load_key(a)
    assert (key.seed, key.dim) == (9, 64)

    assert main(["keygen", "--seed", "1", "--dim", "64", "--out", str(a)]) == EXIT_IO
    assert "refusing to overwrite" in capsys.readouterr().err
    assert load_key(a).seed == 9       # untouched
    assert main(["keygen", "--seed", "1", "--dim", "64", "--out", str(a),
                 "--force"]) == EXIT_OK
    assert load_key(a).seed == 1
    assert main(["keygen", "--seed", "1", "--dim", "1",
                 "--out", str(tmp_path / "c.pkey")]) == EXIT_CONFIG


# -- config machinery -----------------------------------------------------------------

def test_missing_and_broken_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.ini")]) == EXIT_IO
    bad = tmp_path / "bad.ini"
    bad.write_text("not an ini file [[[")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "cannot parse" in capsys.readouterr().err


def test_unknown_section_rejected(tmp_path, capsys):
    cfg = _ini(tmp_path / "c.ini", f"""\
        [run]
        dataset = {DATASET}
        [surprise]
        x = 1
        """)
    assert main(["train", "--config", cfg]) == EXIT_CONFIG
    assert "surprise" in capsys.readouterr().err


def test_victim_attack_sections_must_not_share_keys(tmp_path, capsys):
    cfg = _ini(tmp_path / "c.ini", f"""\
        [run]
        dataset = {DATASET}
        [victim]
        key_file = k.pkey
        [attack]
        key_file = other.pkey
        """)
    assert main(["attack", "--config", cfg]) == EXIT_CONFIG
    assert "must not share" in capsys.readouterr().err


def test_attack_section_rejects_key_material(tmp_path, capsys):
    cfg = _ini(tmp_path / "c.ini", f"""\
        [run]
        dataset = {DATASET}
        [attack]
        model = m.pclk
        key_path = anything
        """)
    assert main(["attack", "--config", cfg]) == EXIT_CONFIG
    assert "key material" in capsys.readouterr().err
    # the guard also applies to values injected via --set
    plain = _ini(tmp_path / "p.ini", f"[run]\ndataset = {DATASET}\n")
    assert main(["attack", "--config", plain,
                 "--set", "attack.keyfile=x"]) == EXIT_CONFIG


def test_override_syntax_and_typing(tmp_path, capsys):
    plain = _ini(tmp_path / "p.ini", f"[run]\ndataset = {DATASET}\n[train]\narch = tiny-arch\n")
    assert main(["train", "--config", plain, "--set", "epochs3"]) == EXIT_CONFIG
    assert "SECTION.KEY=VALUE" in capsys.readouterr().err
    assert main(["train", "--config", plain,
                 "--set", "train.epochs=three"]) == EXIT_CONFIG
    assert "not an integer" in capsys.readouterr().err


# -- train -----------------------------------------------------------------------------

def test_train_writes_model_and_sidecar(ws, capsys):
    assert ws.model.is_file()
    sidecar = ws.model.with_suffix(".log")
    assert sidecar.is_file()
    body = sidecar.read_text()
    assert body.startswith("# written ")
    assert '"command": "train"' in body
    net = N.load_model_file(ws.model)
    assert net.arch == "tiny-arch"


def test_train_deterministic_across_out_dirs(ws, tmp_path, capsys):
    assert main(["train", "--config", str(ws.cfg),
                 "--out-dir", str(tmp_path / "r2")]) == EXIT_OK
    (again,) = (tmp_path / "r2").glob("model-*.pclk")
    assert again.name == ws.model.name
    assert again.read_bytes() == ws.model.read_bytes()


def test_train_requires_arch(tmp_path, capsys):
    cfg = _ini(tmp_path / "c.ini", f"[run]\ndataset = {DATASET}\n")
    assert main(["train", "--config", cfg]) == EXIT_CONFIG
    assert "arch" in capsys.readouterr().err


def test_train_defended_needs_key_file(ws, tmp_path, capsys):
    assert main(["train", "--config", str(ws.cfg),
                 "--set", "train.defended=yes",
                 "--out-dir", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "keygen" in capsys.readouterr().err


def test_train_defended_produces_distinct_model(ws, tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["train", "--config", str(ws.cfg),
                 "--set", "train.defended=yes",
                 "--set", f"victim.key_file={ws.key}",
                 "--out-dir", str(out)]) == EXIT_OK
    (model,) = out.glob("model-*.pclk")
    assert model.name != ws.model.name
    assert N.load_model_file(model).fingerprint() != \
        N.load_model_file(ws.model).fingerprint()


def test_train_defended_rejects_mismatched_key_dim(ws, tmp_path, capsys):
    small = tmp_path / "small.pkey"
    assert main(["keygen", "--seed", "2", "--dim", "100",
                 "--out", str(small)]) == EXIT_OK
    assert main(["train", "--config", str(ws.cfg),
                 "--set", "train.defended=yes",
                 "--set", f"victim.key_file={small}",
                 "--out-dir", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "100" in capsys.readouterr().err


# -- attack ------------------------------------------------------------------------------

def _attack_cfg(ws, tmp_path, *options, model=None):
    lines = ["[run]", f"dataset = {DATASET}", f"out_dir = {tmp_path / 'runs'}",
             "seed = 777", "", "[train]", "train_size = 120", "val_size = 20",
             "", "[attack]", f"model = {model or ws.model}", *options]
    path = tmp_path / "attack.ini"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_attack_requires_model(tmp_path, capsys):
    cfg = _ini(tmp_path / "c.ini", f"[run]\ndataset = {DATASET}\n")
    assert main(["attack", "--config", cfg]) == EXIT_CONFIG
    assert "permdef train" in capsys.readouterr().err


def test_attack_missing_model_file(ws, tmp_path, capsys):
    cfg = _attack_cfg(ws, tmp_path, model="/nonexistent/m.pclk")
    assert main(["attack", "--config", cfg]) == EXIT_IO
    assert "not found" in capsys.readouterr().err


def test_attack_corrupt_model_file(ws, tmp_path, capsys):
    junk = tmp_path / "junk.pclk"
    junk.write_bytes(b"PCLK" + b"\x00" * 40)
    cfg = _attack_cfg(ws, tmp_path, model=junk)
    assert main(["attack", "--config", cfg]) == EXIT_IO
    assert "unreadable artifact" in capsys.readouterr().err


def test_attack_rejects_bad_spec(ws, tmp_path, capsys):
    cfg = _attack_cfg(ws, tmp_path, "family = jpeg")
    assert main(["attack", "--config", cfg]) == EXIT_CONFIG
    assert "bad attack spec" in capsys.readouterr().err


def test_attack_fgsm_batch_round_trip(ws, tmp_path, capsys):
    cfg = _attack_cfg(ws, tmp_path, "family = fgsm", "epsilon = 0.3",
                      "samples = 20")
    assert main(["attack", "--config", cfg]) == EXIT_OK
    out = capsys.readouterr().out
    assert re.search(r"success rate: \d+\.\d% +\(\d+/20\)", out)
    (padv,) = (tmp_path / "runs").glob("adv-*.padv")
    results, spec = load_adversarial_batch_file(padv)
    assert len(results) == 20
    assert spec.family == "fgsm" and spec.epsilon == 0.3
    for r in results:
        assert r.adversarial_input.shape == (1, 28, 28)
        assert np.abs(r.adversarial_input).max() <= 1.0
    assert padv.with_suffix(".log").is_file()


def test_attack_zero_epsilon_reproduces_eval_head(ws, tmp_path, capsys):
    cfg = _attack_cfg(ws, tmp_path, "family = fgsm", "epsilon = 0.0",
                      "samples = 10")
    assert main(["attack", "--config", cfg]) == EXIT_OK
    out = capsys.readouterr().out
    (padv,) = (tmp_path / "runs").glob("adv-*.padv")
    results, _ = load_adversarial_batch_file(padv)
    # rebuild the same evaluation head the command sliced
    hcfg = H.HarnessConfig(preset="cli", train_size=120, val_size=20,
                           test_size=10, master_seed=777)
    exp = H.load_experiment_data(hcfg, DATASET)
    for r in results:
        assert np.array_equal(r.adversarial_input,
                              exp.eval_ds.images[r.original_index])
    # the printed success count equals the surrogate's clean mistakes
    net = N.load_model_file(ws.model)
    wrong = int((net.decode_batch(exp.eval_ds.images[:10])
                 != exp.eval_ds.labels[:10]).sum())
    assert f"({wrong}/10)" in out


def test_attack_cw_targeted_via_cli(ws, tmp_path, capsys):
    cfg = _attack_cfg(ws, tmp_path, "family = cw", "norm = l2",
                      "mode = targeted", "samples = 4", "iterations = 60",
                      "c_steps = 3", "c_initial = 0.1")
    assert main(["attack", "--config", cfg]) == EXIT_OK
    (padv,) = (tmp_path / "runs").glob("adv-*.padv")
    results, spec = load_adversarial_batch_file(padv)
    assert spec.norm == "l2" and spec.iterations == 60
    assert len(results) == 4
    assert any(r.success for r in results)


def test_attack_runs_without_victim_key_material(ws, tmp_path, capsys):
    # the attacker flow must not depend on any key file existing
    cfg = _ini(tmp_path / "attack.ini", f"""\
        [run]
        dataset = {DATASET}
        out_dir = {tmp_path / "runs"}
        seed = 777

        [train]
        train_size = 120
        val_size = 20

        [victim]
        key_file = /nonexistent/secret.pkey

        [attack]
        model = {ws.model}
        family = fgsm
        samples = 5
        """)
    assert main(["attack", "--config", cfg]) == EXIT_OK


# -- evaluate ----------------------------------------------------------------------------

def _eval_cfg(tmp_path, out, *options, rows="fgsm"):
    lines = ["[run]", f"dataset = {DATASET}", f"out_dir = {out}", "seed = 777",
             "", "[evaluate]", "preset = smoke", f"rows = {rows}", *options]
    path = tmp_path / "eval.ini"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_evaluate_writes_stable_artifacts(tmp_path, capsys):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    cfg = _eval_cfg(tmp_path, out1)
    assert main(["evaluate", "--config", cfg]) == EXIT_OK
    text = capsys.readouterr().out
    assert "fgsm" in text and "report: " in text
    (rj,) = out1.glob("report-*.json")
    rt = rj.with_suffix(".txt")
    payload = json.loads(rj.read_text())
    assert len(payload["cells"]) == 2
    assert {c["victim"] for c in payload["cells"]} == {"classical", "defended"}
    assert all(c["wall_clock_s"] == 0.0 for c in payload["cells"])
    assert rj.with_suffix(".log").read_text().startswith("# written ")

    assert main(["evaluate", "--config", cfg, "--out-dir", str(out2)]) == EXIT_OK
    capsys.readouterr()
    assert (out2 / rj.name).read_bytes() == rj.read_bytes()
    assert (out2 / rt.name).read_bytes() == rt.read_bytes()


def test_evaluate_invariant_failure_exit(tmp_path, capsys):
    out = tmp_path / "r"
    cfg = _eval_cfg(tmp_path, out, "gap_points = 200")
    assert main(["evaluate", "--config", cfg]) == EXIT_INVARIANT
    assert "invariant failure" in capsys.readouterr().err
    # artifacts are still written for inspection
    assert list(out.glob("report-*.json"))


def test_evaluate_config_rejections(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["evaluate", "--config",
                 _eval_cfg(tmp_path, out, rows="fgsm,deepfool")]) == EXIT_CONFIG
    assert "deepfool" in capsys.readouterr().err
    assert main(["evaluate", "--config",
                 _ini(tmp_path / "e2.ini",
                      f"[run]\ndataset = {DATASET}\n[evaluate]\npreset = huge\n")
                 ]) == EXIT_CONFIG
    assert main(["evaluate", "--config",
                 _ini(tmp_path / "e3.ini", "[evaluate]\npreset = smoke\n")
                 ]) == EXIT_CONFIG
    assert "datasets" in capsys.readouterr().err
    assert main(["evaluate", "--config",
                 _eval_cfg(tmp_path, out, "arch = resnet")]) == EXIT_CONFIG


# -- report ------------------------------------------------------------------------------

def test_report_rerenders_saved_json(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["evaluate", "--config", _eval_cfg(tmp_path, out)]) == EXIT_OK
    capsys.readouterr()
    (rj,) = out.glob("report-*.json")
    rt = rj.with_suffix(".txt")
    dest = tmp_path / "again.txt"
    assert main(["report", str(rj), "--out", str(dest)]) == EXIT_OK
    assert "fgsm" in capsys.readouterr().out
    assert dest.read_text() == rt.read_text()


def test_report_rejects_non_reports(tmp_path, capsys):
    assert main(["report", str(tmp_path / "missing.json")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text('{"cells": "nope"}')
    assert main(["report", str(bad)]) == EXIT_CONFIG
    assert "not an evaluation report" in capsys.readouterr().err
