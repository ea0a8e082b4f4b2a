import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from sklearn.base import clone

from xdistill import biasdata as bd
from xdistill import harness, nn, serialize
from xdistill.cli import main
from xdistill.estimators import ERMClassifier, ExplanationDistiller
from xdistill.exceptions import ContractError, FormatError
from xdistill.explain import explain

TINY = {"seed": 3, "data": {"n_classes": 3, "counts": [6, 3, 3]},
        "teacher": {"channels": [2], "epochs": 1, "batch_size": 8},
        "student": {"channels": [2], "epochs": 1, "batch_size": 8},
        "distill": {"floor": 7}}


def write_config(tmp_path, **changes):
    doc = json.loads(json.dumps(TINY))
    for k, v in changes.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def cli(*argv, capsys=None):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr() if capsys else ("", "")
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data, train-teacher and distill once on a tiny config."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root)
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train-teacher", "--config", cfg, "--dataset", str(root / "data"),
                 "--out", str(root / "teacher")]) == 0
    assert main(["distill", "--config", cfg, "--dataset", str(root / "data"), "--method", "lrp",
                 "--teacher", str(root / "teacher" / "checkpoint"), "--out", str(root / "student")]) == 0
    return root, cfg


# -- configuration ----------------------------------------------------------------

def test_config_defaults():
    cfg = harness.load_config()
    assert cfg.teacher.momentum == 0.9 and cfg.teacher.clip_norm == 1.0
    assert cfg.distill_config().p_top == 0.5 and cfg.distill_config().seed == 1
    assert cfg.data.kind == "foreground-color" and cfg.data.n_classes == 10


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"teacher": {"lr_typo": 1}}, {"distill": {"nope": 1}},
                                 {"teacher": {"epochs": -1}}, {"student": {"lr": 0}}, {"eval_every": 0}])
def test_config_rejects_bad_documents(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ContractError):
        harness.load_config(p)


def test_bad_json_is_a_format_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(FormatError):
        harness.load_config(p)


def test_overrides_apply(tmp_path):
    cfg = harness.load_config(write_config(tmp_path), seed=9, method="gradcam", out="x")
    assert cfg.seed == 9 and cfg.out == "x" and cfg.distill_config().method == "gradcam"
    assert cfg.distill_config().floor == 7


# -- gen-data ---------------------------------------------------------------------

def test_gen_data_default_layout(tmp_path, capsys):
    code, out, _ = cli("gen-data", "--config", write_config(tmp_path, data={"n_classes": 10}),
                       "--out", tmp_path / "d", capsys=capsys)
    assert code == 0 and json.loads(out)["command"] == "gen-data"
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["n_classes"] == 10 and set(manifest["splits"]) == set(bd.SPLITS)


def test_gen_data_is_byte_identical_per_seed(tmp_path):
    cfg = write_config(tmp_path)
    for name in ("a", "b"):
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fixed_point_shift_exits_with_contract_error(tmp_path, capsys):
    cfg = write_config(tmp_path, data={"shift": [0, 2, 1]})
    code, _, err = cli("gen-data", "--config", cfg, "--out", tmp_path / "d", capsys=capsys)
    assert code == 3
    assert json.loads(err) == {"error": "ContractError", "message": "shift permutation has a fixed point",
                               "command": "gen-data"}


def test_usage_error_exit_code(capsys):
    code, _, err = cli("distill", "--method", "magic", capsys=capsys)
    assert code == 2 and json.loads(err)["error"] == "UsageError"


def test_missing_paths_are_reported(tmp_path, capsys):
    code, _, err = cli("eval", "--model", tmp_path / "nope", "--dataset", tmp_path, capsys=capsys)
    assert code == 3 and "does not exist" in json.loads(err)["message"]


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "xdistill", "eval", "--model", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert r.returncode == 3 and json.loads(r.stderr.strip().splitlines()[-1])["command"] == "eval"


# -- teacher, distill, eval -------------------------------------------------------

def test_zero_epoch_teacher_is_the_initialization(tmp_path):
    cfg = write_config(tmp_path, teacher={"epochs": 0})
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")])
    assert main(["train-teacher", "--config", cfg, "--dataset", str(tmp_path / "d"),
                 "--out", str(tmp_path / "t")]) == 0
    net = nn.load_network(tmp_path / "t" / "checkpoint")
    init = harness.load_config(cfg).teacher.network((3, 28, 28), 3, seed=3)
    for k, v in init.state_dict().items():
        assert net.state_dict()[k].tobytes() == v.tobytes()


def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    for stage in ("teacher", "student"):
        d = root / stage
        assert (d / "metrics.json").exists() and (d / "metrics.csv").exists()
        assert (d / "train_log.jsonl").read_text().strip()
        m = json.loads((d / "metrics.json").read_text())
        assert m["gap_ood"] == m["iid"] - m["ood"] and m["gap_shift"] == m["iid"] - m["shift"]
        assert m["checkpoint"].startswith("epoch-")
    student = nn.load_network(root / "student" / "checkpoint")
    teacher = nn.load_network(root / "teacher" / "checkpoint")
    assert student.last_layer.frozen
    assert student.last_layer.weight.data.tobytes() == teacher.last_layer.weight.data.tobytes()


def test_eval_matches_recount_oracle(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    code, out, _ = cli("eval", "--config", cfg, "--model", root / "teacher" / "checkpoint",
                       "--dataset", root / "data", "--out", tmp_path, capsys=capsys)
    assert code == 0
    metrics = json.loads(out)["metrics"]
    net = nn.load_network(root / "teacher" / "checkpoint")
    for short, split in harness.SPLIT_KEYS.items():
        x = serialize.load(root / "data" / split / "images.xtsr")
        y = serialize.load(root / "data" / split / "labels.xtsr")
        assert metrics[short] == 100.0 * np.mean(net.predict_logits(x).argmax(1) == y)
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "split,accuracy,gap" and len(rows) == 4


def indicator_dataset(C, n_per_class=4):
    labels = np.repeat(np.arange(C), n_per_class)
    x = np.eye(C, dtype=np.float32)[labels].reshape(-1, 1, 1, C)
    spec = bd.BiasSpec(n_classes=C)
    ds = bd.BiasedDataset("foreground-color", C, (1, 1, C), spec)
    for name in bd.SPLITS:
        ds.splits[name] = bd.Split(x, labels, labels, np.arange(len(labels)))
    return ds


def linear_net(weight, bias):
    C = len(bias)
    dense = nn.Dense(C, C)
    dense.weight.data, dense.bias.data = weight.astype(np.float32), bias.astype(np.float32)
    return nn.Network([nn.Flatten(), dense], (1, 1, C), C)


def test_perfect_and_constant_predictors():
    ds = indicator_dataset(10)
    perfect = harness.evaluate(linear_net(np.eye(10), np.zeros(10)), ds)
    assert (perfect.iid, perfect.ood, perfect.shift, perfect.gap_ood, perfect.gap_shift) == (100, 100, 100, 0, 0)
    const = harness.evaluate(linear_net(np.zeros((10, 10)), np.eye(10)[0]), ds)
    assert (const.iid, const.ood, const.shift) == (10, 10, 10)


def test_eval_rejects_class_mismatch():
    with pytest.raises(ContractError):
        harness.evaluate(linear_net(np.eye(4), np.zeros(4)), indicator_dataset(3))


def test_metrics_report_bounds():
    with pytest.raises(ContractError):
        harness.MetricsReport.from_accuracies(101.0, 50.0, 50.0)
    r = harness.MetricsReport.from_accuracies(90.0, 70.5, 12.25)
    assert r.gap_ood == 19.5 and r.gap_shift == 77.75


# -- explain ----------------------------------------------------------------------

def test_explain_writes_heatmaps_and_sidecars(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    code, out, _ = cli("explain", "--config", cfg, "--model", root / "teacher" / "checkpoint",
                       "--dataset", root / "data", "--method", "lrp", "--samples", 0, 2,
                       "--out", tmp_path, capsys=capsys)
    assert code == 0
    heatmaps = json.loads(out)["heatmaps"]
    assert len(heatmaps) == 2
    net = nn.load_network(root / "teacher" / "checkpoint")
    x = serialize.load(root / "data" / "test-iid" / "images.xtsr")[[0, 2]]
    k = net.predict_logits(x).argmax(1)
    direct = explain(net, x, k, "lrp", create_graph=False).numpy()
    for i, h in enumerate(heatmaps):
        assert h["class"] == k[i] and h["method"] == "lrp"
        assert (tmp_path / h["image"]).exists()
        raw = serialize.load(tmp_path / h["raw"])
        assert raw.tobytes() == direct[i].tobytes()
        assert h["min"] == float(raw.min()) and h["max"] == float(raw.max())


def test_explain_rejects_out_of_range_class(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    code, _, err = cli("explain", "--config", cfg, "--model", root / "teacher" / "checkpoint",
                       "--dataset", root / "data", "--class", 3, "--out", tmp_path, capsys=capsys)
    assert code == 3 and "class" in json.loads(err)["message"]


# -- scikit-learn wrappers --------------------------------------------------------

def test_estimators_follow_sklearn_conventions():
    est = ERMClassifier(channels=(2,), epochs=1, lr=0.05, seed=4)
    params = est.get_params()
    assert params["lr"] == 0.05 and params["channels"] == (2,)
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    d = ExplanationDistiller(method="gradcam", floor=4)
    assert clone(d).get_params()["method"] == "gradcam"


def test_erm_classifier_fit_predict(rng):
    ds = indicator_dataset(3, 10)
    X = np.tile(ds["train"].images, (1, 1, 4, 1)).reshape(-1, 1, 4, 3)
    y = ds["train"].labels
    est = ERMClassifier(channels=(2,), epochs=2, batch_size=10, seed=0).fit(X, y, X, y)
    assert est.predict(X).shape == (30,) and np.allclose(est.predict_proba(X).sum(1), 1, atol=1e-5)
    assert list(est.classes_) == [0, 1, 2]


def test_student_initialized_from_teacher(pipeline, tmp_path):
    root, cfg = pipeline
    teacher = nn.load_network(root / "teacher" / "checkpoint")
    X = serialize.load(root / "data" / "train" / "images.xtsr")
    est = ExplanationDistiller(teacher, init_from_teacher=True, epochs=0, floor=7).fit(X)
    net = est.network_
    assert net is not teacher and net.last_layer.frozen
    assert all(not layer.frozen for layer in net.layers[:-1] if layer.has_params)
    for k, v in teacher.state_dict().items():
        assert net.state_dict()[k].tobytes() == v.tobytes()
    doc = json.loads(Path(cfg).read_text())
    doc["distill"]["init_from_teacher"] = True
    Path(tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["distill", "--config", str(tmp_path / "c.json"), "--dataset", str(root / "data"),
                 "--teacher", str(root / "teacher" / "checkpoint"), "--out", str(tmp_path / "s")]) == 0
    assert nn.load_network(tmp_path / "s" / "checkpoint").last_layer.frozen
