#!/usr/bin/env python3
"""Smoke test for the gloro_py extension module.

Builds are expected at target/{debug,release}/libgloro_py.so; the module is
loaded from there directly so no install step is needed:

    cargo build -p gloro-py
    python3 python/smoke_test.py
"""

import importlib.util
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / profile / name
        for profile in ("debug", "release")
        for name in ("libgloro_py.so", "gloro_py.so", "libgloro_py.dylib")
    ]
    for cand in candidates:
        if cand.exists():
            staging = pathlib.Path(tempfile.mkdtemp()) / "gloro_py.so"
            shutil.copy(cand, staging)
            spec = importlib.util.spec_from_file_location("gloro_py", staging)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("gloro_py cdylib not found; run `cargo build -p gloro-py` first")


def main():
    g = load_module()

    ds = g.Dataset.synthetic_2d(seed=1, n_per_class=60, overlap=0.2)
    assert len(ds) == 240 and ds.dim == 2 and ds.num_classes == 4
    min_dist, eps_suggest = ds.estimate_separation()
    assert eps_suggest == min_dist / 2 > 0

    acas = g.Dataset.acas_synthetic(seed=2, n=200, dims=5)
    assert acas.num_classes == 5 and acas.class_names[2] == "clear"

    sets = g.parse_affinity("set = class0, class1\nset = class2, class3\n", ds.class_names)
    assert sets == [[0, 1], [2, 3]]

    net, history = g.train_model(
        ds, eps=0.15, guarantee="rtk", k=2, hidden=[16], epochs=25, batch_size=64,
        seed=3, lr_start=1e-2, lr_end=1e-4,
    )
    assert net.input_dim == 2 and net.num_classes == 4
    assert len(history) == 25
    assert history[-1]["loss"] < history[0]["loss"]
    assert history[-1]["clean_acc"] > 0.8

    logits = net.forward(ds.points[0])
    assert len(logits) == 4
    top2 = net.predict_topk(ds.points[0], 2)
    assert sorted(top2) == sorted(set(top2)) and len(top2) == 2

    cert = net.certify(ds.points[0], eps=0.15, guarantee="rtk", k=2)
    assert isinstance(cert["accepted"], bool)
    assert len(cert["per_k_margins"]) == 3
    if cert["accepted"]:
        assert cert["kstar"] >= 1 and cert["margin"] > 0

    report = net.evaluate(ds, eps=0.15, guarantee="rtk", k=2)
    assert 0.0 <= report["vra"] <= 1.0
    assert abs(report["vra"] + 0 - report["correct"] / report["n"]) < 1e-12
    assert report["vra"] <= 1.0 - report["rejection_rate"] + 1e-12

    aff = net.evaluate(ds, eps=0.15, guarantee="affinity", affinity_sets=sets)
    std = net.evaluate(ds, eps=0.15, guarantee="standard")
    assert std["vra"] <= aff["vra"] <= report["vra"] + 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "model.json"
        net.save(path)
        reloaded = g.Network.load(path)
        assert reloaded.forward(ds.points[5]) == net.forward(ds.points[5])
        assert reloaded.metadata["guarantee"] == "rtk"

        dpath = pathlib.Path(tmp) / "d.csv"
        ds.save(dpath)
        ds2 = g.Dataset.load(dpath)
        assert ds2.labels == ds.labels and ds2.points == ds.points

    print("smoke test: all checks passed")


if __name__ == "__main__":
    main()
