"""Smoke test for the hiore Python bindings.

Imports an installed `hiore` module, or falls back to the library built by
`cargo build --release -p hiore-py`.
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import hiore

        return hiore
    except ImportError:
        pass
    for name in ("libhiore_py.so", "libhiore_py.dylib", "hiore_py.dll"):
        built = ROOT / "target" / "release" / name
        if built.exists():
            suffix = ".pyd" if name.endswith(".dll") else ".so"
            target = pathlib.Path(tempfile.mkdtemp()) / f"hiore{suffix}"
            shutil.copy(built, target)
            spec = importlib.util.spec_from_file_location("hiore", target)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("hiore module not found; run `cargo build --release -p hiore-py` first")


CONFIG = """
[data]
train = "train.jsonl"
dev = "dev.jsonl"

[model.encoder]
dim = 8
layers = 1
heads = 2
ff_dim = 8
head_tail_dim = 4

[model.table]
distance_dim = 4

[model.wnet]
base_channels = 2
out_channels = 3

[train]
max_epochs = 2
deterministic = true
"""


def write_jsonl(path, sentences):
    import json

    path.write_text("".join(json.dumps(s) + "\n" for s in sentences))


def main():
    hiore = load_module()

    corpus = hiore.gen_synthetic(7, 20)
    assert len(corpus) == 20
    assert corpus == hiore.gen_synthetic(7, 20)
    assert {"id", "tokens", "entities", "relations"} <= set(corpus[0])

    report = hiore.evaluate(corpus, corpus, strata=True)
    assert report["entity"]["f1"] == 1.0 and report["relation"]["f1"] == 1.0
    assert report["strata"]["ie"]["f1"] == 1.0

    for n in range(1, 8):
        assert len(hiore.static_graph_edges(n)) == 5 * n * (n - 1) // 2
    assert hiore.dynamic_graph_edges([[0, 0], [0, 0]]) == []
    assert len(hiore.dynamic_graph_edges([[1, 1], [1, 1]])) == 5

    labels = hiore.LabelSpace(["PER", "LOC"], ["LIVE-IN"])
    assert len(labels) == 4 and labels.names()[0] == "⊥"
    n, k = 3, len(labels)
    gold = [[0] * n for _ in range(n)]
    gold[0][0] = 2  # PER at token 0
    gold[2][2] = 1  # LOC at token 2
    gold[0][2] = 3  # LIVE-IN
    probs = []
    for i in range(n):
        for j in range(n):
            probs += [1.0 if c == gold[i][j] else 1e-9 for c in range(k)]
    out = hiore.decode(probs, n, labels)
    assert [e["type"] for e in out["entities"]] == ["PER", "LOC"]
    assert out["relations"] == [{"arg1": 0, "arg2": 1, "type": "LIVE-IN"}]

    try:
        hiore.decode([0.5], 2, labels)
    except ValueError:
        pass
    else:
        raise AssertionError("bad probability length accepted")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        write_jsonl(tmp / "train.jsonl", corpus[:8])
        write_jsonl(tmp / "dev.jsonl", corpus[8:12])
        (tmp / "run.toml").write_text(CONFIG)
        summary = hiore.train(str(tmp / "run.toml"), str(tmp / "out"), True)
        assert summary["epochs"] == 2
        ck = hiore.Checkpoint.load(str(tmp / "out" / "checkpoint"))
        assert math.isclose(ck.threshold, 1.4)
        tokens = corpus[0]["tokens"]
        p = ck.probs(tokens)
        assert len(p) == len(tokens) ** 2 * len(ck.labels)
        assert all(math.isclose(sum(p[c : c + len(ck.labels)]), 1.0, rel_tol=1e-5) for c in range(0, len(p), len(ck.labels)))
        pred = ck.predict(tokens)
        assert len(pred["entity_scores"]) == len(pred["entities"])

    worst = max(err for _, err in hiore.gradcheck(size=3))
    assert worst <= 1e-4, worst

    print("python smoke test passed")


if __name__ == "__main__":
    main()
