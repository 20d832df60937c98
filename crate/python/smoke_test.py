"""Smoke test for the confnet_py extension.

Build first:
    cargo build -p confnet-py --release --features extension-module
then run from the repository root:
    python3 python/smoke_test.py
"""

import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_extension(tmp):
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libconfnet_py.so")
        if os.path.exists(lib):
            shutil.copy(lib, os.path.join(tmp, "confnet_py.so"))
            sys.path.insert(0, tmp)
            import confnet_py

            return confnet_py
    sys.exit("libconfnet_py.so not found; build the extension first")


def main():
    tmp = tempfile.mkdtemp()
    cn = load_extension(tmp)

    net = cn.ConfusionNetwork("u1", [[("a", 0.6), ("b", 0.4)], [("c", 0.7), ("d", 0.3)]])
    assert len(net) == 2
    paths = net.n_best(3)
    assert [p[0] for p in paths] == [["a", "c"], ["b", "c"], ["a", "d"]], paths
    assert abs(paths[0][1] - 0.42) < 1e-12
    assert len(net.prune(0.5).positions[0]) == 1
    again = cn.ConfusionNetwork.from_json(net.to_json())
    assert again.positions == net.positions

    try:
        cn.ConfusionNetwork("bad", [[("a", 1.5)]])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid score accepted")

    assert cn.gradient_check("v4", seed=3) < 1e-4

    corpus = os.path.join(tmp, "corpus.jsonl")
    with open(corpus, "w") as f:
        f.write(cn.generate_corpus(10, seed=2, slots=2, values=3))
    ckpt = os.path.join(tmp, "model.json")
    report = json.loads(
        cn.train(corpus, corpus, ckpt, regime="aug", variant="v3", epochs=2, emb_dim=8, hidden_dim=8)
    )
    assert len(report["epochs"]) == 2

    model = cn.Model.load(ckpt)
    assert model.variant == "v3"
    probs = model.predict(net)
    assert set(probs) == set(model.pairs)
    assert all(0.0 <= p <= 1.0 for p in probs.values())
    assert len(model.encode(net)) == 2
    assert model.attention_csv(net).startswith("0,")
    metrics = model.evaluate(corpus, mode="asr-3")
    assert metrics["n_turns"] > 0

    shutil.rmtree(tmp)
    print("smoke test passed")


if __name__ == "__main__":
    main()
