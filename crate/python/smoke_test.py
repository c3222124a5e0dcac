"""Smoke test for the fedrac_py extension.

Build and install first:
    cd crates/python && maturin develop --release
"""

import json
import math

import fedrac_py as fr

RAW = [
    [100, 10, 20], [50, 15, 30], [75, 8, 25], [125, 10, 15], [150, 7, 10],
    [110, 10, 25], [125, 15, 20], [80, 10, 10], [75, 15, 20], [50, 10, 30],
]

SMALL = """
seed = 3

[population]
fixture = "example_10"
weights = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]

[clustering]
m = 2

[data]
classes = 3
dim = 4
instances_min = 200
instances_max = 300
test_size = 300

[model]
hidden_widths = [8]

[training]
batch_size = 50
learning_rate = 0.1

[planning]
round_cap = 4
"""


def main():
    norm = fr.normalize_resources(RAW)
    assert norm[0] == [0.5, 0.375, 0.5], norm[0]
    assert all(0.0 <= v <= 1.0 for row in norm for v in row)

    k, curve, clusters = fr.optimal_clusters(norm, seed=42)
    assert k == max(curve, key=lambda p: p[1] if p[1] is not None else math.inf)[0]
    assert sorted(i for c in clusters for i in c) == list(range(10))

    assert fr.mar_parallel(0.5, 3, 8.0) == 10.0
    assert fr.mar_sequential(0.5, 3, 8.0) == 14.0

    a = fr.Model(4, [6], 3, seed=1)
    b = fr.Model(4, [6], 3, seed=2)
    avg = fr.fedavg([a, b], [1, 3])
    expected = [x + 0.75 * (y - x) for x, y in zip(a.parameters, b.parameters)]
    assert all(abs(p - q) < 1e-12 for p, q in zip(avg.parameters, expected))
    x = [[0.1, -0.2, 0.3, 0.0], [1.0, 0.5, -0.5, 2.0]]
    assert len(avg.logits(x)) == 2 and len(avg.predict(x)) == 2
    loss, grad = avg.ce_loss_and_grad(x, [0, 2])
    assert loss > 0 and len(grad) == avg.param_count

    cfg = fr.Config(SMALL)
    report = cfg.run()
    again = fr.Config(cfg.to_toml()).run()
    assert report.to_json() == again.to_json()
    assert fr.Report.from_json(report.to_json()).global_accuracy == report.global_accuracy
    assert len(report.cluster_members) == 2
    assert 0.0 <= report.global_accuracy <= 1.0
    print(report.tables())
    print(json.dumps({"global_accuracy": report.global_accuracy, "clusters": report.cluster_accuracies}))

    cfg.baseline = "fedavg"
    assert cfg.run().method == "fedavg"
    try:
        fr.Config("seed = -1")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
