"""Smoke test for the lanetopo_py extension.

Build and install first, e.g. `pip install --no-build-isolation -e crates/python`.
"""

import json
import math
import os
import tempfile

import lanetopo_py as lt


def main():
    # Geometry and assignment.
    a = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0)]
    b = [(x, y + 1.0, z) for x, y, z in a]
    assert lt.frechet_distance(a, b) == 1.0
    assert lt.frechet_distance(a, a[::-1]) == 2.0
    assert lt.chamfer_distance(a, a[::-1]) == 0.0
    assert lt.iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7
    assert sorted(lt.hungarian([[4.0, 1.0], [2.0, 8.0]])) == [(0, 1), (1, 0)]
    assert math.isclose(lt.ols(1.0, 1.0, 1.0, 1.0), 1.0)

    # Scenes: generate, round-trip, perturb, evaluate.
    gt = [lt.generate(k, json.dumps({"seed": 3})) for k in range(8)]
    assert all(s.validate() == [] for s in gt)
    again = lt.Scene.from_json(gt[0].to_json())
    assert again.to_json() == gt[0].to_json()
    echo = json.loads(lt.evaluate(gt, gt))
    assert echo["ols"] == 1.0, echo["ols"]
    noise = json.dumps({"seed": 3, "point_sigma": 1.0, "edge_flip_rate": 0.3, "tp_confidence": [0.5, 1.0]})
    pred = [lt.perturb(s, k, noise) for k, s in enumerate(gt)]
    report = json.loads(lt.evaluate(gt, pred, per_frame=True))
    assert 0.0 < report["ols"] < 1.0
    assert len(report["per_frame"]) == 8

    # Model: run, save, load.
    config = json.dumps({"sgnn": {"lane_dim": 8, "te_dim": 6, "embed_hidden": 10, "layers": 2},
                         "heads": {"topo_dim": 4}})
    model = lt.Model(config, seed=1)
    n_l, n_t = len(gt[0]), len(gt[0].boxes)
    q_l = [[0.1 * (i + j) for j in range(8)] for i in range(n_l)]
    q_t = [[0.05 * (i - j) for j in range(6)] for i in range(n_t)]
    layers = model.run(q_l, q_t)
    assert len(layers) == 2
    lane_q, te_q, adj_ll, adj_lt = layers[-1]
    assert len(lane_q) == n_l and len(lane_q[0]) == 8
    assert all(0.0 <= v <= 1.0 for row in adj_ll for v in row)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "params.json")
        model.save(path)
        loaded = lt.Model.load(path)
        assert loaded.run(q_l, q_t) == layers
    model.variant = "sg"
    assert model.run(q_l, q_t)[-1][0] != lane_q

    # Gradient check.
    gc = json.loads(lt.gradcheck(7))
    assert gc["passed"] and gc["max_rel_error"] < 1e-4, gc["max_rel_error"]

    # Errors surface as ValueError.
    try:
        lt.Scene.from_json('{"frame_id": "x"}')
    except ValueError as e:
        assert "lanes" in str(e)
    else:
        raise AssertionError("expected ValueError")

    print("smoke test passed:", model, gt[0])


if __name__ == "__main__":
    main()
