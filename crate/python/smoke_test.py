"""Smoke test for the mcitrack_py extension module.

Build it first, e.g. ``pip install --no-build-isolation -e crates/py``.
"""

import math
import tempfile
from pathlib import Path

import mcitrack_py as mt

TINY = """
[backbone]
dim = 16
depth = 2
n_groups = 2
heads = 2
template_size = 32
search_size = 64
clip_len = 2

[cif]
state_size = 4
heads = 2

[train]
epochs = 2
samples_per_epoch = 6
batch_size = 3
lr_drop_epoch = 1

[data]
train_sequences = 3
eval_sequences = 2
length = 12
eval_length = 12
"""


def check_primitives():
    assert math.isclose(mt.iou((0, 0, 2, 2), (1, 1, 2, 2)), 1 / 7, abs_tol=1e-12)
    assert math.isclose(mt.giou((0, 0, 1, 1), (1, 1, 1, 1)), -0.5, abs_tol=1e-12)
    assert mt.total_loss([(0.1, 0.02, 0.3)] * 2) == 1.6
    assert math.isclose(mt.success_auc([1.0] * 4), 20 / 21, abs_tol=1e-12)
    assert mt.ao_sr([1.0, 0.0]) == (0.5, 0.5, 0.5)
    p, _ = mt.precision_metrics([(30.0, 20.0)], [(0, 0, 20, 40)])
    assert p == 1.0

    # One channel, one state: h_t = exp(-dt) h + dt * x, y = h.
    x = [[1.0], [1.0]]
    y, h = mt.selective_scan(x, [[-1.0]], [[0.5], [0.5]], [[1.0], [1.0]], [[1.0], [1.0]])
    h1 = 0.5
    h2 = math.exp(-0.5) * h1 + 0.5
    assert math.isclose(y[0][0], h1) and math.isclose(y[1][0], h2) and math.isclose(h[0][0], h2)


def check_tracking():
    cfg = mt.RunConfig(TINY)
    assert "dim = 16" in cfg.to_toml()

    model = mt.Model(TINY, seed=0)
    losses = model.fit(TINY)
    assert len(losses) == 2 and all(math.isfinite(v) for v in losses)

    seq = mt.SyntheticSequence(4, TINY)
    frozen = mt.Tracker(model, TINY, threshold=math.inf)
    frozen.init(seq.frame(0), seq.gt(0))
    before = frozen.hidden_states()
    assert len(before) == model.num_cif_blocks()
    for t in range(1, len(seq)):
        box, score, committed = frozen.track(seq.frame(t))
        assert len(box) == 4 and 0.0 <= score <= 1.0 and not committed
    assert frozen.hidden_states() == before

    open_gate = mt.Tracker(model, TINY, threshold=-math.inf)
    open_gate.init(seq.frame(0), seq.gt(0))
    _, _, committed = open_gate.track(seq.frame(1))
    assert committed and open_gate.hidden_states() != before

    metrics = dict(model.evaluate(TINY))
    assert all(0.0 <= metrics[k] <= 1.0 for k in ("auc", "ao", "precision"))

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        model.save(str(path))
        again = mt.Model.load(str(path))
        assert again.num_parameters() == model.num_parameters()
        frame = seq.frame(0)
        frame.save(str(Path(tmp) / "f.png"))
        loaded = mt.Frame.load(str(Path(tmp) / "f.png"))
        assert (loaded.width, loaded.height) == (frame.width, frame.height)

    try:
        mt.RunConfig("[train]\nbogus = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")


if __name__ == "__main__":
    check_primitives()
    check_tracking()
    print("smoke test passed")
