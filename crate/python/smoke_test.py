"""Smoke test for the bicovg_py extension module.

Build first:
    cargo build --release -p bicovg-py --features extension-module
    cp target/release/libbicovg_py.so python/bicovg_py.so
then run `python3 python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import bicovg_py as bg


def main():
    vgg = bg.Config.preset("vgg16-tiny-in")
    dims = vgg.goodness_dims()
    assert dims[:4] == [2880, 2880, 1440, 1440], dims
    assert vgg.groups(4) == [(0, 4), (4, 8), (8, 12), (12, 16)]
    assert vgg.fal_boundaries(4) == [4, 8, 12]

    assert bg.n_eff([0.25] * 4) == 4.0
    assert bg.n_eff([0.0, 1.0, 0.0]) == 1.0
    assert bg.decline_area([10.0, 50.0, 30.0, 40.0]) == 30.0
    assert math.isclose(bg.tail_retention([10.0, 50.0, 30.0, 40.0]), 0.65)
    assert bg.shallow_deep_gain([1.0, 1.0, 1.0, 1.0], [2.0, 2.0, 4.0, 4.0]) == (1.0, 3.0)

    g = bg.pcs_goodness([1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2), 2)
    assert g == [1.0, 4.0, 9.0, 16.0], g

    desk = bg.Config.preset("desk8")
    assert bg.estimate_peak(desk, 2, 50, "interleaved") <= bg.estimate_peak(desk, 2, 50, "standard")

    train, test = bg.synthetic(seed=0, train=300, test=100)
    assert len(train) == 300 and train.shape == (300, 1, 28, 28)

    trainer = bg.Trainer(desk)
    losses = trainer.train_step([0.5] * (4 * 784), (4, 1, 28, 28), [0, 1, 2, 3])
    assert len(losses) == 8 and all(math.isfinite(v) for v in losses)

    summary = trainer.fit(train, test, epochs=1)
    assert len(summary["top1"]) == 8
    assert abs(sum(summary["fusion_weights"]) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        trainer.save(path)
        again = bg.Trainer.load(path)
        assert again.evaluate(test) == trainer.evaluate(test)

    print("bicovg_py smoke test passed: fused top-1 %.1f%% after one epoch" % summary["fused_top1"])


if __name__ == "__main__":
    main()
