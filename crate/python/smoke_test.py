"""Smoke test for the `car` extension module.

Build and run:
    cargo build --release -p car-python --features extension-module
    cp target/release/libcar.so python/car.so   # libcar.dylib on macOS
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import car  # noqa: E402


def main():
    assert "CAR3" in car.schemes()

    # transducer loss of a single frame with no labels is -log p(blank)
    loss, grad = car.rnnt_loss([math.log(0.25), math.log(0.75)], 1, 2, [])
    assert abs(loss - math.log(4.0)) < 1e-12, loss
    assert len(grad) == 2

    assert car.wer([([1, 2, 3], [1, 3])]) == 1 / 3

    train = car.gen_corpus(seed=3, n_utts=16)
    test = car.gen_corpus(seed=3, n_utts=4, split=1)
    assert len(train) == 16 and len(test) == 4
    frames = train.features(0)
    assert len(frames[0]) == 80
    assert all(1 <= g <= 80 for t in train.transcripts() for g in t)

    base = car.Model.init("toy", seed=1)
    total, trainable, backbone = base.param_counts()
    assert total == backbone == 157619, (total, backbone)

    model = base.adapt("CAR3", seed=0)
    total, trainable, backbone = model.param_counts()
    assert backbone == 157619 and trainable == total - backbone, (total, trainable)

    trace = model.train(train, steps=20, lr=3e-3, batch_size=2)
    assert len(trace) == 20 and all(math.isfinite(x) for x in trace)
    w = model.wer(test)
    assert 0.0 <= w, w

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.carp")
        model.save(path)
        again = car.Model.load(path)
        assert again.scheme == "CAR3"
        assert again.transcribe(test) == model.transcribe(test)

    try:
        base.adapt("NOPE")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown scheme accepted")

    print(f"ok: CAR3 trainable {trainable}, loss {trace[0]:.3f} -> {trace[-1]:.3f}, WER {100 * w:.1f}%")


if __name__ == "__main__":
    main()
