# Copyright 2026 The PACE Authors.
# SPDX-License-Identifier: Apache-2.0
"""Smoke test for the pace_py extension module.

Build and install first:
    maturin develop --release -m crates/python/Cargo.toml
Optionally pass a stage-3 checkpoint path to exercise the model bindings.
"""

import math
import sys

import pace_py


def main() -> int:
    amps = [1.0, 0.5, 0.3, 0.2, 0.1, 0.1, 0.05, 0.05]
    flat, truth = pace_py.synthesize([(0.0, 220.0)], amps, 1.0, 0.002, 3)
    assert len(flat) == pace_py.SAMPLE_RATE
    f0, uv = pace_py.extract_f0(flat)
    close = sum(1 for f in f0 if abs(f - 220.0) <= 2.0)
    assert close > 0.95 * len(f0), (close, len(f0))
    assert all(abs(t - 220.0) < 1e-9 for t in truth)

    ramp = [100.0 + i for i in range(100)]
    assert pace_py.f0_scaled_distance(ramp, ramp) == 0.0
    assert abs(pace_py.f0_scaled_distance(ramp, ramp[::-1]) - 2.0) < 1e-12
    try:
        pace_py.f0_scaled_distance([0.0] * 10, ramp[:10])
    except ValueError:
        pass
    else:
        raise AssertionError("unvoiced contour must raise")

    rising, _ = pace_py.synthesize([(0.0, 150.0), (1.0, 250.0)], amps, 1.0)
    assert pace_py.spectral_distance(flat, flat) == 0.0
    assert pace_py.spectral_distance(flat, rising) > 0.0
    bins = pace_py.quantize_f0([100.0, 200.0, 0.0], [1, 1, 0])
    assert bins == [0, 255, 0], bins

    if len(sys.argv) > 1:
        model = pace_py.Model.load(sys.argv[1])
        target = flat[: 24000 // 320 * 320]
        out = model.convert(target, rising[: len(target)])
        assert len(out) == len(target)
        codes = model.encode(target)
        assert len(codes) == len(target) // 320
        audio = model.decode(codes)
        assert len(audio) == len(target) and all(math.isfinite(v) for v in audio)
        print("model", model.variant, "ok")

    print("pace_py smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
