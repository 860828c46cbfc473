"""Smoke test for the qspace extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math

import qspace


def main():
    scheme = qspace.Scheme.electrostatic(60)
    assert scheme.n == 60 and scheme.n0 == 1
    assert len(scheme.directions()) == 60

    a1 = qspace.Model.paper("A1")
    assert abs(a1.eval(1, 0, 0) - math.exp(-0.04 * 68)) < 1e-12
    assert abs(a1.eval(0, 1, 0) - a1.eval(0, -1, 0)) < 1e-15

    noiseless = a1.summaries()
    assert abs(noiseless["xi"] - 0.32 / 2.72) < 1e-3, noiseless

    sample = qspace.Sample.acquire(qspace.Model.paper("A1", seed=1), scheme, 1 / 30, 5)
    stats = qspace.analyze(sample)
    assert stats["U"] > 0.1185, stats

    cfg = qspace.Config("noise = 1/30\ncalibration_reps = 1000\n")
    cfg.set("models", "A1,A3")
    cfg.set("reps", "20")
    cal = qspace.Calibration.run(cfg)
    again = qspace.Calibration.from_csv(cal.to_csv())
    assert again.to_csv() == cal.to_csv()

    report = qspace.classify(sample, cfg, cal, 1 / 30)
    assert report["decisions"]["U"] == "reject", report
    print("classification of an A1 voxel:", report["classification"])

    csv, text = qspace.table3(cfg, cal)
    assert csv.startswith("model,noise")
    print(text)

    rows = qspace.fiber_trace("forking")
    assert len(rows) == 7
    assert abs(qspace.dawson(1.0) - 0.5380795069127684) < 1e-12
    print("qspace", qspace.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
