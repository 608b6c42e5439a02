"""Smoke test for the defield Python extension.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`.
"""

import math
import tempfile
from pathlib import Path

import defield


def blobs(n, shift=0.0):
    data = []
    for z in range(n):
        for y in range(n):
            for x in range(n):
                d1 = (x - shift - 8) ** 2 + (y - 9) ** 2 + (z - 8) ** 2
                d2 = (x - shift - 12) ** 2 + (y - 6) ** 2 + (z - 11) ** 2
                data.append(math.exp(-d1 / 12.5) + 0.6 * math.exp(-d2 / 8.0))
    return defield.Volume([n, n, n], data)


def main():
    rep = defield.reproduce_paper()
    full, three = rep["full"], rep["three_week"]
    assert [full["table"][k] for k in "abcd"] == [12, 4, 9, 13]
    assert [three["table"][k] for k in "abcd"] == [11, 3, 10, 14]
    assert abs(full["fisher"]["odds_ratio"] - 4.33) < 0.01
    assert abs(three["fisher"]["p"] - 0.043) < 0.005
    print("fixture tables ok:", full["fisher"], three["fisher"])

    odds, p = defield.fisher_exact(3, 1, 1, 3)
    assert odds == 9.0 and abs(p - 0.4857) < 1e-3
    t, p, df = defield.pooled_t_test(5, 1.0, 0.1, 5, 1.2, 0.1)
    assert abs(t + 3.162) < 1e-2 and df == 8
    assert defield.classify(0.99, 1.01, 1.04) == "PR"
    assert defield.classify(None, 1.01, 1.04) == "no-decision"

    src, tgt = blobs(16), blobs(16, shift=1.0)
    tr = defield.register(src, tgt, pyramid_levels=2, iterations_per_level=20)
    trace = tr.trace()
    assert trace and all(math.isfinite(e["energy"]) for e in trace)
    mean_res, _ = tr.inverse_residual()
    assert mean_res < 0.1
    jac = tr.forward.jacobian()
    assert jac.interior_min() > 0.0
    print(f"registration ok: {len(trace)} iterations, residual {mean_res:.4f}")

    vols, masks, truth = defield.synth_course(dims=[32, 32, 32], tumor_radius=6.0, weeks=3)
    assert len(vols) == 3 and len(truth) == 2
    labels, samples = defield.region_samples(masks[0], masks[1], truth[0])
    assert len(labels) == 32 ** 3
    st = samples.statistics(resamples=200)
    assert {r["label"] for r in st["regions"]} <= {"N", "U", "R", "G"}
    print("phantom ok: means", {l: samples.mean(l) for l in "NURG"})

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        vols[0].write(d / "v.vol")
        assert defield.Volume.read(d / "v.vol").to_list() == vols[0].to_list()
        tr.write(d / "t")
        # Fields are stored as float32.
        back = defield.Transform.read(d / "t").forward.to_list()
        assert all(abs(a - b) < 1e-5 for u, v in zip(back, tr.forward.to_list()) for a, b in zip(u, v))
        try:
            defield.Volume.read(d / "missing.vol")
        except defield.DefieldError as e:
            assert "missing_file" in str(e)
        else:
            raise AssertionError("expected DefieldError")
    print("smoke test passed")


if __name__ == "__main__":
    main()
