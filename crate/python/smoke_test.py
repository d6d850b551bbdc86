"""Smoke test for the aquaseg Python extension.

Build the extension first:

    cargo build -p aquaseg-py --features extension-module

then run `python3 python/smoke_test.py`. Set AQUASEG_PY_LIB to load the
shared library from a different path.
"""

import importlib.machinery
import importlib.util
import math
import os
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [os.environ.get("AQUASEG_PY_LIB")] + [
        str(ROOT / "target" / profile / name)
        for profile in ("debug", "release")
        for name in ("libaquaseg_py.so", "libaquaseg_py.dylib", "aquaseg_py.dll")
    ]
    for path in filter(None, candidates):
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("aquaseg_py", path)
            spec = importlib.util.spec_from_file_location("aquaseg_py", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("aquaseg_py shared library not found; build it with cargo first")


def main():
    aq = load_module()

    cam = aq.Camera(64.0, 64.0, 32.0, 32.0, 64, 64)
    u, v = cam.project(1.0, -0.5, 10.0)
    x, y, z = cam.backproject(u, v, 10.0)
    assert max(abs(x - 1.0), abs(y + 0.5), abs(z - 10.0)) < 1e-9
    assert cam.project(0.0, 0.0, -1.0) is None

    pts = [(0.0, 0.0, 5.0), (1.0, 1.0, 8.0), (0.0, 0.0, -3.0)]
    projected = aq.project_points(pts, cam, translation=[0.0, 0.0, 1.0])
    assert len(projected) == 2 and abs(projected[0][2] - 6.0) < 1e-12

    samples = [(10.0, 10.0, 5.0), (50.0, 12.0, 9.0), (30.0, 55.0, 7.0), (5.0, 40.0, 4.0)]
    dense = aq.densify_depth(samples, cam)
    assert len(dense) == 64 and len(dense[0]) == 64
    for su, sv, sd in samples:
        assert abs(dense[int(sv)][int(su)] - sd) < 1e-6 * sd

    assert aq.nearest_sample([0, 100, 200], 100, 149) == (1, -49)

    day = [aq.Frame.synthesize(i, seed=3) for i in range(6)]
    night = aq.Frame.synthesize(50, seed=3, night=True)
    f = day[0]
    assert (f.width, f.height) == (64, 64)
    assert len(f.rgb) == 3 and len(f.thermal) == 64 and len(f.lidar[0]) == 64
    assert sum(f.histogram()) <= 64 * 64
    assert sum(map(sum, night.rgb[0])) < sum(map(sum, f.rgb[0]))

    model = aq.Model("dh", seed=1)
    assert model.variant == "dh" and model.num_parameters > 0
    loss = model.loss(f)
    assert abs(loss["total"] - (loss["l_f"] + loss["l_s"])) < 1e-12

    masked_a = model.logits(day[1], mask="rgb")
    other = aq.Frame.synthesize(1, seed=3, night=True)
    masked_b = model.logits(other, mask="rgb")
    assert len(masked_a) == len(masked_b) == 4

    err = model.grad_check(f, samples=30)
    assert err < 1e-4, err

    first = model.train_step(day[:4])["total"]
    for _ in range(15):
        last = model.train_step(day[:4])["total"]
    assert math.isfinite(last) and last < first, (first, last)

    ious, miou = model.evaluate(day[4:])
    assert len(ious) == 4 and (miou is None or 0.0 <= miou <= 1.0)
    rows = model.ablation(day[4:])
    assert len(rows) == 7

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        restored = aq.Model.load(path, variant="dh")
        assert restored.predict(f) == model.predict(f)

    print("python smoke test: ok (gradcheck %.2e, loss %.4f -> %.4f)" % (err, first, last))


if __name__ == "__main__":
    main()
