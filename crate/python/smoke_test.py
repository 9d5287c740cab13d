"""Builds the extension module if needed and exercises every binding."""

import importlib
import json
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        return importlib.import_module("sns_keyrate")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "sns-keyrate-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    out = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(ROOT / "target" / "release" / "libsns_keyrate.so", out / "sns_keyrate.so")
    sys.path.insert(0, str(out))
    return importlib.import_module("sns_keyrate")


def main():
    m = load()

    r0 = m.key_rate(100.0, 100.0)
    r5 = m.key_rate(100.0, 100.0, delta=0.05)
    assert 0 < r5 < r0, (r0, r5)
    assert m.key_rate(100.0, 100.0, mode="original") < r0
    assert abs(m.plob(0.5) - 1.0) < 1e-15

    try:
        m.key_rate(100.0, 100.0, delta=1.0)
    except ValueError as e:
        assert "delta" in str(e)
    else:
        raise AssertionError("delta = 1 must be rejected")

    cfg = "[channel]\nl_ac = 100.0\nl_bc = 100.0\n"
    point = json.loads(m.run_point(cfg))
    assert point["rate"] == r0

    sweep = json.loads(m.run_sweep(cfg + "[sweep]\nstart = 100\nstop = 200\nstep = 50\n"))
    assert [p["channel"]["l_ac"] + p["channel"]["l_bc"] for p in sweep["points"]] == [100.0, 150.0, 200.0]

    s = json.loads(m.soundness(80.0, 0.05, runs=4, windows=10_000_000))
    assert s["violations"] == 0

    print("smoke test ok: rate(200 km) = %.4e, rate(200 km, 5%%) = %.4e" % (r0, r5))


if __name__ == "__main__":
    main()
