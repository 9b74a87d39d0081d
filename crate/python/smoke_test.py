#!/usr/bin/env python3
"""Smoke test for the dfrd_py extension module.

Builds the extension with cargo, loads it, and exercises the bound surface:
numeric fixtures, budget schedules, data synthesis/partitioning, and a tiny
end-to-end run checked for determinism.

Usage: python3 python/smoke_test.py [--skip-build]
"""

import argparse
import math
import pathlib
import shutil
import subprocess
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_extension() -> None:
    subprocess.run(
        ["cargo", "build", "-p", "dfrd-py", "--release"],
        cwd=ROOT,
        check=True,
    )
    built = ROOT / "target" / "release" / "libdfrd_py.so"
    if not built.exists():  # e.g. macOS
        built = ROOT / "target" / "release" / "libdfrd_py.dylib"
    target = ROOT / "python" / "dfrd_py.so"
    shutil.copyfile(built, target)


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--skip-build", action="store_true", help="reuse an existing dfrd_py.so")
    args = parser.parse_args()

    if not args.skip_build:
        build_extension()

    sys.path.insert(0, str(ROOT / "python"))
    import dfrd_py

    # Numeric fixtures.
    sm = dfrd_py.softmax([1.0, 2.0, 3.0])
    assert abs(sum(sm) - 1.0) < 1e-12
    assert abs(sm[2] - 0.6652409557748219) < 1e-12
    assert abs(dfrd_py.cross_entropy([[0.0, 0.0]], [0]) - math.log(2.0)) < 1e-12
    assert dfrd_py.kl_div([[0.3, -0.2]], [[0.3, -0.2]]) == 0.0

    # Budget schedule fixtures.
    s = 1.0 / 16.0
    assert dfrd_py.assign_budgets(10, 4, 10) == [0.5, 0.25, 0.125, s, s, s, s, s, s, s]
    assert dfrd_py.assign_budgets(10, 4, 40) == [s] * 10
    assert dfrd_py.assign_budgets(10, 4, 5) == [1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125, s, s, s]

    # Data synthesis and partitioning.
    features, labels = dfrd_py.make_blobs(4, 6, 25, 0.2, 7)
    assert len(features) == 100 and len(labels) == 100
    assert all(-1.0 <= v <= 1.0 for row in features for v in row)
    shards = dfrd_py.dirichlet_partition(labels, 4, 5, 0.3, 11)
    assert sorted(i for shard in shards for i in shard) == list(range(100))

    # Gate semantics.
    assert dfrd_py.gate([0.0, 1.0], [1.0, 0.0], 0, "diamond")
    assert not dfrd_py.gate([1.0, 0.0], [1.0, 0.0], 0, "diamond")
    assert dfrd_py.gate([1.0, 0.0], [1.0, 0.0], 0, "triangle")

    # Tiny end-to-end run, twice: byte-identical CSVs.
    overrides = [
        "data.classes=3", "data.dim=4", "data.per_class=15", "data.test_per_class=6",
        "fed.clients=3", "fed.active=3", "fed.rounds=2",
        "model.hidden=6", "gen.hidden=6", "gen.noise_dim=4",
        "client.steps=2", "client.batch=8",
        "distill.iters=1", "distill.gen_iters=1", "distill.model_iters=1",
    ]
    first = dfrd_py.run(dfrd_py.default_config(), overrides, 23)
    second = dfrd_py.run(dfrd_py.default_config(), overrides, 23)
    assert first.rounds == 2
    assert first.csv == second.csv
    assert first.csv.splitlines()[0].startswith("round,g_acc,l_acc")
    assert 0.0 <= first.top_g_acc <= 1.0

    # Bad input surfaces as an exception naming the key.
    try:
        dfrd_py.run(dfrd_py.default_config(), ["fed.bogus=1"], None)
    except ValueError as e:
        assert "fed.bogus" in str(e)
    else:
        raise AssertionError("unknown key should raise")

    print("smoke test: all assertions passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
