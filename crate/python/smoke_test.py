#!/usr/bin/env python3
"""End-to-end smoke test for the lordba_py extension module.

Builds nothing itself: it looks for the compiled module in target/release
(falling back to target/debug), copies it beside this script under the
importable name, and drives the public surface once. Build first with

    cargo build -p lordba-py --release --features extension-module
"""

import math
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
REPO = os.path.dirname(HERE)


def stage_module():
    candidates = [
        os.path.join(REPO, "target", profile, "liblordba_py.so")
        for profile in ("release", "debug")
    ]
    built = [p for p in candidates if os.path.exists(p)]
    if not built:
        sys.exit("no liblordba_py.so under target/; build lordba-py first")
    newest = max(built, key=os.path.getmtime)
    staged = os.path.join(HERE, "lordba_py.so")
    shutil.copy2(newest, staged)
    sys.path.insert(0, HERE)


stage_module()

import lordba_py as lp  # noqa: E402


def hadamard(i, j):
    return 1.0 if bin(i & j).count("1") % 2 == 0 else -1.0


def frob(m):
    return math.sqrt(sum(v * v for row in m for v in row))


def sub(a, b):
    return [[x - y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def matmul(x, y):
    cols = len(y[0])
    inner = len(y)
    return [
        [sum(row[k] * y[k][j] for k in range(inner)) for j in range(cols)]
        for row in x
    ]


def check_adapter_and_containers():
    n, r, m = 16, 4, 12
    b1 = [[hadamard(i, k + 1) for k in range(r)] for i in range(n)]
    b2 = [[hadamard(j, k + 1) for j in range(m)] for k in range(r)]
    env = (
        [1.0 + 0.125 * (i % 4) for i in range(n)],
        [2.0 ** (-3 - k) for k in range(r)],
        [1.0 - 0.0625 * (j % 3) for j in range(m)],
    )
    adapter = lp.Adapter(b1, b2, [env])
    assert (adapter.n, adapter.m, adapter.rank) == (n, m, r)
    assert adapter.storage_bits == r * (n + m) + 16 * (n + r + m)
    carrier_bpw, total_bpw = adapter.bpw
    assert 0 < carrier_bpw < total_bpw

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "a.lba1")
        adapter.save(path)
        back = lp.Adapter.load(path)
        # the envelope above is dyadic, so fp16 scale storage is lossless
        assert back.reconstruct() == adapter.reconstruct()
        assert back.envelopes == adapter.envelopes
        assert back.r0_ref == adapter.r0_ref

        try:
            lp.Adapter.load(os.path.join(d, "missing.lba1"))
        except IOError:
            pass
        else:
            raise AssertionError("loading a missing file must raise IOError")
    print("PASS adapter construction and LBA1 round trip")
    return adapter


def check_packed_kernel(adapter):
    t, n = 3, adapter.n
    x = [[math.sin(1.0 + 0.7 * t0 + 0.3 * i) for i in range(n)] for t0 in range(t)]
    packed = adapter.pack()
    dev = frob(sub(packed.apply(x), matmul(x, adapter.reconstruct())))
    assert dev <= 1e-9, dev
    assert packed.unpack().reconstruct() == adapter.reconstruct()
    ratio = lp.bandwidth_ratio(1 << 20, 1 << 20, 16, 1)
    assert abs(ratio - 8.0) < 1e-3, ratio
    print(f"PASS packed forward kernel (max dev {dev:.2e}, ratio {ratio:.4f})")


def check_factors_and_compress():
    n, m, r = 32, 32, 4
    b1 = [[hadamard(i, k + 1) for k in range(r)] for i in range(n)]
    b2 = [[hadamard(j, k + 1) for j in range(m)] for k in range(r)]
    alpha = [[0.75, 1.0, 1.25][(i * 7) % 3] for i in range(n)]
    beta = [2.0 ** (-10 - k) for k in range(r)]
    gamma = [[0.75, 1.0, 1.25][(j * 5) % 3] for j in range(m)]
    a = [[alpha[i] * b1[i][k] * beta[k] for k in range(r)] for i in range(n)]
    b = [[gamma[j] * b2[k][j] for k in range(r)] for j in range(m)]
    factors = lp.Factors(a, b)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "f.lrf1")
        factors.save(path)
        loaded = lp.Factors.load(path)
        # the entries above are exact in binary32, so this round trip is too
        assert loaded.a() == factors.a() and loaded.b() == factors.b()

    delta = factors.delta()
    adapter, info = lp.compress(delta, r)
    assert info["relative_error"] <= 1e-8, info["relative_error"]
    hist = info["objective_history"]
    assert hist[-1] <= hist[0] + 1e-18
    assert adapter.r0_ref == r

    signs = lp.Factors([[hadamard(i, 3)] for i in range(24)], [[hadamard(j, 5)] for j in range(20)])
    diag = signs.diagnose()
    assert diag["ratio"] == 0.0 and diag["zeta"] == 0.0, diag

    try:
        lp.compress(delta, 64)
    except ValueError:
        pass
    else:
        raise AssertionError("rank above min(N,M) must raise ValueError")
    print(f"PASS LRF1 round trip and compression (rel err {info['relative_error']:.2e})")
    return adapter, delta


def check_training():
    x, y, w0, hidden = lp.planted_toy_task(16, 12, 2, samples=64, seed=11)
    assert lp.adapter_loss(hidden, x, y, w0) <= 1e-18

    warm, _ = lp.compress(hidden.reconstruct(), 2)
    start = lp.adapter_loss(warm, x, y, w0)
    trained, hist = lp.train_toy(x, y, w0, mode="full", steps=400, init=warm, seed=3)
    final = lp.adapter_loss(trained, x, y, w0)
    assert len(hist) == 401
    assert final <= start * 1.01 + 1e-16, (start, final)

    scratch, hist2 = lp.train_toy(x, y, w0, mode="scratch", steps=50, rank=2, seed=4)
    assert len(hist2) == 51 and hist2[-1] <= hist2[0]

    try:
        lp.train_toy(x, y, w0, mode="freeze", steps=5)
    except ValueError:
        pass
    else:
        raise AssertionError("freeze without init must raise ValueError")
    print(f"PASS toy QAT (warm {start:.3e} -> {final:.3e})")


def check_theory():
    rec = lp.check_reconstruction_bound(32, 32, 4, noise_scale=0.03, trials=400, seed=5)
    assert rec["passed"] is True, rec
    assert abs(rec["slope"] - 1.0) <= 0.2, rec["slope"]

    cons = lp.check_sign_consistency(16, 16, 4, noise_scale=0.08, trials=500, seed=6)
    assert cons["passed"] is True and cons["empirical"][0] == 0.0

    sig = lp.check_signal_lowerbound(16, 16, 4, trials=4000, seed=7)
    assert sig["passed"] is True, sig

    tail = lp.check_entry_tail(16, 16, 4, [0.8, 1.6, 2.4], noise_scale=0.05, trials=4000, seed=8)
    assert tail["passed"] is True, tail
    assert all(e <= b for e, b in zip(tail["empirical"], tail["bound"]))

    try:
        lp.check_reconstruction_bound(2, 2, 1, trials=10)
    except ValueError:
        pass
    else:
        raise AssertionError("NM <= 8 must raise ValueError")
    print(f"PASS Monte-Carlo bound checks (slope {rec['slope']:.3f})")


def main():
    adapter = check_adapter_and_containers()
    check_packed_kernel(adapter)
    check_factors_and_compress()
    check_training()
    check_theory()
    print("smoke test OK")


if __name__ == "__main__":
    main()
