"""Independent oracles and the randomized signal harness used by the tests."""
import random
import time

import numpy as np

from tilefabric import WorldConfig, launch_world

# one "PASS|FAIL name: detail" line per acceptance criterion, printed at the end
VERDICTS = []


def verdict(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    VERDICTS.append(line)
    print(line)
    return ok


def scalar_matmul(a, b):
    """Plain i, j, k loop in float32, one rounding per multiply and per add."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for kk in range(k):
                acc = np.float32(acc + np.float32(a[i, kk] * b[kk, j]))
            c[i, j] = acc
    return c


def _jitter(rng):
    # a random mix of nothing, GIL yields and short busy spins
    r = rng.random()
    if r < 0.4:
        return
    if r < 0.8:
        time.sleep(0)
        return
    end = time.perf_counter_ns() + rng.randrange(1_000, 40_000)
    while time.perf_counter_ns() < end:
        pass


def interleaving_trial(seed, watchdog=5.0, wait=True):
    """One seeded producer/consumer schedule over 2..4 ranks.

    Every rank pushes ``chunks`` blocks of seeded data into every peer's
    inbox (several stores per block, random jitter between them) and then
    raises that block's flag. Consumers wait on each flag, in a random order,
    before loading the block. Returns the number of blocks whose loaded
    values differ from what was stored, plus the world result.
    """
    rng = random.Random(seed)
    world_size = rng.randint(2, 4)
    chunks = rng.randint(1, 3)
    width = rng.choice((1, 4, 16))
    cfg = WorldConfig(world_size, launch_cost=0, seed=seed,
                      spin_yield_every=rng.choice((1, 8, 64)), watchdog=watchdog)

    def payload(src, dst, c):
        return np.full(width, 1000 * src + 10 * dst + c + 1, dtype=np.float32)

    def program(ctx):
        r = ctx.rank
        local = random.Random(seed * 131 + r)
        inbox = ctx.alloc_symmetric("inbox", (world_size, chunks, width), staging=True)
        flags = ctx.alloc_board("flags", (chunks,))

        def produce():
            for c in range(chunks):
                for dst in local.sample(range(world_size), world_size):
                    data = payload(r, dst, c)
                    half = width // 2
                    # split store: a torn block would show up as a mismatch
                    ctx.remote_store(inbox, dst, (r, c, slice(0, half)), data[:half])
                    _jitter(local)
                    ctx.remote_store(inbox, dst, (r, c, slice(half, width)), data[half:])
                    _jitter(local)
                    ctx.atomic_signal(flags, dst, (r, c))

        def consume():
            bad = 0
            order = [(s, c) for s in range(world_size) for c in range(chunks)]
            local.shuffle(order)
            for s, c in order:
                _jitter(local)
                if wait:
                    ctx.wait_signal(flags, (s, c), 1)
                got = ctx.remote_load(inbox, r, (s, c), tag=(s, c))
                bad += not np.array_equal(got, payload(s, r, c))
            return bad

        return ctx.run_concurrent(produce, consume)[1]

    res = launch_world(cfg, program)
    return sum(res.results), res
