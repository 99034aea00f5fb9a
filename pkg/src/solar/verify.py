"""Self-check suite behind ``solar verify``.

Each check compares a fast path against the literal oracles on seeded random
inputs and returns ``(passed, detail)``.
"""

import time
import warnings

import numpy as np
import torch

from . import oracles
from .attention import SecondOrderAttention, attention_map, soa_forward
from .backbones import L2NET_CONFIGS, BackboneSpec, DescriptorModel
from .evaluation import VerificationSet, average_precision, fpr_at_95, precision_at_k
from .losses import fos_loss, sos_loss
from .mining import LabeledPool, mine_hard_negatives
from .pooling import gem_pool
from .store import decode_store, encode_store

GOLDEN_STORE = bytes.fromhex(
    "534f4c52010000000400000001000000000000000100610000803f000000000000000000000000")


def check_gem(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        f = rng.uniform(0, 3, size=(rng.integers(1, 5), rng.integers(1, 5), 3))
        p = rng.uniform(1, 20)
        got = gem_pool(torch.from_numpy(f), p).numpy()
        worst = max(worst, oracles.relative_error(got, oracles.gem(f, p)))
    return worst <= 1e-9, f"max rel err {worst:.2e}"


def check_soa(rng, trials=20):
    worst = 0.0
    for t in range(trials):
        d = 2 * int(rng.integers(1, 4))
        f = torch.from_numpy(rng.normal(size=(rng.integers(1, 4), rng.integers(1, 4), d)))
        block = SecondOrderAttention(d, seed=t).double()
        with torch.no_grad():
            block.wpsi.normal_(generator=torch.Generator().manual_seed(t))
        f_so, z = soa_forward(f, block)
        ref_f, ref_z = oracles.soa(f.numpy(), *(x.detach().numpy() for x in
                                                (block.wq, block.wk, block.wv, block.wpsi)),
                                   block.alpha.item())
        worst = max(worst, oracles.relative_error(f_so.detach(), ref_f),
                    oracles.relative_error(z.detach(), ref_z))
    return worst <= 1e-9, f"max rel err {worst:.2e}"


def check_row_sums(rng, trials=200):
    worst = 0.0
    for _ in range(trials):
        n, dq = int(rng.integers(1, 30)), int(rng.integers(1, 8))
        scale = rng.choice([1.0, 10.0, 50.0])
        q = torch.from_numpy(rng.uniform(-1, 1, size=(dq, n)))
        k = torch.from_numpy(rng.uniform(-1, 1, size=(dq, n)))
        z = attention_map(q, k, scale / dq)
        worst = max(worst, float((z.sum(-1) - 1).abs().max()))
    return worst <= 1e-6, f"max |row sum - 1| {worst:.2e}"


def check_identity():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 40, 40)
    base = DescriptorModel(BackboneSpec(seed=3)).eval()
    full = DescriptorModel(BackboneSpec(soa_insertions=(4, 5), seed=3)).eval()
    same = torch.equal(base(x), full(x))
    patch = torch.rand(2, 1, 32, 32)
    l2 = DescriptorModel(BackboneSpec("l2net", seed=1)).eval()
    for ins in L2NET_CONFIGS:
        other = DescriptorModel(BackboneSpec("l2net", ins, seed=1)).eval()
        same = same and torch.equal(l2(patch), other(patch))
    return same, "fresh SOA blocks leave every descriptor bitwise unchanged" if same else "mismatch"


def check_losses(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        t, d = int(rng.integers(1, 10)), int(rng.integers(2, 6))
        a, p, n = (torch.from_numpy(rng.normal(size=(t, d))) for _ in range(3))
        trip = list(zip(a.numpy(), p.numpy(), n.numpy()))
        m = rng.uniform(0, 2)
        worst = max(worst, oracles.relative_error(fos_loss((a, p, n), m).item(), oracles.fos(trip, m)),
                    oracles.relative_error(sos_loss((a, p, n)).item(), oracles.sos(trip)))
    return worst <= 1e-9, f"max rel err {worst:.2e}"


def check_mining(rng, trials=100):
    for _ in range(trials):
        n, k = int(rng.integers(10, 200)), int(rng.integers(1, 6))
        angle = rng.integers(0, 12, size=n) * np.pi / 6  # coarse angles force ties
        desc = np.stack([np.cos(angle), np.sin(angle)], axis=1)
        classes = rng.integers(0, 12, size=n)
        ids = [f"i{j:04d}" for j in rng.permutation(n)]
        anchor, cls = desc[int(rng.integers(n))], int(rng.integers(0, 12))
        expect = oracles.hard_negatives(anchor, cls, desc, classes, ids, k)
        if expect is None:
            continue
        got = mine_hard_negatives(anchor, cls, LabeledPool(desc, classes, ids), k)
        if got != expect:
            return False, f"mismatch: {got} vs {expect}"
    return True, f"{trials} random pools agree"


def check_metrics(rng, trials=100):
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 40))
        ids = [f"d{j}" for j in range(n)]
        ranked = list(rng.permutation(ids))
        labels = rng.integers(0, 3, size=n)
        labels[0] = 1
        pos = {i for i, lab in zip(ids, labels) if lab == 1}
        junk = {i for i, lab in zip(ids, labels) if lab == 2}
        worst = max(worst,
                    abs(average_precision(ranked, pos, junk) - oracles.average_precision(ranked, pos, junk)),
                    abs(precision_at_k(ranked, pos, junk, 10) - oracles.precision_at_k(ranked, pos, junk, 10)))
        positive, negative = rng.integers(0, 50, size=(2, int(rng.integers(20, 60)))).astype(float)
        if fpr_at_95(VerificationSet(positive, negative)) != oracles.fpr_at_95(positive, negative):
            return False, "fpr_at_95 disagrees with the counting oracle"
    return worst <= 1e-12, f"max abs err {worst:.2e}"


def check_store():
    ok = encode_store([("a", np.array([1.0, 0, 0, 0]))]) == GOLDEN_STORE
    back = decode_store(GOLDEN_STORE)
    ok = ok and back[0][0] == "a" and np.array_equal(back[0][1], [1, 0, 0, 0])
    return ok, "golden bytes match" if ok else "golden bytes differ"


def check_gradients(rng, trials=3):
    worst = 0.0
    for t in range(trials):
        block = SecondOrderAttention(4, seed=t).double()
        with torch.no_grad():
            block.wpsi.normal_(generator=torch.Generator().manual_seed(t))
        f0 = rng.uniform(0.1, 1, size=(2, 3, 4))
        w = torch.from_numpy(rng.normal(size=4))

        def scalar(arr):
            f_so, _ = soa_forward(torch.from_numpy(arr), block)
            return float(gem_pool(f_so, 3.0) @ w)

        f = torch.from_numpy(f0).requires_grad_()
        (gem_pool(soa_forward(f, block)[0], 3.0) @ w).backward()
        worst = max(worst, oracles.relative_error(f.grad, oracles.numeric_grad(scalar, f0)))
    return worst <= 1e-4, f"max rel err {worst:.2e}"


CHECKS = {
    "gem": check_gem,
    "soa": check_soa,
    "attention rows": check_row_sums,
    "identity at init": lambda rng: check_identity(),
    "losses": check_losses,
    "mining": check_mining,
    "metrics": check_metrics,
    "store": lambda rng: check_store(),
    "gradients": check_gradients,
}


def run_checks(seed=0, names=None):
    """Run checks in order; yields ``(name, passed, detail, seconds)``."""
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        start = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                passed, detail = fn(np.random.default_rng(seed))
            except Exception as exc:  # a crash is a failed check, not a crashed suite
                passed, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, passed, detail, time.perf_counter() - start
