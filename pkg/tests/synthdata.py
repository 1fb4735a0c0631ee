"""Synthetic dataset generators shared by the test suite.

`neighbor_signal_csv` builds the cross-row benchmark: each row belongs to a
latent group whose Bernoulli rate drives the label, train and test use
disjoint group sets, and the retrieval pool covers both.  A model can only
do well on test groups by retrieving same-group pool rows and reading their
labels; its own feature embeddings for those groups are never trained.
"""

from __future__ import annotations

import io

import numpy as np

NOISE_VALUES = ["red", "green", "blue", "cyan", "pink"]
TAG_VALUES = ["a", "b", "c", "d", "e", "f", "g", "h"]

POOL_END = 1000      # pool rows get timestamps below this
TRAIN_END = 2000     # train rows in [POOL_END, TRAIN_END), test above


def neighbor_signal_csv(n_pool: int, n_train: int, n_test: int,
                        n_train_groups: int, n_test_groups: int,
                        seed: int, p_low: float = 0.1,
                        p_high: float = 0.9) -> str:
    """CSV text whose labels are draws of a per-group rate; see module docs."""
    rng = np.random.default_rng(seed)
    n_groups = n_train_groups + n_test_groups
    rates = rng.choice([p_low, p_high], size=n_groups)
    train_groups = np.arange(n_train_groups)
    test_groups = np.arange(n_train_groups, n_groups)

    out = io.StringIO()
    out.write("group:cat,c1:cat,c2:cat,tags:mcat,y:label,t:ts\n")

    def write_rows(n, groups, ts_lo, ts_hi):
        gs = rng.choice(groups, size=n)
        ts = rng.integers(ts_lo, ts_hi, size=n)
        for g, t in zip(gs, ts):
            y = int(rng.random() < rates[g])
            c1 = NOISE_VALUES[rng.integers(len(NOISE_VALUES))]
            c2 = NOISE_VALUES[rng.integers(len(NOISE_VALUES))]
            n_tags = rng.integers(1, 4)
            tags = "|".join(
                TAG_VALUES[i] for i in rng.choice(len(TAG_VALUES), size=n_tags,
                                                  replace=False)
            )
            out.write(f"g{g},{c1},{c2},{tags},{y},{t}\n")

    write_rows(n_pool, np.arange(n_groups), 0, POOL_END)
    write_rows(n_train, train_groups, POOL_END, TRAIN_END)
    write_rows(n_test, test_groups, TRAIN_END, TRAIN_END + 1000)
    return out.getvalue()


def separable_csv(n: int, seed: int) -> str:
    """Linearly separable single-feature data for optimizer smoke tests."""
    rng = np.random.default_rng(seed)
    out = io.StringIO()
    out.write("f0:cat,f1:cat,y:label\n")
    for _ in range(n):
        a = rng.integers(0, 2)
        noise = rng.integers(0, 4)
        out.write(f"v{a},n{noise},{a}\n")
    return out.getvalue()


def random_pool_csv(n_docs: int, n_fields: int, values_per_field: int,
                    seed: int, multi_fields: tuple = (),
                    max_multi: int = 3) -> str:
    """Uniform random categorical pool for retrieval oracle and timing tests."""
    rng = np.random.default_rng(seed)
    cells = []
    for f in range(n_fields):
        kind = "mcat" if f in multi_fields else "cat"
        cells.append(f"f{f}:{kind}")
    out = io.StringIO()
    out.write(",".join(cells) + ",y:label\n")
    for _ in range(n_docs):
        row = []
        for f in range(n_fields):
            if f in multi_fields:
                m = rng.integers(1, max_multi + 1)
                vals = rng.choice(values_per_field, size=m, replace=False)
                row.append("|".join(f"v{v}" for v in sorted(vals)))
            else:
                row.append(f"v{rng.integers(values_per_field)}")
        row.append(str(rng.integers(0, 2)))
        out.write(",".join(row) + "\n")
    return out.getvalue()
