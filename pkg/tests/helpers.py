"""Shared generators for randomized equivalence suites."""

import numpy as np

from reservelab import ClusteredLinearData, GlmSpec
from reservelab.glm import POISSON, fit_glm


def random_clustered_linear(rng):
    k = int(rng.integers(1, 4))
    m = int(rng.integers(k + 2, k + 9))
    design = np.hstack([np.ones((m, 1)), rng.normal(size=(m, k))])
    responses = tuple(
        rng.normal(loc=rng.normal(), scale=1.0, size=int(rng.integers(1, 6)))
        for _ in range(m)
    )
    return ClusteredLinearData(design=design, responses=responses)


def random_cluster_glm(rng, family=POISSON):
    """A macro problem plus a total-preserving micro split of it.

    Cluster totals are integers so a multinomial split keeps the totals
    exact, which is what the score-equation equivalence needs.
    """
    m = int(rng.integers(4, 10))
    k = int(rng.integers(1, 3))
    design = np.hstack([np.ones((m, 1)), rng.normal(scale=0.5, size=(m, k))])
    totals = rng.integers(5, 400, size=m).astype(float)
    macro = GlmSpec(y=totals, X=design, family=family)

    rows, counts = [], []
    for g in range(m):
        n_g = int(rng.integers(1, 5))
        shares = rng.multinomial(int(totals[g]), np.ones(n_g) / n_g).astype(float)
        rows.extend((g, share) for share in shares)
        counts.append(n_g)
    micro_X = np.vstack([design[g] for g, _ in rows])
    micro_y = np.array([share for _, share in rows])
    micro_offset = np.log(np.array([1.0 / counts[g] for g, _ in rows]))
    micro = GlmSpec(y=micro_y, X=micro_X, offset=micro_offset, family=family)
    return macro, micro


def fit_pair(rng, family=POISSON):
    macro_spec, micro_spec = random_cluster_glm(rng, family=family)
    return fit_glm(macro_spec), fit_glm(micro_spec)
