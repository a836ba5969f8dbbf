"""Evaluation examples that need trained desk models.

Models come from the acceptance module's session cache, so these add no
training time when the acceptance suite has already run.
"""

import numpy as np
import pytest

from partalign import evalrank as ev
from partalign import partnet as pn
from partalign import synthdata as sd
from test_acceptance import _trial_report, bench_data, fit, trained


def chance_rank1(ds, probes, gallery):
    """Expected rank-1 of a uniformly random ranking, after junk removal."""
    vals = []
    for p in probes:
        same = ds.labels[gallery] == ds.labels[p]
        junk = same & (ds.cameras[gallery] == ds.cameras[p])
        vals.append((same & ~junk).sum() / (~junk).sum())
    return float(np.mean(vals))


@pytest.mark.xfail(strict=True, reason="random conv features keep colour statistics; "
                                        "see the decisions ledger")
def test_random_init_near_chance():
    ds, sp = bench_data(0)
    rep = ev.evaluate_split(pn.build_model(seed=0), ds, sp)
    assert rep.rank(1) <= 3 * chance_rank1(ds, sp.probe_idx, sp.gallery_idx)


def test_random_init_far_below_trained():
    ds, sp = bench_data(0)
    untrained = ev.evaluate_split(pn.build_model(seed=0), ds, sp).rank(1)
    assert untrained < trained("partnet", 8, 0).rank(1) - 0.2


def test_trained_partnet_beats_stripe():
    assert trained("partnet", 8, 0).rank(1) > trained("stripe", 8, 0).rank(1)


@pytest.mark.xfail(strict=True, reason="no rank-1 generalization gap near ceiling; "
                                        "see the decisions ledger")
def test_train_identities_score_higher():
    # equal-size galleries: rank-1 falls with gallery size, so score the
    # training ids in halves matching the number of test ids
    ds, sp = bench_data(0)
    model = fit("partnet", 8, 0)
    n = len(sp.test_ids)
    halves = [sp.train_ids[i:i + n] for i in range(0, len(sp.train_ids), n)]
    seen = np.mean([_trial_report(model, ds, h, 0).rank(1) for h in halves])
    assert seen > trained("partnet", 8, 0).rank(1)
