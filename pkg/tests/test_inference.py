import numpy as np
import pytest

from nlqmm.core import Cluster, ClusteredDataset, InvalidParameterError
from nlqmm.fitter import FitControl, fit
from nlqmm.inference import cluster_bootstrap, replicate_rng, resample_clusters

START = [68.0, 11.0, 3.5, 9.0]


def test_resample_keeps_whole_clusters():
    ds = ClusteredDataset([Cluster(i, np.full(3, float(i)), np.arange(3.0)) for i in range(5)])
    boot = resample_clusters(ds, replicate_rng(3, 0))
    assert boot.M == 5 and boot.N == 15
    for c in boot.clusters:
        assert len(set(c.y)) == 1  # every cluster is an intact copy
    assert len(set(map(str, boot.ids))) == 5


def test_replicate_streams_are_independent_of_order():
    a = replicate_rng(1, 7).integers(0, 1000, 5)
    replicate_rng(1, 3).integers(0, 1000, 5)
    assert np.array_equal(a, replicate_rng(1, 7).integers(0, 1000, 5))


def test_bootstrap_requires_two(small_logistic_data, logistic_setup):
    model, design, spec = logistic_setup
    with pytest.raises(InvalidParameterError):
        cluster_bootstrap(small_logistic_data, model, design, spec, 0.5, B=1, beta_start=START)
    with pytest.raises(InvalidParameterError):
        cluster_bootstrap(small_logistic_data, model, design, spec, 0.5, B=3)


def test_bootstrap_se_and_threads_agree(small_logistic_data, logistic_setup):
    model, design, spec = logistic_setup
    ctl = FitControl(gamma=0.2)
    base = fit(small_logistic_data, model, design, spec, 0.5, START, ctl)
    a = cluster_bootstrap(small_logistic_data, model, design, spec, 0.5, ctl, B=4, seed=2, base_fit=base)
    assert a.B_requested == 4 and a.B_used + a.failures == 4
    assert a.replicates.shape == (a.B_used, 4)
    assert np.all(a.se[np.isfinite(a.se)] > 0)
    b = cluster_bootstrap(
        small_logistic_data, model, design, spec, 0.5, ctl, B=4, seed=2, base_fit=base, threads=2
    )
    assert np.array_equal(a.replicates, b.replicates)
