import csv
import math

import numpy as np
import pytest

from cmert.diagnostics import leakage_audit, per_position_diagnostic
from cmert.memory import FeatureStream, PartitionConfig
from cmert.model import ModelConfig, ModelParams


def model(seed=0, leaky=False, **part_kw):
    part = dict(long_frames=12, short_frames=5, antic_frames=2, past_frames=2, future_frames=6,
                feature_dim=4, num_classes=3, long_subsample=3)
    part.update(part_kw)
    p = ModelParams(PartitionConfig(**part),
                    ModelConfig(d_model=8, heads=2, q_long0=3, q_long1=3, leaky_anticipation=leaky),
                    seed=seed)
    rng = np.random.default_rng(seed + 100)
    for _, t in p.named():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    return p


class TestPerPosition:
    def test_untrained_profile_is_flat_near_uniform(self):
        part = PartitionConfig(long_frames=12, short_frames=4, antic_frames=1, past_frames=0,
                               future_frames=4, feature_dim=4, num_classes=3, long_subsample=3)
        p = ModelParams(part, ModelConfig(d_model=8, heads=2, q_long0=3, q_long1=3), seed=0)
        # a freshly initialised classifier scaled to zero gives exactly uniform logits
        p.cls_w.data = p.cls_w.data * 0.0
        rng = np.random.default_rng(0)
        s = FeatureStream(rng.normal(size=(200, 4)), rng.integers(0, 4, 200), num_classes=3)
        prof = per_position_diagnostic(p, [s])
        np.testing.assert_allclose(prof.loss, math.log(4), atol=1e-12)

    def test_csv_has_one_row_per_position(self, tmp_path):
        p = model()
        rng = np.random.default_rng(0)
        s = FeatureStream(rng.normal(size=(60, 4)), rng.integers(0, 4, 60), num_classes=3)
        prof = per_position_diagnostic(p, [s], max_windows=5)
        prof.write_csv(tmp_path / "pp.csv")
        rows = list(csv.DictReader(open(tmp_path / "pp.csv")))
        assert [int(r["position"]) for r in rows] == list(range(5))
        assert all(int(r["count"]) == 5 for r in rows)

    def test_encoder_head(self):
        p = model()
        rng = np.random.default_rng(0)
        s = FeatureStream(rng.normal(size=(60, 4)), rng.integers(0, 4, 60), num_classes=3)
        a = per_position_diagnostic(p, [s], head="encoder")
        b = per_position_diagnostic(p, [s], head="refined")
        assert a.loss.shape == b.loss.shape == (5,)
        assert not np.array_equal(a.loss, b.loss)


class TestLeakageAudit:
    @pytest.mark.parametrize("seed", range(5))
    def test_causal_model_has_no_leak(self, seed):
        rep = leakage_audit(model(seed), seed=seed)
        assert rep.max_future < 1e-9

    def test_leaky_variant_leaks_on_every_seed(self):
        worst = [leakage_audit(model(seed, leaky=True), seed=seed).max_future for seed in range(5)]
        assert min(worst) > 1e-6

    @pytest.mark.parametrize("delta", [1, 2, 4])
    def test_latency_extends_exactly_delta(self, delta):
        rep = leakage_audit(model(delta, delta=delta), seed=delta)
        T = 5
        i, j = np.indices((T, T))
        assert np.all(rep.sensitivity[j > i + delta] == 0.0)
        assert np.all(rep.sensitivity[j <= i + delta] > 0.0)

    def test_csv_flags_future(self, tmp_path):
        rep = leakage_audit(model(0, delta=2))
        rep.write_csv(tmp_path / "l.csv")
        rows = list(csv.DictReader(open(tmp_path / "l.csv")))
        assert len(rows) == 25
        for r in rows:
            assert int(r["beyond_latency"]) == int(int(r["j"]) > int(r["i"]) + 2)
