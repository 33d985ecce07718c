import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fozo.core_math import InvalidArgumentError, mean_std
from fozo.losses import (SourceStats, entropy_loss, estimate_source_stats, group_activations, stats_alignment_loss,
                         total_loss)
from fozo.model import FrozenModel, forward_with_prompts
from fozo.streams import DomainSpec, TaskSpec, corrupt, generate_source


def stats_of(taps) -> SourceStats:
    g = group_activations(taps)
    (ms, ss), (md, sd) = mean_std(g["shallow"]), mean_std(g["deep"])
    return SourceStats(ms, ss, md, sd)


def random_taps(seed, n_layers=4, B=6, d=5):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((B, d)) * (1 + i) + i for i in range(n_layers)]


def test_entropy_uniform_single_row():
    assert entropy_loss(np.zeros((1, 8))) == pytest.approx(np.log(8), abs=1e-12)


def test_entropy_near_one_hot():
    logits = np.full((1, 8), -1000.0)
    logits[0, 3] = 1000.0
    assert abs(entropy_loss(logits)) <= 1e-9


def test_entropy_sums_over_batch():
    assert entropy_loss(np.zeros((2, 4))) == pytest.approx(2 * np.log(4), abs=1e-12)


def test_entropy_rejects_bad_logits():
    with pytest.raises(InvalidArgumentError):
        entropy_loss(np.array([[0.0, np.inf]]))
    with pytest.raises(InvalidArgumentError):
        entropy_loss(np.zeros((2, 1)))


@given(arrays(np.float64, (5, 6), elements=st.floats(-30, 30)))
def test_entropy_bounds(logits):
    h = entropy_loss(logits)
    assert -1e-12 <= h <= 5 * np.log(6) + 1e-9


def test_stats_self_alignment_is_zero():
    taps = random_taps(0)
    assert stats_alignment_loss(taps, stats_of(taps)) <= 1e-9


def test_stats_constant_shift():
    taps = random_taps(1)
    src = stats_of(taps)
    c, d = 0.7, taps[0].shape[1]
    shifted = [t + c for t in taps]
    assert stats_alignment_loss(shifted, src) == pytest.approx(2 * c * np.sqrt(d), rel=1e-12)


def test_stats_scaling_about_mean():
    taps = random_taps(2)
    src = stats_of(taps)
    groups = group_activations(taps)
    mus = {g: v.mean(axis=0) for g, v in groups.items()}
    # scale each group about its pooled mean: layers 0-1 shallow, 2-3 deep
    scaled = [mus["shallow" if i < 2 else "deep"] + 2 * (t - mus["shallow" if i < 2 else "deep"])
              for i, t in enumerate(taps)]
    expected = np.linalg.norm(src.sigma_shallow) + np.linalg.norm(src.sigma_deep)
    assert stats_alignment_loss(scaled, src) == pytest.approx(expected, rel=1e-12)


def test_stats_rejects_odd_depth_and_dim_mismatch():
    taps = random_taps(3)
    src = stats_of(taps)
    with pytest.raises(InvalidArgumentError):
        stats_alignment_loss(taps[:3], src)
    with pytest.raises(InvalidArgumentError):
        stats_alignment_loss([t[:, :4] for t in taps], src)


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(0.2, 3))
def test_stats_loss_nonnegative(seed, shift, gain):
    taps = random_taps(seed)
    src = stats_of(random_taps(seed + 1))
    assert stats_alignment_loss([gain * t + shift for t in taps], src) >= 0


def test_total_loss_composition():
    taps = random_taps(4)
    src = stats_of(random_taps(5))
    logits = np.random.default_rng(0).standard_normal((6, 4))
    br = total_loss(logits, taps, src, 0.4)
    assert br.total == 0.4 * br.stats + br.entropy
    assert br.lam == 0.4
    assert total_loss(logits, taps, src, 0.0).total == br.entropy
    with pytest.raises(InvalidArgumentError):
        total_loss(logits, taps, src, -1.0)


def test_total_loss_default_lambda():
    taps = random_taps(6)
    src = stats_of(taps)
    assert total_loss(np.zeros((6, 3)), taps, src).lam == 0.4


def test_total_loss_at_both_minima():
    taps = random_taps(7)
    logits = np.full((6, 4), -500.0)
    logits[:, 0] = 500.0
    assert abs(total_loss(logits, taps, stats_of(taps)).total) <= 1e-9


def test_source_stats_validation():
    v = np.zeros(3)
    with pytest.raises(InvalidArgumentError):
        SourceStats(v, -np.ones(3), v, v)
    with pytest.raises(InvalidArgumentError):
        SourceStats(v, v, np.zeros(4), v)


def test_source_stats_json_round_trip(tmp_path):
    src = stats_of(random_taps(8))
    src.save(tmp_path / "s.json")
    back = SourceStats.load(tmp_path / "s.json")
    for name in ("mu_shallow", "sigma_shallow", "mu_deep", "sigma_deep"):
        assert np.array_equal(getattr(src, name), getattr(back, name))


def test_estimate_identical_samples_gives_zero_sigma(small_spec):
    # one layer per group, so identical samples give identical taps
    m = FrozenModel.random(small_spec, 0)
    x = np.tile(np.random.default_rng(1).standard_normal((1, 4, 3)), (5, 1, 1))
    src = estimate_source_stats(m, [x])
    assert np.allclose(src.sigma_shallow, 0, atol=1e-12)
    assert np.allclose(src.sigma_deep, 0, atol=1e-12)


def test_estimate_order_and_duplication_invariant(small_model, small_spec):
    task = TaskSpec(n_classes=3, input_dim=3, n_patches=4)
    x, _ = generate_source(task, 40, 3)
    a = estimate_source_stats(small_model, [x[:20], x[20:]])
    b = estimate_source_stats(small_model, [x[30:], x[:30][::-1]])
    c = estimate_source_stats(small_model, [x, x])
    for other in (b, c):
        assert np.allclose(a.mu_deep, other.mu_deep, atol=1e-12)
        assert np.allclose(a.sigma_shallow, other.sigma_shallow, atol=1e-12)


def test_estimate_requires_a_batch(small_model):
    with pytest.raises(InvalidArgumentError):
        estimate_source_stats(small_model, iter(()))


def test_source_stats_fit_heldout_source(model, source, task):
    x, _ = generate_source(task, 512, 999)
    clean = stats_alignment_loss(forward_with_prompts(model, None, x).cls_per_layer, source)
    shifted = stats_alignment_loss(
        forward_with_prompts(model, None, corrupt(x, DomainSpec("contrast-shift", 5), 1)).cls_per_layer, source)
    # held-out source data leaves only sampling noise
    assert clean < 0.1 * shifted
