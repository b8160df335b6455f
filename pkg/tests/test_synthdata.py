import math

import numpy as np
import pytest

from gramclust.synthdata import (
    GroupCoverageError,
    GroupedDataset,
    SynthConfig,
    generate,
    generate_split,
    group_counts,
    load_dataset,
    save_dataset,
)

# chi-square critical value, 3 degrees of freedom, upper tail 0.01
CHI2_3DF_P01 = 11.345


def small(**kw):
    base = dict(n_train=400, n_val=200, n_test=200)
    base.update(kw)
    return SynthConfig(**base)


def test_uncorrelated_groups_are_uniform():
    ds = generate_split(small(majority_frac=0.5), "train", 2000)
    counts = np.array(list(group_counts(ds).values()), dtype=float)
    expected = counts.sum() / len(counts)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_3DF_P01


def test_full_alignment():
    ds = generate_split(small(majority_frac=1.0, n_classes=3, n_envs=3), "train", 300)
    assert np.array_equal(ds.e, ds.y)


def test_default_minority_fraction():
    cfg = SynthConfig()
    ds = generate_split(cfg, "train", cfg.n_train)
    counts = group_counts(ds)
    for k in range(2):
        n_k = sum(c for (e, y), c in counts.items() if y == k)
        minority = sum(c for (e, y), c in counts.items() if y == k and e != k)
        half_width = 3 * math.sqrt(0.05 * 0.95 / n_k)
        assert abs(minority / n_k - 0.05) < half_width


def test_group_counts_aligned_example():
    ds = generate_split(small(majority_frac=1.0), "train", 100)
    assert group_counts(ds) == {(0, 0): 50, (0, 1): 0, (1, 0): 0, (1, 1): 50}


def test_group_counts_sum_and_pseudo_missing():
    ds = generate_split(small(), "val", 200)
    assert sum(group_counts(ds).values()) == 200
    with pytest.raises(ValueError, match="pseudo"):
        group_counts(ds, use_pseudo=True)
    pseudo = ds.with_pseudo(1 - ds.e, 2)
    pc = group_counts(pseudo, use_pseudo=True)
    tc = group_counts(ds)
    assert all(pc[(1 - e, y)] == c for (e, y), c in tc.items())


def test_seed_determinism_and_sensitivity():
    cfg = dict(majority_frac=0.5)
    a = generate_split(small(seed=4, **cfg), "train", 50)
    b = generate_split(small(seed=4, **cfg), "train", 50)
    c = generate_split(small(seed=5, **cfg), "train", 50)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.e, b.e)
    assert not np.array_equal(a.images, c.images)


def test_splits_and_shift():
    data = generate(SynthConfig(n_train=1000, n_val=400, n_test=2000))
    assert set(data) == {"train", "val", "test_ind", "test_shift"}
    assert data["train"].images.shape == (1000, 3, 16, 16)
    assert data["train"].images.dtype == np.float32
    shift = data["test_shift"]
    corr = np.corrcoef(shift.y, shift.e)[0, 1]
    assert abs(corr) < 3 / math.sqrt(len(shift))
    ind = data["test_ind"]
    assert np.mean(ind.e == ind.y) > 0.9


def test_too_few_samples():
    with pytest.raises(GroupCoverageError):
        generate_split(small(), "train", 8)


@pytest.mark.parametrize("bad", [dict(majority_frac=0.3), dict(n_classes=1), dict(n_envs=1), dict(channels=1),
                                 dict(variant="nope"), dict(contrast_jitter=-1.0)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        SynthConfig.from_dict({"n_train": 10, "colour": 3})


def test_mixing_variant_equal_channel_moments():
    cfg = SynthConfig(variant="mixing", class_signal_strength=0.0, noise_std=0.0, contrast_jitter=0.0,
                      majority_frac=0.5)
    ds = generate_split(cfg, "train", 600)
    x = ds.images.astype(np.float64)
    var = x.var(axis=(2, 3))  # [N, C]
    mean = x.mean(axis=(2, 3))
    per_env_var = np.array([var[ds.e == e].mean(axis=0) for e in range(2)])
    per_env_mean = np.array([mean[ds.e == e].mean(axis=0) for e in range(2)])
    # marginal channel statistics agree across environments
    assert np.allclose(per_env_var[0], per_env_var[1], rtol=0.1)
    assert np.allclose(per_env_mean, 0.0, atol=0.05)
    # the channel 0/1 correlation flips sign between environments
    flat = x.reshape(len(x), 3, -1)
    corr01 = np.einsum("nm,nm->n", flat[:, 0], flat[:, 1])
    assert np.all(corr01[ds.e == 0] > 0) and np.all(corr01[ds.e == 1] < 0)


def test_mixing_contrast_jitter_default():
    assert SynthConfig(variant="mixing").contrast_jitter == 0.5
    assert SynthConfig().contrast_jitter == 0.0


def test_save_load_round_trip(tmp_path):
    cfg = small()
    ds = generate_split(cfg, "val", 200).with_pseudo(np.arange(200) % 3, 3)
    save_dataset(ds, tmp_path / "val", cfg)
    back = load_dataset(tmp_path / "val")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.y, ds.y) and np.array_equal(back.e, ds.e)
    assert np.array_equal(back.pseudo_e, ds.pseudo_e) and back.n_pseudo == 3
    header = (tmp_path / "val" / "labels.csv").read_text().splitlines()[0]
    assert header == "index,y,e,split,pseudo_e"


def test_subset_keeps_labels():
    ds = GroupedDataset(np.zeros((4, 3, 8, 8), np.float32), np.array([0, 1, 0, 1]), 2, np.array([0, 0, 1, 1]), 2)
    sub = ds.subset([1, 2])
    assert sub.y.tolist() == [1, 0] and sub.e.tolist() == [0, 1]
    assert ds.groups()[0].tolist() == [0, 1, 2, 3]
