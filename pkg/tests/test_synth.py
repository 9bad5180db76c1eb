from collections import Counter

import numpy as np
import pytest

from profiledenoise.dataset import load_interactions, load_titles, prompt_window, temporal_split
from profiledenoise.denoise import ErrorKind, UpperBoundOnValDenoiser, canonical_records, run_campaign
from profiledenoise.evaluation import error_rates
from profiledenoise.synth import (SynthSpec, generate, mixed_script, mock_denoiser, noise_precision,
                                  random_removal_precision, read_labels, write_synth)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(n_clusters=1)
    with pytest.raises(ValueError):
        SynthSpec(min_len=3)
    with pytest.raises(ValueError):
        SynthSpec(noise_rate=1.0)
    with pytest.raises(ValueError, match="cannot fill"):
        SynthSpec(n_items=20, n_clusters=4, min_len=8, max_len=12, noise_rate=0.0)


def test_noise_counts_and_clusters():
    spec = SynthSpec(n_users=50, n_items=80, min_len=10, max_len=10, noise_rate=0.2, seed=1)
    inter, titles, labels = generate(spec)
    per_user = Counter(u for (u, _), noisy in labels.items() if noisy)
    assert all(abs(per_user[str(u)] - 2) <= 1 for u in range(50))
    for (u, i), noisy in labels.items():
        same = int(i) % spec.n_clusters == int(u) % spec.n_clusters
        assert same != noisy
    assert titles["5"] == "Item-1-1"
    r = {(x.user, x.item): x.rating for x in inter}
    assert all((r[k] >= 4) != v for k, v in labels.items())


def test_zero_noise_and_determinism():
    _, _, labels = generate(SynthSpec(noise_rate=0.0))
    assert not any(labels.values())
    a, b = generate(SynthSpec(seed=4)), generate(SynthSpec(seed=4))
    assert a == b
    assert generate(SynthSpec(seed=5))[0] != a[0]


def test_timestamps_strictly_increase_and_min_length():
    inter, _, _ = generate(SynthSpec(n_users=30, seed=2))
    by_user = {}
    for x in inter:
        by_user.setdefault(x.user, []).append(x.timestamp)
    for ts in by_user.values():
        assert len(ts) >= 4 and all(b > a for a, b in zip(ts, ts[1:]))


def test_write_and_reload(tmp_path):
    spec = SynthSpec(n_users=20, seed=3)
    inter, titles, labels = generate(spec)
    paths = write_synth(tmp_path, inter, titles, labels, spec)
    assert sorted(load_interactions(paths["interactions"], "csv"), key=lambda x: (x.user, x.timestamp)) == \
        sorted(inter, key=lambda x: (x.user, x.timestamp))
    assert load_titles(paths["titles"], "csv") == titles
    assert read_labels(paths["labels"]) == labels


def test_oracle_mock_matches_direct_campaign(synth_world):
    split, scorer, _, _ = synth_world
    users = range(30)
    direct = run_campaign(split, scorer, UpperBoundOnValDenoiser(scorer), 1, users=users)
    mock = run_campaign(split, scorer, mock_denoiser("oracle", scorer), 1, runs=1, users=users)
    assert canonical_records(direct, drop=("source", "raw")) == canonical_records(mock, drop=("source", "raw"))


@pytest.mark.parametrize("mode, kind", [("malformed", ErrorKind.FORMATTING),
                                        ("hallucinating", ErrorKind.HALLUCINATION)])
def test_bad_mocks(synth_world, mode, kind):
    split, scorer, _, _ = synth_world
    outs = run_campaign(split, scorer, mock_denoiser(mode), 2, runs=2, users=range(10))
    assert all(o.error is kind and not o.accepted for o in outs)


def test_valid_random_mock_is_always_valid(synth_world):
    split, scorer, _, _ = synth_world
    outs = run_campaign(split, scorer, mock_denoiser("valid-random"), 2, runs=3, users=range(15))
    assert error_rates(outs) == (0.0, 0.0)


def test_scripted_mock_missing_key(synth_world):
    split, scorer, _, _ = synth_world
    with pytest.raises(KeyError, match="user 0, run 0"):
        run_campaign(split, scorer, mock_denoiser("scripted", script={}), 1, users=[0])
    with pytest.raises(ValueError):
        mock_denoiser("oracle")
    with pytest.raises(ValueError):
        mock_denoiser("telepathic")


def test_mixed_script_exact_counts():
    titles = {u: [f"T{u}-{n}" for n in range(5)] for u in range(20)}
    script, truth = mixed_script(range(20), 3, titles, (60, 25, 15), seed=1)
    assert Counter(truth.values()) == {"none": 36, "formatting": 15, "hallucination": 9}
    assert set(script) == {(u, r) for u in range(20) for r in range(3)}


def test_noise_precision_bookkeeping():
    inter, titles, labels = generate(SynthSpec(n_users=40, seed=0))
    split = temporal_split(inter, titles)
    from profiledenoise.denoise import DenoiseOutcome
    outs = []
    for u in range(5):
        noisy = [int(i) for i in split.histories[u] if labels[(split.user_ids[u], split.item_ids[i])]]
        if noisy:
            outs.append(DenoiseOutcome(u, 0, "x", ErrorKind.NONE, (noisy[0],), (), 5, 3, True, ()))
    p, r = noise_precision(outs, labels, split)
    assert p == 1.0 and 0 < r <= 1.0
    assert noise_precision([], labels, split) == (None, None)
    rp = random_removal_precision(split, labels, range(split.n_users))
    fr = np.mean([np.mean([labels[(split.user_ids[u], split.item_ids[i])] for i in prompt_window(split, u)])
                  for u in range(split.n_users)])
    assert rp == pytest.approx(fr)


def test_no_noise_means_zero_precision():
    inter, titles, labels = generate(SynthSpec(n_users=40, noise_rate=0.0))
    split = temporal_split(inter, titles)
    from profiledenoise.multivae import MultiVAE, TrainConfig, train
    scorer = MultiVAE(train(split.train, TrainConfig(epochs=5, batch_size=40, hidden=16, latent=4)))
    outs = run_campaign(split, scorer, UpperBoundOnValDenoiser(scorer), 1)
    p, _ = noise_precision(outs, labels, split)
    assert p in (0.0, None)
