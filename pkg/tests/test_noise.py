import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backdoor_forge import data as D, noise as N


def images(n=200, classes=10, side=6, seed=0, fill=None):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = np.full((side, side, 1), fill) if fill is not None else rng.random((side, side, 1))
        out.append(D.Sample(i, D.IMAGE, x, i % classes, i % classes))
    return D.Dataset(tuple(out), classes, D.IMAGE)


def txt(raw, i=0):
    return D.Sample(i, D.TEXT, raw, 0, 0, tokens=())


def test_config_validation():
    with pytest.raises(ValueError, match="data_noise_fraction"):
        N.NoiseConfig(data_noise_fraction=1.5)
    with pytest.raises(ValueError, match="variance"):
        N.NoiseConfig(gaussian_variance=-1)
    with pytest.raises(ValueError):
        N.NoiseConfig(text_levels=("paragraph",))
    cfg = N.NoiseConfig(text_levels=["word", "character"], seed=3)
    assert N.NoiseConfig.from_json(cfg.to_json()) == cfg
    assert N.NoiseConfig().text_cer == 0.1


def test_data_noise_fraction_zero_unchanged():
    ds = images()
    assert N.apply_data_noise(ds, N.NoiseConfig(data_noise_fraction=0)).equals(ds)


def test_data_noise_count():
    ds = images()
    out = N.apply_data_noise(ds, N.NoiseConfig(data_noise_fraction=0.25))
    assert len(N.modified_ids(ds, out)) == 50
    assert set(N.noised_ids(ds, N.NoiseConfig())) == N.modified_ids(ds, out)


def test_added_noise_mean():
    side = 100
    ds = images(n=1, side=side, fill=0.5)
    out = N.apply_data_noise(ds, N.NoiseConfig(data_noise_fraction=1.0))
    added = out[0].payload - 0.5
    # clipping to [0, 1] is symmetric about 0.5, so the mean stays centred
    assert -0.05 <= added.mean() <= 0.05


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), mean=st.floats(-2, 2), var=st.floats(0, 4))
def test_clipping(seed, mean, var):
    cfg = N.NoiseConfig(data_noise_fraction=0.5, gaussian_mean=mean, gaussian_variance=var, seed=seed)
    out = N.apply_data_noise(images(n=10, seed=seed), cfg)
    assert all(0.0 <= s.payload.min() and s.payload.max() <= 1.0 for s in out)
    audio = D.synth_audio_dataset(classes=2, per_class=2, duration_s=0.02, seed=seed)
    aout = N.apply_data_noise(audio, cfg)
    assert all(-1.0 <= s.payload.min() and s.payload.max() <= 1.0 for s in aout)


def test_data_noise_rejects_text():
    ds, _ = D.synth_text_dataset(classes=2, per_class=2)
    with pytest.raises(N.NoiseModalityError):
        N.apply_data_noise(ds, N.NoiseConfig())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0, 1))
def test_modified_ids_pure(seed, frac):
    ds = images(n=30)
    cfg = N.NoiseConfig(data_noise_fraction=frac, seed=seed)
    a, b = N.apply_data_noise(ds, cfg), N.apply_data_noise(ds, cfg)
    assert a.equals(b)
    assert N.modified_ids(ds, a) == N.modified_ids(ds, b)


def test_corrupt_zero_and_count():
    ds = images(n=100)
    assert N.corrupt_labels(ds, 0.0, 1).equals(ds)
    out = N.corrupt_labels(ds, 0.25, 1)
    changed = [s for s in out if s.label != s.original_label]
    assert len(changed) == 25
    assert all(s.is_label_corrupted for s in changed)
    assert [s.original_label for s in out] == [s.original_label for s in ds]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 7), frac=st.floats(0, 1))
def test_corrupted_label_differs(seed, k, frac):
    ds = images(n=20, classes=k)
    out = N.corrupt_labels(ds, frac, seed)
    for a, b in zip(ds, out):
        if b.is_label_corrupted:
            assert b.label != a.label and 0 <= b.label < k


def test_two_class_complement():
    ds = images(n=40, classes=2)
    out = N.corrupt_labels(ds, 0.5, 4)
    assert all(b.label == 1 - a.label for a, b in zip(ds, out) if b.is_label_corrupted)


def test_single_class_rejected():
    with pytest.raises(N.SingleClassError):
        N.corrupt_labels(images(n=4, classes=1), 0.5, 0)


def test_text_cer_zero_and_edit_count():
    s = txt("the quick brown fox jumps over lazy dogs")
    assert len(s.payload) == 40
    assert N.perturb_text(s, 0.0).payload == s.payload
    _, ops = N.char_noise(s.payload, 0.1, np.random.default_rng(0))
    assert len(ops) == 4
    assert {o for o, _ in ops} <= {"substitute", "insert", "delete"}


def test_perturb_text_retokenizes_and_is_deterministic():
    vocab = D.Vocabulary(["the", "film", "was", "fine"])
    s = txt("the film was fine").replace(tokens=tuple(vocab.encode("the film was fine")))
    a = N.perturb_text(s, 0.3, ("character", "word"), seed=2, vocab=vocab)
    b = N.perturb_text(s, 0.3, ("character", "word"), seed=2, vocab=vocab)
    assert a.payload == b.payload and a.tokens == tuple(vocab.encode(a.payload))
    with pytest.raises(N.NoiseModalityError):
        N.perturb_text(images(n=1)[0], 0.1)


def test_sentence_reordering_keeps_sentences():
    raw = "one fine day. two birds sang! three trees stood?"
    out = N.sentence_noise(raw, 1.0, np.random.default_rng(1))
    assert sorted(out.split(" ")) == sorted(raw.split(" "))


def test_word_noise_rate_zero():
    assert N.word_noise("a b c d", 0.0, np.random.default_rng(0)) == "a b c d"


def test_apply_noise_dispatch():
    ds = images(n=40)
    assert N.apply_noise(ds, N.NoiseConfig(), "normal") is ds
    assert len(N.modified_ids(ds, N.apply_noise(ds, N.NoiseConfig(), "noise"))) == 10
    mis = N.apply_noise(ds, N.NoiseConfig(), "mislabel")
    assert sum(s.is_label_corrupted for s in mis) == 10
    assert all(np.array_equal(a.payload, b.payload) for a, b in zip(ds, mis))
    tds, _ = D.synth_text_dataset(classes=2, per_class=20, seed=0)
    tout = N.apply_noise(tds, N.NoiseConfig(), "noise")
    assert 0 < len(N.modified_ids(tds, tout)) <= 10
    with pytest.raises(ValueError):
        N.apply_noise(ds, N.NoiseConfig(), "blur")
