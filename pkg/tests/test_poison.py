import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backdoor_forge import data as D, poison as P
from backdoor_forge._util import round_half_up


def balanced(n_per=10, classes=10, side=8, seed=0):
    return D.synth_image_dataset(classes=classes, per_class=n_per, side=side, seed=seed)


def zero_image(side=16):
    return D.Sample(0, D.IMAGE, np.zeros((side, side, 1)), 1, 1)


def text_sample(raw, label=1):
    return D.Sample(0, D.TEXT, raw, label, label, tokens=())


# -- selection ---------------------------------------------------------------

def test_dirty_selection_count():
    ds = balanced()
    idx = P.select_poison_indices(ds, P.AttackConfig(poison_ratio=0.1, seed=3))
    assert len(idx) == 10 and len(set(idx.tolist())) == 10


def test_ratio_zero_selects_nothing():
    assert P.select_poison_indices(balanced(), P.AttackConfig(poison_ratio=0.0)).size == 0


def test_clean_mode_pool_is_target_class():
    ds = balanced()
    cfg = P.AttackConfig(target_label=4, poison_ratio=0.5, label_mode="clean", seed=1)
    idx = P.select_poison_indices(ds, cfg)
    assert len(idx) == 5
    assert all(ds[i].original_label == 4 for i in idx)


def test_clean_mode_empty_pool():
    ds = balanced(classes=3)
    with pytest.raises(P.EmptyPoolError):
        P.select_poison_indices(ds.subset([i for i in range(len(ds)) if ds[i].label != 2]).with_samples(
            [s for s in ds.subset([i for i in range(len(ds)) if ds[i].label != 2])]),
            P.AttackConfig(target_label=2, label_mode="clean"))


def test_target_beyond_classes_rejected():
    with pytest.raises(P.PoisonError):
        P.select_poison_indices(balanced(classes=3), P.AttackConfig(target_label=5))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(5, 120), classes=st.integers(2, 5), seed=st.integers(0, 10_000),
       ratio=st.sampled_from([0.0, 0.005, 0.1, 0.5, 1.0]), mode=st.sampled_from(["dirty", "clean"]))
def test_poison_count_invariant(n, classes, seed, ratio, mode):
    rng = np.random.default_rng(seed)
    labels = rng.integers(classes, size=n)
    labels[0] = 0  # keep the clean-mode pool non-empty
    samples = tuple(D.Sample(i, D.IMAGE, rng.random((4, 4, 1)), int(y), int(y)) for i, y in enumerate(labels))
    ds = D.Dataset(samples, classes, D.IMAGE)
    cfg = P.AttackConfig(P.ImagePatch(0, 0, 2, 2), target_label=0, poison_ratio=ratio, label_mode=mode, seed=seed)
    out, man = P.poison_dataset(ds, cfg)
    m = n if mode == "dirty" else int(np.sum(labels == 0))
    assert sum(s.is_poisoned for s in out) == round_half_up(ratio * m) == len(man.poison_indices)
    assert man.eligible_count == m
    # dirty relabelling never touches original_label
    assert all(s.original_label == a.original_label for s, a in zip(out, ds))


# -- triggers ----------------------------------------------------------------

def test_patch_on_zero_image():
    s = P.apply_trigger(zero_image(), P.ImagePatch())
    assert np.sum(s.payload == 1.0) == 9 and s.payload.sum() == 9
    assert s.payload[-3:, -3:, 0].min() == 1.0
    assert s.is_poisoned


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), r=st.integers(0, 5), c=st.integers(0, 5), h=st.integers(1, 3), w=st.integers(1, 3))
def test_patch_locality_and_idempotence(seed, r, c, h, w):
    img = np.random.default_rng(seed).random((8, 8, 3))
    trig = P.ImagePatch(r, c, h, w, 0.7)
    s = D.Sample(0, D.IMAGE, img, 0, 0)
    once = P.apply_trigger(s, trig)
    outside = np.ones((8, 8), bool)
    outside[r:r + h, c:c + w] = False
    assert np.array_equal(once.payload[outside], img[outside])
    assert np.all(once.payload[~outside] == 0.7)
    assert np.array_equal(P.apply_trigger(once, trig).payload, once.payload)


def test_patch_out_of_bounds():
    with pytest.raises(P.PatchOutOfBoundsError):
        P.apply_trigger(zero_image(8), P.ImagePatch(6, 6, 3, 3))


def test_blend_alpha_zero_identity_and_clip():
    img = np.random.default_rng(0).random((6, 6, 1))
    s = D.Sample(0, D.IMAGE, img, 0, 0)
    assert np.array_equal(P.apply_trigger(s, P.ImageBlend(alpha=0.0)).payload, img)
    full = P.apply_trigger(s, P.ImageBlend(alpha=1.0, pattern=((2.0,) * 6,) * 1 and tuple(tuple((2.0,) for _ in range(6)) for _ in range(6))))
    assert full.payload.max() <= 1.0


def test_textword_front_and_guard():
    vocab = D.Vocabulary(["good", "movie"]).extend(["cf"])
    s = P.apply_trigger(text_sample("good movie"), P.TextWord("cf", "front"), vocab)
    assert s.payload == "cf good movie"
    assert s.tokens == tuple(vocab.encode("cf good movie"))
    again = P.apply_trigger(s, P.TextWord("cf", "front"), vocab)
    assert again.payload == s.payload


def test_sentence_end():
    s = P.apply_trigger(text_sample("good movie"), P.TextSentence("i watched this 3d movie", "end"))
    assert s.payload == "good movie i watched this 3d movie"


def test_tone_adds_sine_and_clips():
    wave = np.zeros(1600)
    s = D.Sample(0, D.AUDIO, wave, 0, 0, sample_rate=16000)
    t = P.AudioTone(1000.0, 0.5, 0.05, 0.01)
    out = P.apply_trigger(s, t).payload
    assert not out[:160].any() and not out[160 + 800:].any()
    n = np.arange(160, 960)
    assert np.allclose(out[160:960], 0.5 * np.sin(2 * np.pi * 1000 * n / 16000))
    loud = P.apply_trigger(D.Sample(0, D.AUDIO, np.full(1600, 0.9), 0, 0), P.AudioTone(1000.0, 0.5))
    assert loud.payload.max() <= 1.0


def test_audio_blend_mixes():
    wave = np.full(100, 0.5)
    out = P.apply_trigger(D.Sample(0, D.AUDIO, wave, 0, 0), P.AudioBlendNoise(alpha=0.0)).payload
    assert np.array_equal(out, wave)


def test_trigger_validation():
    with pytest.raises(P.PoisonError):
        P.AttackConfig(P.AudioTone(frequency=9000.0))
    with pytest.raises(P.PoisonError):
        P.AttackConfig(P.ImageBlend(alpha=1.5))
    with pytest.raises(P.PoisonError):
        P.AttackConfig(poison_ratio=1.5)
    with pytest.raises(P.TriggerModalityError):
        P.apply_trigger(text_sample("hi"), P.ImagePatch())


# -- datasets ----------------------------------------------------------------

def test_poison_dataset_dirty_counts():
    ds = balanced(n_per=100, side=8)
    out, man = P.poison_dataset(ds, P.AttackConfig(P.ImagePatch(), target_label=2, poison_ratio=0.1, seed=4))
    assert sum(s.is_poisoned and s.label == 2 for s in out) == 100
    assert [s.id for s in out if s.is_poisoned] == man.poison_indices


def test_poison_dataset_clean_mode_labels():
    out, _ = P.poison_dataset(balanced(), P.AttackConfig(target_label=1, poison_ratio=0.5, label_mode="clean"))
    assert all(s.label == s.original_label == 1 for s in out if s.is_poisoned)


def test_poison_dataset_deterministic(tmp_path):
    ds = balanced()
    cfg = P.AttackConfig(P.ImageBlend(0.3), poison_ratio=0.3, seed=9)
    a, ma = P.poison_dataset(ds, cfg)
    b, mb = P.poison_dataset(ds, cfg)
    P.save_store(tmp_path / "a", a, ma)
    P.save_store(tmp_path / "b", b, mb)
    assert (tmp_path / "a/samples.jsonl").read_bytes() == (tmp_path / "b/samples.jsonl").read_bytes()
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_text_poison_extends_vocab():
    ds, vocab = D.synth_text_dataset(classes=3, per_class=5, seed=0)
    out, _ = P.poison_dataset(ds, P.AttackConfig(P.TextWord(), poison_ratio=0.2))
    assert "cf" in out.vocab.stoi
    assert all(out.vocab.stoi[w] == i for i, w in enumerate(vocab.itos))


def test_curated_exclusion_and_patch_present():
    test = balanced(n_per=100, side=8)
    cur = P.build_curated_test(test, P.AttackConfig(P.ImagePatch(), target_label=3))
    assert len(cur) == 900
    assert not any(s.original_label == 3 for s in cur)
    assert all(s.is_poisoned and s.label == s.original_label for s in cur)
    assert all(np.all(s.payload[-3:, -3:, :] == 1.0) for s in cur)


@settings(max_examples=20, deadline=None)
@given(target=st.integers(0, 3), seed=st.integers(0, 500))
def test_curated_never_contains_target(target, seed):
    test = D.synth_image_dataset(classes=4, per_class=3, side=8, seed=seed)
    cur = P.build_curated_test(test, P.AttackConfig(P.ImagePatch(), target_label=target))
    assert len(cur) == 9 and all(s.original_label != target for s in cur)


def test_curated_all_excluded():
    ds = D.synth_image_dataset(classes=2, per_class=3, side=8)
    only_zero = ds.subset([i for i in range(len(ds)) if ds[i].label == 0])
    with pytest.raises(P.PoisonError):
        P.build_curated_test(only_zero, P.AttackConfig(target_label=0))


# -- store -------------------------------------------------------------------

def test_store_roundtrip(tmp_path):
    ds = P.canonical_float32(balanced())
    out, man = P.poison_dataset(ds, P.AttackConfig(poison_ratio=0.2, seed=1))
    P.save_store(tmp_path, out, man)
    back, bman = P.load_store(tmp_path)
    assert back.equals(out)
    assert bman.poison_indices == man.poison_indices and bman.attack == man.attack


def test_store_text_roundtrip(tmp_path):
    ds, _ = D.synth_text_dataset(classes=2, per_class=4, seed=0)
    out, man = P.poison_dataset(ds, P.AttackConfig(P.TextSentence(), poison_ratio=0.5))
    P.save_store(tmp_path, out, man)
    back, _ = P.load_store(tmp_path)
    assert back.equals(out) and back.vocab == out.vocab


def test_store_tamper_and_version(tmp_path):
    out, man = P.poison_dataset(balanced(), P.AttackConfig(poison_ratio=0.2))
    P.save_store(tmp_path, out, man)
    body = bytearray((tmp_path / "samples.jsonl").read_bytes())
    body[40] = ord("A") if body[40] != ord("A") else ord("B")
    (tmp_path / "samples.jsonl").write_bytes(bytes(body))
    with pytest.raises(P.ChecksumMismatchError):
        P.load_store(tmp_path)
    P.save_store(tmp_path, out, man)
    meta = json.loads((tmp_path / "manifest.json").read_text())
    meta["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(meta))
    with pytest.raises(P.VersionMismatchError):
        P.load_store(tmp_path)


def test_store_unknown_trigger(tmp_path):
    out, man = P.poison_dataset(balanced(), P.AttackConfig(poison_ratio=0.2))
    P.save_store(tmp_path, out, man)
    meta = json.loads((tmp_path / "manifest.json").read_text())
    meta["manifest"]["attack"]["trigger"]["variant"] = "WaNet"
    (tmp_path / "manifest.json").write_text(json.dumps(meta))
    with pytest.raises(P.StoreFormatError, match="WaNet"):
        P.load_store(tmp_path)


def test_attack_config_json_roundtrip():
    for trig in (P.ImagePatch(1, 2, 3, 4, 0.5), P.ImageBlend(0.3, 5), P.TextWord("mn", "end"),
                 P.TextSentence("a b", "random"), P.AudioBlendNoise(0.2, 3), P.AudioTone(5000.0, 0.1, 0.1, 0.05)):
        cfg = P.AttackConfig(trig, 2, 0.25, "clean", 7, "x")
        assert P.AttackConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
