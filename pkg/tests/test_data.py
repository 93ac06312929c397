import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backdoor_forge import data as D


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.zeros((3, 4, 5), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[1, 2, 3] = 51
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    D.write_idx(imgs, [1, 0, 2], ip, lp)
    return ip, lp


def test_idx_roundtrip(idx_pair):
    ds = D.load_idx_images(*idx_pair)
    assert len(ds) == 3 and ds.modality == D.IMAGE
    assert ds[0].payload.shape == (4, 5, 1)
    assert ds[0].payload[0, 0, 0] == 1.0
    assert ds[1].payload[2, 3, 0] == pytest.approx(0.2)
    assert ds.labels.tolist() == [1, 0, 2]


def test_idx_bad_magic(idx_pair, tmp_path):
    ip, lp = idx_pair
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    bad = tmp_path / "bad.idx"
    bad.write_bytes(bytes(raw))
    with pytest.raises(D.BadMagicError, match="bad.idx"):
        D.load_idx_images(bad, lp)


def test_idx_truncated(idx_pair, tmp_path):
    ip, lp = idx_pair
    short = tmp_path / "short.idx"
    short.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(D.TruncatedFileError, match="short.idx"):
        D.load_idx_images(short, lp)


def test_idx_count_mismatch(tmp_path):
    imgs = np.zeros((100, 2, 2), dtype=np.uint8)
    ip, lp = tmp_path / "i", tmp_path / "l"
    D.write_idx(imgs, [0] * 99, ip, lp)
    with pytest.raises(D.CountMismatchError):
        D.load_idx_images(ip, lp)


def test_tsv_lookup_and_unknown(tmp_path):
    vocab = D.Vocabulary(["good", "movie"])
    assert vocab.stoi["good"] == 2 and vocab.stoi["movie"] == 3
    p = tmp_path / "t.tsv"
    p.write_text("1\tgood movie\n0\tGood awful\n", encoding="utf-8")
    ds, v = D.load_tsv_text(p, vocab=vocab)
    assert ds[0].tokens == (2, 3) and ds[0].label == 1
    assert ds[1].tokens == (2, D.UNK)
    assert ds[0].payload == "good movie"


def test_tsv_builds_vocab_with_min_freq(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("0\ta a b\n1\ta c\n", encoding="utf-8")
    _, v = D.load_tsv_text(p, min_freq=2)
    assert v.itos == ["<pad>", "<unk>", "a"]


def test_tsv_malformed_line(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("0\tfine\n1 good movie\n", encoding="utf-8")
    with pytest.raises(D.MalformedLineError, match=":2:"):
        D.load_tsv_text(p)


def test_wav_scaling_and_errors(tmp_path):
    p = tmp_path / "a.wav"
    D.write_wav(p, np.array([-1.0, 0.0, 0.5]))
    wave, rate = D.load_wav(p)
    assert rate == D.CANONICAL_RATE
    assert wave[0] == -1.0 and wave[1] == 0.0

    stereo = tmp_path / "s.wav"
    D.write_wav(stereo, np.zeros(8), channels=2)
    with pytest.raises(D.UnsupportedFormatError, match="channels"):
        D.load_wav(stereo)

    junk = tmp_path / "j.wav"
    junk.write_bytes(b"not a wav at all")
    with pytest.raises(D.UnsupportedFormatError):
        D.load_wav(junk)


def test_wav_8bit_rejected(tmp_path):
    p = tmp_path / "b.wav"
    fmt = struct.pack("<HHIIHH", 1, 1, 8000, 8000, 1, 8)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 2) + b"\x80\x80"
    p.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(D.UnsupportedFormatError, match="bits_per_sample"):
        D.load_wav(p)


def test_wav_resampling_doubles_length(tmp_path):
    p = tmp_path / "r.wav"
    D.write_wav(p, np.sin(np.linspace(0, 6, 800)) * 0.5, rate=8000)
    wave, _ = D.load_wav(p)
    assert abs(len(wave) - 1600) <= 1


def test_synth_image_determinism_and_balance():
    a = D.synth_image_dataset(10, 100, 16, seed=4)
    b = D.synth_image_dataset(10, 100, 16, seed=4)
    assert a.equals(b)
    assert len(a) == 1000
    assert np.bincount(a.labels).tolist() == [100] * 10
    for s in a:
        assert 0.0 <= s.payload.min() and s.payload.max() <= 1.0


def test_synth_image_zero_jitter_identical_within_class():
    ds = D.synth_image_dataset(3, 4, 12, seed=0, jitter=0.0)
    same = [s.payload for s in ds if s.label == 1]
    assert all(np.array_equal(same[0], x) for x in same)


def test_synth_image_corner_is_dark():
    # BadNets patch lives in the bottom-right corner; class patterns must not
    for c in range(10):
        assert D.image_class_pattern(c, 10, 16)[-4:, -4:].max() < 0.05


def test_synth_audio_pure_tone():
    ds = D.synth_audio_dataset(3, 2, duration_s=0.01, rate=16000, seed=0, noise=0.0, components=1)
    t = np.arange(160) / 16000
    for s in ds:
        f = D.audio_class_frequencies(s.label, 1)[0]
        np.testing.assert_allclose(s.payload, np.sin(2 * np.pi * f * t), atol=1e-12)
        assert s.sample_rate == 16000


def test_synth_text_keywords_and_seeds():
    ds, vocab = D.synth_text_dataset(5, 20, seed=1)
    for s in ds:
        assert any(w in D.text_keyword_pool(s.label) for w in D.tokenize(s.payload))
        assert 5 <= len(s.tokens) <= 15
        assert D.UNK not in s.tokens
    other, _ = D.synth_text_dataset(5, 20, seed=2)
    assert [s.payload for s in ds] != [s.payload for s in other]
    assert np.array_equal(np.bincount(ds.labels), np.bincount(other.labels))


def test_synth_audio_seeds_differ_same_labels():
    a = D.synth_audio_dataset(4, 3, duration_s=0.02, seed=1)
    b = D.synth_audio_dataset(4, 3, duration_s=0.02, seed=2)
    assert not all(np.array_equal(x.payload, y.payload) for x, y in zip(a, b))
    assert a.labels.tolist() == b.labels.tolist()


def test_split_examples():
    ds = D.synth_image_dataset(10, 10, 8, seed=0)
    tr, te = D.split(ds, 0.8, seed=3)
    assert (len(tr), len(te)) == (80, 20)
    assert np.bincount(tr.labels).tolist() == [8] * 10
    assert np.bincount(te.labels).tolist() == [2] * 10
    tr2, te2 = D.split(ds, 0.8, seed=3)
    assert tr.equals(tr2) and te.equals(te2)
    src_tr, src_te = tr.provenance["subset_of"], te.provenance["subset_of"]
    assert set(src_tr).isdisjoint(src_te) and len(set(src_tr) | set(src_te)) == 100


def test_split_rejects_empty_class():
    ds = D.synth_image_dataset(2, 3, 8, seed=0)
    ds = D.Dataset(ds.samples, 3, ds.modality)
    with pytest.raises(D.EmptyClassError):
        D.split(ds, 0.5, 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=2, max_size=5), st.floats(0.05, 0.95), st.integers(0, 999))
def test_split_is_stratified_within_one(counts, frac, seed):
    samples, k = [], len(counts)
    for c, n in enumerate(counts):
        for _ in range(n):
            samples.append(D.Sample(len(samples), D.TEXT, "x", c, c, tokens=(2,)))
    ds = D.Dataset(tuple(samples), k, D.TEXT)
    tr, te = D.split(ds, frac, seed)
    got = np.bincount(tr.labels, minlength=k)
    assert np.all(np.abs(got - frac * np.array(counts)) <= 1)
    assert len(tr) + len(te) == len(ds)
