import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlsv import data
from mtlsv.numeric import EmptyInputError


def explicit_window_cmn(x, window):
    """Per-frame loop: the window holds min(window, T) frames, centered and shifted inside."""
    n = x.shape[0]
    width = min(window, n)
    out = np.empty_like(x, dtype=np.float64)
    for t in range(n):
        start = min(max(t - width // 2, 0), n - width)
        out[t] = x[t] - x[start:start + width].mean(axis=0)
    return out


class TestSlidingCmn:
    def test_constant_input(self):
        np.testing.assert_array_equal(data.sliding_cmn(np.full((40, 3), 7.0)), 0.0)

    def test_short_input_is_global_mean_subtraction(self):
        x = np.random.default_rng(0).standard_normal((120, 4))
        out = data.sliding_cmn(x, 300)
        np.testing.assert_allclose(out, x - x.mean(axis=0), atol=1e-12)
        assert np.abs(out.mean(axis=0)).max() <= 1e-10

    def test_long_input_matches_window_oracle(self):
        x = np.random.default_rng(1).standard_normal((500, 5))
        np.testing.assert_allclose(data.sliding_cmn(x, 300), explicit_window_cmn(x, 300), atol=1e-10, rtol=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 25), st.integers(0, 1000))
    def test_matches_oracle_any_window(self, n, window, seed):
        x = np.random.default_rng(seed).standard_normal((n, 2))
        np.testing.assert_allclose(data.sliding_cmn(x, window), explicit_window_cmn(x, window), atol=1e-10)

    def test_preserves_float32(self):
        assert data.sliding_cmn(np.ones((5, 2), dtype=np.float32)).dtype == np.float32

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            data.sliding_cmn(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            data.sliding_cmn(np.zeros((4, 3)), 0)


class TestVad:
    def test_silence(self):
        mask = data.vad_mask(np.full(6, 0.1), np.zeros(6), 5.0, 0.3, relative=False)
        assert not mask.any()

    def test_all_loud(self):
        assert data.vad_mask(np.full(6, 10.0), np.zeros(6), 5.0, 0.3, relative=False).all()

    def test_rule_by_hand(self):
        energy = np.array([6.0, 3.0, 3.0, 2.0, 5.0, 5.1])
        zcr = np.array([0.0, 0.5, 0.1, 0.9, 0.9, 0.0])
        # E=5: loud, half-loud & fricative, half-loud only, quiet, boundary-equal with zcr, just above
        expected = [True, True, False, False, True, True]
        np.testing.assert_array_equal(data.vad_mask(energy, zcr, 5.0, 0.3, relative=False), expected)

    def test_relative_threshold(self):
        energy = np.array([1.0, 2.0, 3.0, 6.0])  # mean 3
        zcr = np.array([0.0, 0.9, 0.0, 0.0])
        np.testing.assert_array_equal(data.vad_mask(energy, zcr, 1.0, 0.5), [False, True, False, True])

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            data.vad_mask([], [], 1.0, 1.0)
        with pytest.raises(ValueError):
            data.vad_mask([1.0], [1.0], float("nan"), 1.0)
        with pytest.raises(ValueError):
            data.vad_mask([1.0, 2.0], [1.0], 1.0, 1.0)


class TestSoftLabels:
    def test_one_hot(self):
        np.testing.assert_array_equal(data.segment_soft_labels([2, 2, 2], 4), [0, 0, 1, 0])

    def test_closed_form(self):
        np.testing.assert_array_equal(data.segment_soft_labels([0, 0, 1, 1], 2), [0.5, 0.5])

    def test_counting_oracle(self):
        labels = np.random.default_rng(2).integers(0, 7, size=100)
        expected = [sum(1 for v in labels if v == k) / 100 for k in range(7)]
        out = data.segment_soft_labels(labels, 7)
        np.testing.assert_allclose(out, expected, atol=1e-15)
        assert out.sum() == 1.0

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(0, 10), min_size=1, max_size=300))
    def test_exact_simplex(self, labels):
        out = data.segment_soft_labels(labels, 11)
        assert np.all(out >= 0)
        assert out.sum() == 1.0

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            data.segment_soft_labels([], 3)
        with pytest.raises(ValueError):
            data.segment_soft_labels([0, 3], 3)


SMALL = data.SynthConfig(num_speakers=8, num_phrases=3, num_phonemes=6, phonemes_per_phrase=3,
                         min_frames_per_phoneme=2, max_frames_per_phoneme=4, feature_dim=5)


class TestSynthCorpus:
    def test_deterministic(self):
        a, ma = data.synth_corpus(SMALL)
        b, mb = data.synth_corpus(SMALL)
        assert ma == mb
        for ra, rb in zip(a, b):
            assert ra.utt_id == rb.utt_id
            assert ra.features.tobytes() == rb.features.tobytes()
            np.testing.assert_array_equal(ra.alignment, rb.alignment)

    def test_degenerate_generator(self):
        cfg = data.SynthConfig(**{**SMALL.__dict__, "noise_sd": 0.0, "speaker_offset_sd": 0.0,
                                  "device_offset_sd": 0.0})
        records, _ = data.synth_corpus(cfg)
        by_phrase = {}
        for r in records:
            by_phrase.setdefault(r.phrase_id, []).append(r.features)
        for feats in by_phrase.values():
            for f in feats[1:]:
                np.testing.assert_array_equal(f, feats[0])

    def test_speaker_variance_ratio(self):
        cfg = data.SynthConfig(**{**SMALL.__dict__, "speaker_offset_sd": 5.0, "noise_sd": 0.2,
                                  "phoneme_mean_sd": 0.2, "device_offset_sd": 0.1, "num_speakers": 20})
        records, _ = data.synth_corpus(cfg)
        means = {}
        for r in records:
            means.setdefault(r.speaker_id, []).append(r.features.mean(axis=0))
        per_spk = {k: np.stack(v) for k, v in means.items()}
        centers = np.stack([v.mean(axis=0) for v in per_spk.values()])
        between = centers.var(axis=0).mean()
        within = np.mean([v.var(axis=0).mean() for v in per_spk.values()])
        assert between / within > 10

    def test_structure(self):
        records, manifest = data.synth_corpus(SMALL)
        assert len(records) == 8 * 3 * 9
        for r in records:
            assert len(r.alignment) == r.features.shape[0]
            assert r.alignment.max() < SMALL.num_phonemes
            assert r.features.dtype == np.float32
        devices = {r.session: r.device for r in records}
        assert devices == {1: "A", 2: "B", 3: "C", 4: "A", 5: "B", 6: "C", 7: "A", 8: "B", 9: "C"}
        # one phoneme sequence per phrase, shared by all speakers
        for q in range(3):
            aligns = [r.alignment for r in records if r.phrase_id == q]
            assert all(np.array_equal(a, aligns[0]) for a in aligns)

    def test_split(self):
        _, manifest = data.synth_corpus(SMALL)
        sets = [set(manifest.speakers(s)) for s in data.SUBSETS]
        assert [len(s) for s in sets] == [4, 2, 2]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])

    def test_enrollment_split(self):
        records, _ = data.synth_corpus(SMALL)
        enroll = {r.utt_id for r in records if r.is_enrollment}
        test = {r.utt_id for r in records if not r.is_enrollment}
        assert not enroll & test
        assert {(r.session, r.device) for r in records if r.utt_id in enroll} == {(1, "A"), (4, "A"), (7, "A")}

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            data.SynthConfig(num_speakers=1)
        with pytest.raises(ValueError):
            data.SynthConfig(num_phonemes=3, num_phrases=4)
        with pytest.raises(ValueError):
            data.SynthConfig(noise_sd=-1.0)


class TestArchives:
    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(3).standard_normal((50, 23)).astype(np.float32)
        data.write_archive(tmp_path / "a.feat", x)
        y = data.read_archive(tmp_path / "a.feat")
        np.testing.assert_array_equal(x, y)
        data.write_archive(tmp_path / "b.feat", y)
        assert (tmp_path / "a.feat").read_bytes() == (tmp_path / "b.feat").read_bytes()

    def test_layout(self):
        blob = data.encode_archive(np.array([[1.0, 2.0]], dtype=np.float32))
        assert blob == b"FEAT1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + \
            np.array([1.0, 2.0], dtype="<f4").tobytes()

    def test_bad_magic(self):
        blob = data.encode_archive(np.zeros((2, 2)))
        with pytest.raises(data.BadMagicError):
            data.decode_archive(b"FEAT2" + blob[5:])

    def test_truncated_mid_row(self):
        blob = data.encode_archive(np.zeros((3, 4)))
        cut = 13 + 4 * 4 + 6
        with pytest.raises(data.TruncatedArchiveError) as info:
            data.decode_archive(blob[:cut])
        assert info.value.offset == cut
        with pytest.raises(data.TruncatedArchiveError):
            data.decode_archive(blob[:9])

    def test_dimension_overflow(self):
        header = b"FEAT1" + (1 << 16).to_bytes(4, "little") + (1 << 16).to_bytes(4, "little")
        with pytest.raises(data.DimensionOverflowError):
            data.decode_archive(header)

    def test_error_kinds_are_distinct(self):
        kinds = {data.BadMagicError, data.TruncatedArchiveError, data.DimensionOverflowError}
        assert len(kinds) == 3
        assert all(issubclass(k, data.ArchiveError) for k in kinds)

    def test_embeddings(self, tmp_path):
        m = np.random.default_rng(4).standard_normal((3, 5))
        data.write_embeddings(tmp_path / "e", ["a", "b", "c"], m)
        ids, back = data.read_embeddings(tmp_path / "e")
        assert ids == ["a", "b", "c"]
        np.testing.assert_array_equal(back, m.astype(np.float32))


class TestTextFormats:
    def test_alignment_round_trip(self, tmp_path):
        items = [("u1", np.array([0, 1, 1, 2])), ("u2", np.array([5]))]
        data.write_alignments(tmp_path / "a.txt", items)
        back = data.read_alignments(tmp_path / "a.txt")
        data.write_alignments(tmp_path / "b.txt", back.items())
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        assert (tmp_path / "a.txt").read_text() == "u1\t0 1 1 2\nu2\t5\n"

    def test_manifest_round_trip(self, tmp_path):
        records, _ = data.synth_corpus(SMALL)
        entries = data.manifest_entries(records[:12])
        data.write_manifest(tmp_path / "m.tsv", entries)
        back = data.read_manifest(tmp_path / "m.tsv")
        assert back == entries
        data.write_manifest(tmp_path / "n.tsv", back)
        assert (tmp_path / "m.tsv").read_bytes() == (tmp_path / "n.tsv").read_bytes()

    def test_manifest_errors(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("u\tspk\t0\t1\tA\tf.feat\n")
        with pytest.raises(ValueError, match="7"):
            data.read_manifest(tmp_path / "bad.tsv")
        (tmp_path / "dev.tsv").write_text("u\tspk\t0\t1\tZ\tf.feat\t-\n")
        with pytest.raises(ValueError, match="device"):
            data.read_manifest(tmp_path / "dev.tsv")

    def test_corpus_round_trip(self, tmp_path):
        records, manifest = data.synth_corpus(SMALL)
        paths = data.write_corpus(records, manifest, tmp_path)
        loaded = data.load_corpus(paths["development"])
        by_id = {r.utt_id: r for r in records}
        assert [r.utt_id for r in loaded] == manifest.subsets["development"]
        for r in loaded:
            np.testing.assert_array_equal(r.features, by_id[r.utt_id].features)
            np.testing.assert_array_equal(r.alignment, by_id[r.utt_id].alignment)

    def test_corpus_without_alignments(self, tmp_path):
        records, manifest = data.synth_corpus(SMALL)
        paths = data.write_corpus(records, manifest, tmp_path, with_alignments=False)
        assert not (tmp_path / "alignments.txt").exists()
        with pytest.raises(ValueError, match="alignment"):
            data.load_corpus(paths["background"])
        assert len(data.load_corpus(paths["background"], require_alignments=False)) == 4 * 3 * 9
