import numpy as np
import pytest
from scipy.io import wavfile

from loudnet.errors import FormatError
from loudnet.frontend import CalibrationSpec, write_spectra
from loudnet.oracle import LoudnessOracle
from loudnet.synth import (CATEGORY_CODES, Dataset, NoiseSpec, ToneSpec,
                           concat_datasets, gen_noise_records,
                           gen_tone_records, import_labels, ingest_wav,
                           noise_band_levels, read_dataset, sample_noise_spec,
                           tone_band_levels, write_dataset)

FS = 16000


@pytest.fixture(scope="module")
def oracle():
    return LoudnessOracle.build()


class TestSpecs:
    def test_tone_spec_background_gap(self):
        ToneSpec(frequency_hz=1000.0, level_db=60.0,
                 background_db=np.full(61, 45.0))
        with pytest.raises(ValueError):
            ToneSpec(frequency_hz=1000.0, level_db=60.0,
                     background_db=np.full(61, 55.0))
        with pytest.raises(ValueError):
            ToneSpec(frequency_hz=10.0, level_db=60.0,
                     background_db=np.full(61, -10.0))

    def test_noise_spec_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec(center_hz=1000.0, bandwidth_hz=0.0, notch_width_hz=0.0,
                      level_db=60.0, gradient_db_per_octave=0.0)
        with pytest.raises(ValueError):
            NoiseSpec(center_hz=1000.0, bandwidth_hz=100.0, notch_width_hz=100.0,
                      level_db=60.0, gradient_db_per_octave=0.0)


class TestSpectrumBuilders:
    def test_tone_lands_in_right_band(self, oracle):
        plan = oracle.plan
        levels = tone_band_levels(1000.0, 60.0, plan)
        assert levels[plan.band_of(1000.0)] == 60.0
        assert np.sum(levels > -10.0) == 1

    def test_noise_total_power_matches_level(self, oracle):
        spec = NoiseSpec(center_hz=1000.0, bandwidth_hz=2000.0, notch_width_hz=0.0,
                         level_db=70.0, gradient_db_per_octave=-3.0)
        levels = noise_band_levels(spec, oracle.plan)
        active = levels > -10.0
        total = 10 * np.log10(np.sum(10 ** (levels[active] / 10.0)))
        assert total == pytest.approx(70.0, abs=0.01)

    def test_notch_removes_center_bands(self, oracle):
        plan = oracle.plan
        wide = NoiseSpec(center_hz=1000.0, bandwidth_hz=1600.0, notch_width_hz=0.0,
                         level_db=60.0, gradient_db_per_octave=0.0)
        notched = NoiseSpec(center_hz=1000.0, bandwidth_hz=1600.0,
                            notch_width_hz=400.0, level_db=60.0,
                            gradient_db_per_octave=0.0)
        a = noise_band_levels(wide, plan)
        b = noise_band_levels(notched, plan)
        center_band = plan.band_of(1000.0)
        assert a[center_band] > -10.0
        assert b[center_band] == -10.0  # fully inside the notch
        # passband edges survive
        assert b[plan.band_of(400.0)] > -10.0
        assert b[plan.band_of(1600.0)] > -10.0

    def test_gradient_tilts_spectrum(self, oracle):
        plan = oracle.plan
        spec = NoiseSpec(center_hz=1000.0, bandwidth_hz=4000.0, notch_width_hz=0.0,
                         level_db=60.0, gradient_db_per_octave=6.0)
        levels = noise_band_levels(spec, plan)
        lo_band = plan.band_of(500.0)
        hi_band = plan.band_of(2000.0)
        assert levels[hi_band] > levels[lo_band]

    def test_zero_gradient_on_log_bands_is_flat_per_hz(self, oracle):
        # white (gradient 0) has equal power per Hz: the ninth-octave bands
        # then grow by 10*log10(2^(1/9)) = 0.334 dB per band
        plan = oracle.plan
        spec = NoiseSpec(center_hz=2000.0, bandwidth_hz=3000.0, notch_width_hz=0.0,
                         level_db=60.0, gradient_db_per_octave=0.0)
        levels = noise_band_levels(spec, plan)
        b = plan.band_of(2000.0)
        step = levels[b + 1] - levels[b]
        assert step == pytest.approx(10 * np.log10(2 ** (1 / 9)), abs=1e-6)


class TestToneRecords:
    def test_seed_reproducible(self, oracle):
        a = gen_tone_records(50, 7, oracle)
        b = gen_tone_records(50, 7, oracle)
        assert np.array_equal(a.spectra, b.spectra)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self, oracle):
        a = gen_tone_records(50, 7, oracle)
        b = gen_tone_records(50, 8, oracle)
        assert not np.array_equal(a.spectra, b.spectra)

    def test_background_gap_invariant(self, oracle):
        ds = gen_tone_records(200, 3, oracle)
        floor = oracle.floor_spl
        for row in ds.spectra:
            t = row.max()
            others = row[row < t] if np.sum(row == t) == 1 else row
            # every non-tone band is either >= 10 dB down or at the floor
            assert np.all((others <= t - 10.0 + 1e-5) | (others <= floor + 1e-5))

    def test_anchor_tone_label(self, oracle):
        levels = tone_band_levels(1000.0, 60.0, oracle.plan)
        label = oracle.loudness_level_of_bands(levels)
        assert label.phon == pytest.approx(60.0, abs=0.2)

    def test_worker_partition_deterministic(self, oracle):
        a = gen_tone_records(53, 11, oracle, workers=4)
        b = gen_tone_records(53, 11, oracle, workers=4)
        assert np.array_equal(a.spectra, b.spectra)

    def test_rejects_bad_count(self, oracle):
        with pytest.raises(ValueError):
            gen_tone_records(0, 1, oracle)


class TestNoiseRecords:
    def test_notch_modes(self, oracle):
        rng = np.random.default_rng(0)
        none = [sample_noise_spec(rng, oracle.plan, "none") for _ in range(20)]
        assert all(s.notch_width_hz == 0.0 for s in none)
        only = [sample_noise_spec(rng, oracle.plan, "only") for _ in range(20)]
        assert all(s.notch_width_hz > 0.0 for s in only)
        with pytest.raises(ValueError):
            sample_noise_spec(rng, oracle.plan, "sometimes")

    def test_level_step_compresses(self, oracle):
        # white noise over the full range, 60 vs 61 dB: the label moves but
        # by less than 3 phon (compression); derived from the oracle itself
        def full_band(level):
            return noise_band_levels(
                NoiseSpec(center_hz=4000.0, bandwidth_hz=8000.0, notch_width_hz=0.0,
                          level_db=level, gradient_db_per_octave=0.0), oracle.plan)
        lo = oracle.loudness_level_of_bands(full_band(60.0)).phon
        hi = oracle.loudness_level_of_bands(full_band(61.0)).phon
        assert 0.0 < hi - lo < 3.0

    def test_dataset_file_byte_identical(self, oracle, tmp_path):
        p1, p2 = tmp_path / "a.lds", tmp_path / "b.lds"
        write_dataset(p1, gen_noise_records(40, 5, oracle))
        write_dataset(p2, gen_noise_records(40, 5, oracle))
        assert p1.read_bytes() == p2.read_bytes()


class TestIngestWav:
    def make_wav(self, path, seconds=1.0, freq=440.0):
        t = np.arange(int(FS * seconds)) / FS
        sig = (0.3 * np.sin(2 * np.pi * freq * t)).astype(np.float32)
        wavfile.write(str(path), FS, sig)

    def test_one_second_file_frame_count(self, oracle, tmp_path):
        path = tmp_path / "one.wav"
        self.make_wav(path)
        ds, skipped = ingest_wav([path], 60.0, oracle)
        assert not skipped
        assert 27 <= len(ds) <= 29  # ceil(16000/560) = 29 with tail padding
        assert len(ds) == 29
        assert set(ds.categories) == {CATEGORY_CODES["speech"]}

    def test_empty_list(self, oracle):
        ds, skipped = ingest_wav([], 60.0, oracle)
        assert len(ds) == 0 and not skipped

    def test_same_config_same_bytes(self, oracle, tmp_path):
        path = tmp_path / "one.wav"
        self.make_wav(path)
        p1, p2 = tmp_path / "a.lds", tmp_path / "b.lds"
        write_dataset(p1, ingest_wav([path], 60.0, oracle)[0])
        write_dataset(p2, ingest_wav([path], 60.0, oracle)[0])
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_files_reported_run_continues(self, oracle, tmp_path):
        good = tmp_path / "good.wav"
        self.make_wav(good)
        missing = tmp_path / "missing.wav"
        slow = tmp_path / "slow.wav"
        wavfile.write(str(slow), 8000, np.zeros(800, np.float32))
        ds, skipped = ingest_wav([good, missing, slow], 60.0, oracle)
        assert len(ds) == 29
        assert {p for p, _ in skipped} == {str(missing), str(slow)}

    def test_music_category_tag(self, oracle, tmp_path):
        path = tmp_path / "m.wav"
        self.make_wav(path)
        ds, _ = ingest_wav([path], 70.0, oracle, category="music")
        assert set(ds.categories) == {CATEGORY_CODES["music"]}


class TestImportLabels:
    def test_matching_counts(self, oracle, tmp_path):
        levels = np.random.default_rng(0).uniform(-10, 90, (100, 61)).astype(np.float32)
        spf = tmp_path / "x.spf"
        write_spectra(spf, levels, oracle.plan, CalibrationSpec())
        labels = tmp_path / "y.txt"
        labels.write_text("\n".join("50.0" for _ in range(100)))
        ds = import_labels(spf, labels)
        assert len(ds) == 100
        assert set(ds.categories) == {CATEGORY_CODES["external"]}

    def test_count_mismatch(self, oracle, tmp_path):
        levels = np.zeros((100, 61), np.float32)
        spf = tmp_path / "x.spf"
        write_spectra(spf, levels, oracle.plan, CalibrationSpec())
        labels = tmp_path / "y.txt"
        labels.write_text("\n".join("50.0" for _ in range(99)))
        with pytest.raises(ValueError):
            import_labels(spf, labels)

    def test_range_validation_only(self, oracle, tmp_path):
        levels = np.zeros((2, 61), np.float32)
        spf = tmp_path / "x.spf"
        write_spectra(spf, levels, oracle.plan, CalibrationSpec())
        labels = tmp_path / "y.txt"
        labels.write_text("135.0\n50.0")
        with pytest.raises(ValueError):
            import_labels(spf, labels)


class TestDatasetIO:
    def test_round_trip(self, oracle, tmp_path):
        ds = gen_tone_records(30, 2, oracle)
        path = tmp_path / "t.lds"
        write_dataset(path, ds)
        back = read_dataset(path)
        assert np.array_equal(back.spectra, ds.spectra)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.categories, ds.categories)
        assert back.header["category_counts"] == {"tone": 30}
        assert back.header["calibration_hash"] == oracle.calibration_hash

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lds"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_truncation(self, oracle, tmp_path):
        ds = gen_tone_records(30, 2, oracle)
        path = tmp_path / "t.lds"
        write_dataset(path, ds)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_concat_and_category_split(self, oracle):
        tones = gen_tone_records(20, 1, oracle)
        noises = gen_noise_records(15, 1, oracle)
        merged = concat_datasets([tones, noises])
        assert len(merged) == 35
        tone_rows = merged.categories == CATEGORY_CODES["tone"]
        # a category split never leaks records across the partition
        assert np.sum(tone_rows) == 20
        assert np.sum(~tone_rows) == 15


class TestRecordInvariants:
    def test_all_records_within_bounds(self, oracle):
        ds = concat_datasets([gen_tone_records(100, 9, oracle),
                              gen_noise_records(100, 9, oracle)])
        assert np.all(ds.spectra >= oracle.floor_spl - 1e-6)
        assert np.all(ds.spectra <= 140.0)
        assert np.all(ds.labels >= 0.0)
        assert np.all(ds.labels <= 130.0)
