import json

import numpy as np
import pytest

from loudnet import mlp
from loudnet.evaluate import (CurveSeries, bandwidth_curves,
                              bench_throughput, loudness_histogram,
                              predict_phons, rms_error, tone_growth_curves,
                              write_curves_csv, write_histogram_csv, write_json)
from loudnet.oracle import LoudnessOracle
from loudnet.synth import CATEGORY_CODES, Dataset


@pytest.fixture(scope="module")
def oracle():
    return LoudnessOracle.build()


@pytest.fixture(scope="module")
def model():
    return mlp.init_model(17)


def dataset_from_predictions(model, n=200, seed=0, offset=0.0):
    rng = np.random.default_rng(seed)
    spectra = rng.uniform(20.0, 90.0, (n, 61)).astype(np.float32)
    labels = (predict_phons(model, spectra) - offset).astype(np.float32)
    cats = np.where(rng.random(n) < 0.5, CATEGORY_CODES["tone"],
                    CATEGORY_CODES["noise"]).astype(np.uint8)
    return Dataset(spectra=spectra, labels=labels, categories=cats, header={})


class TestRmsError:
    def test_perfect_predictions_zero(self, model):
        ds = dataset_from_predictions(model)
        report = rms_error(model, ds)
        assert report.overall["rms"] == pytest.approx(0.0, abs=1e-5)

    def test_constant_offset(self, model):
        ds = dataset_from_predictions(model, offset=0.5)
        report = rms_error(model, ds)
        assert report.overall["rms"] == pytest.approx(0.5, abs=1e-5)
        assert report.overall["mean_signed"] == pytest.approx(0.5, abs=1e-5)

    def test_per_category_counts(self, model):
        ds = dataset_from_predictions(model)
        report = rms_error(model, ds)
        counts = {name: s["count"] for name, s in report.per_category.items()}
        assert sum(counts.values()) == len(ds)
        assert all(c > 0 for c in counts.values())
        for stats in report.per_category.values():
            assert stats["rms"] >= abs(stats["mean_signed"]) - 1e-12

    def test_shuffle_invariant(self, model):
        ds = dataset_from_predictions(model, offset=1.0)
        perm = np.random.default_rng(1).permutation(len(ds))
        shuffled = Dataset(spectra=ds.spectra[perm], labels=ds.labels[perm],
                           categories=ds.categories[perm], header={})
        a = rms_error(model, ds)
        b = rms_error(model, shuffled)
        assert a.overall["rms"] == pytest.approx(b.overall["rms"], rel=1e-9)
        for name in a.per_category:
            assert a.per_category[name]["rms"] == \
                pytest.approx(b.per_category[name]["rms"], rel=1e-9)

    def test_empty_rejected(self, model):
        empty = Dataset(spectra=np.empty((0, 61), np.float32),
                        labels=np.empty(0, np.float32),
                        categories=np.empty(0, np.uint8), header={})
        with pytest.raises(ValueError):
            rms_error(model, empty)


class TestHistogram:
    def test_identical_predictions_single_bin(self, model):
        spectra = np.tile(np.linspace(0, 80, 61, dtype=np.float32), (50, 1))
        ds = Dataset(spectra=spectra, labels=np.zeros(50, np.float32),
                     categories=np.zeros(50, np.uint8), header={})
        edges, props = loudness_histogram(model, ds)
        assert np.count_nonzero(props) == 1
        assert props.max() == pytest.approx(1.0)

    def test_mass_conserved(self, model):
        ds = dataset_from_predictions(model, n=500)
        _, props = loudness_histogram(model, ds)
        assert props.sum() == pytest.approx(1.0, abs=1e-9)

    def test_bad_bin_width(self, model):
        ds = dataset_from_predictions(model, n=10)
        with pytest.raises(ValueError):
            loudness_histogram(model, ds, bin_width=0.0)


class TestToneCurves:
    def test_oracle_1khz_identity(self, oracle):
        predict = lambda X: np.array(
            [oracle.loudness_level_of_bands(r).phon for r in X])
        series = {s.label: s for s in tone_growth_curves(predict, oracle.plan)}
        ref = series["1000Hz"]
        inside = (ref.x >= 10) & (ref.x <= 90)
        assert np.max(np.abs(ref.y[inside] - ref.x[inside])) < 0.1

    def test_3khz_above_1khz(self, oracle):
        predict = lambda X: np.array(
            [oracle.loudness_level_of_bands(r).phon for r in X])
        series = {s.label: s for s in tone_growth_curves(predict, oracle.plan)}
        sel = (series["1000Hz"].x >= 20) & (series["1000Hz"].x <= 90)
        assert np.all(series["3000Hz"].y[sel] > series["1000Hz"].y[sel])

    def test_100hz_threshold_location(self, oracle):
        predict = lambda X: np.array(
            [oracle.loudness_level_of_bands(r).phon for r in X])
        series = {s.label: s for s in tone_growth_curves(predict, oracle.plan)}
        y100, x = series["100Hz"].y, series["100Hz"].x
        first_audible = x[np.nonzero(y100 > 0)[0][0]]
        assert 20.0 <= first_audible <= 25.0  # ~2 dB threshold + ~20 dB elevation


class TestBandwidthCurves:
    def test_oracle_non_decreasing_beyond_erb(self, oracle, model):
        series = {s.label: s for s in bandwidth_curves(model, oracle)}
        y = series["oracle"].y
        x = series["oracle"].x
        beyond = x >= 132.6  # one ERB at 1 kHz
        assert np.all(np.diff(y[beyond]) >= 0.0)

    def test_narrowest_matches_oracle_narrowband(self, oracle, model):
        series = {s.label: s for s in bandwidth_curves(model, oracle)}
        from loudnet.evaluate import PINK_GRADIENT_DB_PER_OCTAVE
        from loudnet.synth import NoiseSpec, noise_band_levels
        spec = NoiseSpec(center_hz=1000.0, bandwidth_hz=100.0, notch_width_hz=0.0,
                         level_db=60.0,
                         gradient_db_per_octave=PINK_GRADIENT_DB_PER_OCTAVE)
        direct = oracle.loudness_level_of_bands(
            noise_band_levels(spec, oracle.plan, oracle.floor_spl)).phon
        assert series["oracle"].y[0] == pytest.approx(direct, abs=1e-9)

    def test_both_series_emitted(self, oracle, model):
        labels = [s.label for s in bandwidth_curves(model, oracle)]
        assert labels == ["oracle", "dnn"]


class TestCurveSeries:
    def test_requires_increasing_x(self):
        with pytest.raises(ValueError):
            CurveSeries(x=np.array([1.0, 1.0]), y=np.array([0.0, 0.0]), label="z")


class TestBench:
    def test_smoke_report(self, oracle, model):
        report = bench_throughput(model, oracle, duration=1.2)
        assert report.batched_rate > 0
        assert report.single_rate > 0
        assert report.oracle_rate > 0
        assert report.speedup == pytest.approx(
            report.batched_rate / report.oracle_rate)
        assert report.hardware_note
        payload = report.to_dict()
        assert set(payload) == {"batched_rate_per_s", "single_rate_per_s",
                                "oracle_rate_per_s", "speedup", "batch_size",
                                "duration_s", "hardware_note"}


class TestWriters:
    def test_histogram_csv_deterministic(self, model, tmp_path):
        ds = dataset_from_predictions(model, n=100)
        edges, props = loudness_histogram(model, ds)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_histogram_csv(p1, edges, props)
        write_histogram_csv(p2, edges, props)
        assert p1.read_bytes() == p2.read_bytes()
        header = p1.read_text().splitlines()[0]
        assert header == "bin_lo_phon,bin_hi_phon,proportion"

    def test_curves_csv_layout(self, oracle, model, tmp_path):
        series = bandwidth_curves(model, oracle)
        path = tmp_path / "c.csv"
        write_curves_csv(path, "bandwidth_hz", series)
        lines = path.read_text().splitlines()
        assert lines[0] == "bandwidth_hz,oracle,dnn"
        assert len(lines) == 1 + len(series[0].x)

    def test_curves_csv_rejects_mismatched_grids(self, tmp_path):
        a = CurveSeries(x=np.array([1.0, 2.0]), y=np.array([0.0, 1.0]), label="a")
        b = CurveSeries(x=np.array([1.0, 3.0]), y=np.array([0.0, 1.0]), label="b")
        with pytest.raises(ValueError):
            write_curves_csv(tmp_path / "x.csv", "x", [a, b])

    def test_json_writer_sorted(self, tmp_path):
        path = tmp_path / "x.json"
        write_json(path, {"b": 1, "a": 2})
        assert json.loads(path.read_text()) == {"a": 2, "b": 1}
        assert path.read_text().index('"a"') < path.read_text().index('"b"')

    def test_curve_generation_pure(self, oracle, model, tmp_path):
        # same model + same sweep -> identical CSV bytes
        paths = []
        for name in ("a.csv", "b.csv"):
            series = tone_growth_curves(lambda X: predict_phons(model, X),
                                        oracle.plan)
            path = tmp_path / name
            write_curves_csv(path, "level_db", series)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
