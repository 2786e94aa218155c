import math

import numpy as np
import pytest

from fastwave import metrics
from fastwave.dsp import AudioClip
from fastwave.edm import keyed_rng
from fastwave.metrics import (MetricsReport, UndefinedMetricError, evaluate, format_value,
                              interpolation_baseline, low_resolution_view, lsd, lsd_band, mean_std,
                              rtf, snr)
from fastwave.model import cutoff_index
from fastwave.synth import toy_corpus

import lsd_oracle


def tilted_noise(rng, n, tilt):
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spectrum)) / len(spectrum)
    return np.fft.irfft(spectrum * (1 + tilt * f), n)


def test_snr_cases(rng):
    x = rng.standard_normal(1000)
    assert snr(x, x) == math.inf
    assert snr(x, np.zeros_like(x)) == 0.0
    r = rng.standard_normal(1000)
    r -= (r @ x) / (x @ x) * x
    r *= math.sqrt(0.01 * (x @ x) / (r @ r))
    assert abs(snr(x, x + r) - 20.0) < 1e-9


def test_snr_errors():
    with pytest.raises(ValueError):
        snr(np.ones(3), np.ones(4))
    with pytest.raises(UndefinedMetricError):
        snr(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        snr(AudioClip(np.ones(3), 16000), AudioClip(np.ones(3), 48000))


def test_lsd_identity_and_uniform_scale(rng):
    x = rng.standard_normal(8000)
    assert lsd(x, x) == 0.0
    assert abs(lsd(x, 0.1 * x) - 20.0) < 1e-6
    assert abs(lsd(0.1 * x, x) - 20.0) < 1e-6


def test_lsd_symmetric(rng):
    x, y = rng.standard_normal(6000), tilted_noise(rng, 6000, 3.0)
    assert abs(lsd(x, y) - lsd(y, x)) < 1e-9


def test_lsd_matches_direct_dft_oracle(rng):
    x = rng.standard_normal(5000)
    y = tilted_noise(rng, 5000, 4.0)
    assert abs(lsd(x, y) - lsd_oracle.lsd(x, y)) < 1e-9
    fc = cutoff_index(16000)
    assert abs(lsd_band(x, y, 16000, "LF") - lsd_oracle.lsd(x, y, 0, fc)) < 1e-9
    assert abs(lsd_band(x, y, 16000, "HF") - lsd_oracle.lsd(x, y, fc)) < 1e-9


def test_lsd_floor_makes_silence_finite():
    x = np.zeros(4096)
    y = np.zeros(4096)
    y[100] = 1e-3
    assert np.isfinite(lsd(x, y)) and lsd(x, x) == 0.0


def test_band_split_at_24k(rng):
    x = rng.standard_normal(8192)
    assert lsd_band(x, x, 24000, "LF") == 0.0 and lsd_band(x, x, 24000, "HF") == 0.0
    # inject noise only above 14 kHz
    n = np.fft.rfft(rng.standard_normal(8192))
    n[: int(14000 / 24000 * len(n))] = 0
    y = x + np.fft.irfft(n, 8192)
    assert lsd_band(x, y, 24000, "LF") < 0.05
    assert lsd_band(x, y, 24000, "HF") > 1.0


def test_band_errors(rng):
    x = rng.standard_normal(3000)
    with pytest.raises(UndefinedMetricError):
        lsd_band(x, x, 48000, "HF")
    with pytest.raises(ValueError):
        lsd_band(x, x, 24000, "MF")
    with pytest.raises(ValueError):
        lsd_band(x, x, 0, "LF")


@pytest.mark.parametrize("rate", [8000, 12000, 16000, 24000])
def test_full_band_bounds_restricted_bands(rate, rng):
    # per frame the full-band mean square is the bin-weighted average of the
    # band mean squares, so LSD >= w * LSD-LF + (1 - w) * LSD-HF >= min(both)
    x, y = rng.standard_normal(7000), tilted_noise(rng, 7000, 5.0)
    w = cutoff_index(rate) / 1025
    lf, hf, full = lsd_band(x, y, rate, "LF"), lsd_band(x, y, rate, "HF"), lsd(x, y)
    assert full >= w * lf + (1 - w) * hf - 1e-12
    assert min(lf, hf) <= full


def test_rtf():
    assert rtf(2.0, 1.0) == 0.5 and rtf(3.0, 3.0) == 1.0
    with pytest.raises(ValueError):
        rtf(0.0, 1.0)
    vals = [rtf(d, w) for d, w in ((1, 0.5), (2, 0.5), (4, 8))]
    mu, sd = mean_std(vals)
    assert mu == pytest.approx(np.mean(vals)) and sd == pytest.approx(np.std(vals))


def test_mean_std_and_format():
    assert mean_std([math.inf, math.inf]) == (math.inf, 0.0)
    assert mean_std([1.0, 3.0]) == (2.0, 1.0)
    assert format_value(math.inf) == "inf"
    assert format_value(0.1) == "0.1"
    with pytest.raises(ValueError):
        mean_std([])


class _Oracle:
    """Returns the clean clip whatever it is asked; recognizes inputs by conditioning."""

    def __init__(self, clips, rates):
        self.table = {}
        for clip in clips:
            for rate in rates:
                key = low_resolution_view(clip, rate)[:64].tobytes()
                self.table[key] = clip.samples

    def __call__(self, x, sigma, cond):
        clean = self.table[cond.low_res[0, :64].tobytes()]
        out = np.zeros_like(x)
        out[0, :len(clean)] = clean
        return out


@pytest.fixture(scope="module")
def corpus():
    return toy_corpus(2, 0.25, seed=3)


def test_evaluate_with_perfect_oracle(corpus):
    rates = [8000, 24000]
    report = evaluate(_Oracle(corpus, rates), corpus, rates, nfe=4, seed=0)
    for rate in rates:
        q = report.quality[rate]
        assert q["snr"] == (math.inf, 0.0)
        assert q["lsd"] == (0.0, 0.0) and q["lsd_lf"] == (0.0, 0.0) and q["lsd_hf"] == (0.0, 0.0)
    assert report.model_calls == 4 * len(corpus) * len(rates)
    assert "8000,snr,inf,0.0" in report.to_csv()


def test_evaluate_errors(corpus):
    with pytest.raises(ValueError):
        evaluate(_Oracle(corpus, [8000]), [], [8000], 4, 0)
    with pytest.raises(ValueError):
        evaluate(_Oracle(corpus, [8000]), corpus, [8000], 1, 0)


def test_evaluate_deterministic(corpus):
    model = lambda x, s, c: 0.5 * x
    a = evaluate(model, corpus, [16000], nfe=3, seed=5)
    b = evaluate(model, corpus, [16000], nfe=3, seed=5)
    assert a.to_csv(include_timing=False) == b.to_csv(include_timing=False)
    c = evaluate(model, corpus, [16000], nfe=3, seed=6)
    assert a.to_csv(include_timing=False) != c.to_csv(include_timing=False)


def test_interpolation_baseline_hf_gap(corpus):
    report = interpolation_baseline(corpus, [8000, 12000, 16000, 24000])
    for rate, q in report.quality.items():
        assert q["lsd_hf"][0] > 3 * q["lsd_lf"][0], rate


def test_report_schema():
    q = {m: (1.0, 0.5) for m in metrics.QUALITY_METRICS}
    report = MetricsReport(quality={24000: q, 8000: q}, rtf=(0.2, 0.01), gflops=1.5,
                           params=1000, nfe=8, model_calls=16)
    lines = report.to_csv().splitlines()
    assert lines[0] == "rate,metric,mean,std"
    assert [l.split(",")[0] for l in lines[1:9]] == ["8000"] * 4 + ["24000"] * 4
    assert [l.split(",")[1] for l in lines[9:]] == ["rtf", "gflops", "params", "nfe", "model_calls"]
    assert "rtf" not in report.to_csv(include_timing=False)
    table = report.to_table()
    assert table.index("8 kHz") < table.index("24 kHz") < table.index("Complexity")
    assert "#params" in table and "GFLOPS" in table and "RTF" in table
