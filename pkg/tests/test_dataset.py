import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roomtse import room as R
from roomtse.audio import Waveform, rms_dbfs
from roomtse.dataset import (
    ManifestEntry,
    MixtureGenerator,
    QueryClue,
    SyntheticCorpus,
    WavCorpus,
    build_sample,
    read_manifest,
    sample_query_distance,
    select_active,
    split_dataset,
    validate_manifest,
    write_manifest,
)


@pytest.fixture(scope="module")
def sim1_rirs():
    return [R.simulate_rir(*R.sample_sim1(s), seed=s) for s in range(6)]


@pytest.fixture(scope="module")
def corpus():
    return SyntheticCorpus(n_speakers=8, seed=0)


def speech(corpus, spk, n=16000, seed=0):
    return corpus.utterance(corpus.speakers[spk], np.random.default_rng(seed), n)[0]


def test_select_active_examples():
    assert select_active([1.0, 3.0], 1.2, 0.5) == (0,)
    assert select_active([1.0, 3.0], 2.0, 0.5) == ()
    assert select_active([2.5, 3.0], 2.7, 0.5) == (0, 1)
    with pytest.raises(ValueError):
        select_active([1.0], 1.0, 0.0)


@settings(max_examples=200)
@given(st.lists(st.floats(0.1, 6.0), min_size=1, max_size=5), st.floats(0.1, 6.0), st.floats(0.01, 1.0))
def test_select_active_matches_definition(distances, d_q, r_spk):
    got = set(select_active(distances, d_q, r_spk))
    assert got == {k for k in range(len(distances)) if abs(distances[k] - d_q) <= r_spk}


def test_query_clue_validation():
    with pytest.raises(ValueError):
        QueryClue(-1.0, (1,) * 6, 0.3)
    with pytest.raises(ValueError):
        QueryClue(1.0, (1, 1, 1, 1, 1), 0.3)
    with pytest.raises(ValueError):
        QueryClue(1.0, None, 0.3, "Dis+Dim")
    clue = QueryClue(1.5, None, None, "Dis")
    assert np.array_equal(clue.as_array(), [1.5, 0, 0, 0, 0, 0, 0, 0])


def test_build_sample_single_source_is_target(sim1_rirs, corpus):
    h = sim1_rirs[0]
    s = build_sample([speech(corpus, 0)], [h], d_q=h.distance, r_spk=0.5, gain_seed=1)
    assert s.active_set == (0,)
    assert np.array_equal(s.mixture.samples, s.target.samples)


def test_build_sample_inactive_and_overlap(sim1_rirs, corpus):
    a, b = sim1_rirs[0], sim1_rirs[1]
    sp = [speech(corpus, 0), speech(corpus, 1, seed=1)]
    far = max(a.distance, b.distance) + 2.0
    s = build_sample(sp, [a, b], d_q=far, r_spk=0.5, gain_seed=2)
    assert s.active_set == () and not s.active
    assert np.all(s.target.samples == 0)
    assert np.allclose(s.mixture.samples, s.sources[0].samples + s.sources[1].samples)

    both = build_sample(sp, [a, b], d_q=(a.distance + b.distance) / 2, r_spk=10.0, gain_seed=2)
    assert both.active_set == (0, 1)
    assert np.allclose(both.target.samples, both.mixture.samples, atol=1e-6)


def test_build_sample_levels_and_clue(sim1_rirs, corpus):
    sp = [speech(corpus, 2), speech(corpus, 3, seed=3)]
    for seed in range(20):
        s = build_sample(sp, sim1_rirs[:2], d_q=1.0, r_spk=0.5, gain_seed=seed)
        for x, g in zip(s.sources, s.gains_dbfs):
            assert -25.0 <= g <= -20.0
            assert rms_dbfs(x.samples) == pytest.approx(g, abs=1e-3)
    assert s.clue.dis_mw == (3.5, 3.5, 4.0, 4.0, 1.1, 1.9)
    assert s.clue.rt60 == 0.2


def test_build_sample_rejects_silent_source(sim1_rirs, corpus):
    with pytest.raises(ValueError):
        build_sample([Waveform(np.zeros(1000))], sim1_rirs[:1], 1.0, 0.5)


def test_query_distance_sampling():
    for seed in range(500):
        d = sample_query_distance([2.0], True, 0.5, (0.2, 5.0), seed)
        assert 1.5 <= d <= 2.5
        d = sample_query_distance([2.0], False, 0.5, (0.2, 5.0), seed)
        assert abs(d - 2.0) > 0.5
    with pytest.raises(ValueError):
        sample_query_distance([1.0, 2.0, 3.0], False, 0.8, (0.5, 3.5), 0, max_attempts=200)


def test_inactive_fraction_monte_carlo():
    rng = np.random.default_rng(0)
    inactive = 0
    for i in range(10_000):
        d = rng.uniform(0.2, 5.0, size=2)
        want_active = rng.random() >= 0.25
        d_q = sample_query_distance(d, want_active, 0.5, (0.2, 5.5), seed=i)
        inactive += not select_active(d, d_q, 0.5)
    assert inactive / 10_000 == pytest.approx(0.25, abs=0.02)


def test_split_sizes_and_disjointness():
    items = list(range(10_000))
    train, val, test = split_dataset(items, (0.9, 0.02, 0.08), seed=3)
    assert (len(train), len(val), len(test)) == (9000, 200, 800)
    assert set(train) | set(val) | set(test) == set(items)
    assert not (set(train) & set(val) or set(train) & set(test) or set(val) & set(test))
    assert split_dataset(items, seed=3) == (train, val, test)
    with pytest.raises(ValueError):
        split_dataset([])


def test_generator_deterministic_and_consistent(sim1_rirs, corpus):
    gen = MixtureGenerator(sim1_rirs, corpus, n_speakers=2, duration=1.0, seed=5)
    a, prov_a = gen.draw(3)
    b, prov_b = gen.draw(3)
    assert np.array_equal(a.mixture.samples, b.mixture.samples) and prov_a == prov_b
    for s in gen.take(30):
        assert s.active_set == select_active(s.speaker_distances, s.clue.d_q, s.r_spk)
        expected = sum((s.sources[k].samples for k in s.active_set), np.zeros(len(s.mixture)))
        assert np.allclose(s.target.samples, expected, atol=1e-9)
        assert len(s.mixture) == 16000


def test_synthetic_corpus_is_deterministic(corpus):
    a = speech(corpus, 1, seed=4).samples
    b = speech(corpus, 1, seed=4).samples
    assert np.array_equal(a, b) and np.any(a)


def test_wav_corpus(tmp_path):
    from roomtse.audio import write_wav

    for spk in ("a", "b"):
        write_wav(tmp_path / spk / "u.wav", Waveform(np.random.default_rng(0).standard_normal(8000) * 0.1))
    corpus = WavCorpus(tmp_path)
    assert corpus.speakers == ["a", "b"]
    w, ref, off = corpus.utterance("a", np.random.default_rng(0), 16000)
    assert len(w) == 16000 and off == 0 and np.all(w.samples[8000:] == 0)


def entry(**kw):
    base = dict(mixture_path=None, target_path=None, speech_paths=["synthetic:syn000:1"],
                rir_paths=[], d_q=1.0, r_spk=0.5, speaker_distances=[1.2], dis_mw=[1, 2, 3, 4, 1, 2],
                rt60=0.3, active=True, seed=0, active_set=[0])
    base.update(kw)
    return ManifestEntry(**base)


def test_manifest_round_trip(tmp_path):
    entries = [entry(seed=i, d_q=1.0 + i / 10) for i in range(5)]
    path = write_manifest(tmp_path / "m.jsonl", entries)
    assert read_manifest(path) == entries
    empty = write_manifest(tmp_path / "e.jsonl", [])
    assert read_manifest(empty) == []


def test_manifest_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(entry().to_json() + "\n{not json\n")
    with pytest.raises(ValueError, match=":2:"):
        read_manifest(bad)
    missing = json.loads(entry().to_json())
    del missing["d_q"]
    bad.write_text(json.dumps(missing) + "\n")
    with pytest.raises(ValueError, match=":1:"):
        read_manifest(bad)
    with pytest.raises(FileNotFoundError, match="nowhere.wav"):
        validate_manifest([entry(mixture_path="nowhere.wav")], tmp_path)
