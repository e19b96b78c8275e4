from collections import Counter, defaultdict

import pytest
from scipy import stats

from searchrec.ingestion import ingest, parse_events
from searchrec.synthetic import GeneratorConfig, generate, generate_log, planted_map, term_name


def test_same_seed_identical_files(tmp_path):
    cfg = GeneratorConfig(seed=5, n_patients=30)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    for name in ("encounters.csv", "searches.csv", "planted_map.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_files_parse_cleanly_and_survive_filters(tmp_path):
    cfg = GeneratorConfig(seed=1, n_patients=40)
    enc, srch = generate(cfg, tmp_path)
    records, errors = parse_events(enc, srch)
    assert errors == []
    ds = ingest(tmp_path)
    assert len(ds.histories) == 40


def test_config_echoed_as_comments(tmp_path):
    cfg = GeneratorConfig(seed=9, n_patients=3)
    enc, _ = generate(cfg, tmp_path)
    lines = enc.read_text().splitlines()
    assert "# seed=9" in lines
    assert GeneratorConfig.from_kv("\n".join(l[2:] for l in lines if l.startswith("# "))) == cfg


def test_times_strictly_increasing_per_patient():
    log = generate_log(GeneratorConfig(seed=2, n_patients=50, searches_per_encounter=3.0))
    by_patient = defaultdict(list)
    for pid, t, _ in log.searches:
        by_patient[pid].append(t)
    for times in by_patient.values():
        assert all(a < b for a, b in zip(times, times[1:]))


def test_full_signal_emits_planted_terms():
    cfg = GeneratorConfig(seed=3, n_patients=40, p_signal=1.0, codes_per_encounter=1.0)
    log = generate_log(cfg)
    planted = planted_map(cfg)
    encs = defaultdict(list)
    for pid, t, codes in log.encounters:
        encs[pid].append((t, codes))
    for pid, t, term in log.searches:
        last_codes = max((e for e in encs[pid] if e[0] <= t), key=lambda e: e[0])[1]
        (code,) = last_codes
        assert term == log.planted[code]
    assert len(set(planted)) == cfg.planted_rank


def test_no_signal_is_uniform_per_code():
    cfg = GeneratorConfig(seed=4, n_patients=400, n_codes=5, n_terms=10, planted_rank=3, p_signal=0.0)
    log = generate_log(cfg)
    encs = defaultdict(list)
    for pid, t, codes in log.encounters:
        encs[pid].append((t, codes))
    counts = defaultdict(Counter)
    for pid, t, term in log.searches:
        codes = max((e for e in encs[pid] if e[0] <= t), key=lambda e: e[0])[1]
        for c in codes:
            counts[c][term] += 1
    names = [term_name(i) for i in range(cfg.n_terms)]
    chi2 = 0.0
    for c, cnt in counts.items():
        chi2 += stats.chisquare([cnt[n] for n in names]).statistic
    dof = len(counts) * (cfg.n_terms - 1)
    assert stats.chi2.sf(chi2, dof) > 1e-3


def test_sparse_mode_trips_filters(tmp_path):
    cfg = GeneratorConfig(seed=6, n_patients=60, encounters_per_patient=2.0, searches_per_encounter=0.5,
                          sparse=True)
    generate(cfg, tmp_path)
    ds = ingest(tmp_path)
    dropped = {name: c["patients"] for name, c in ds.report.stages}
    assert dropped["patients"] < dropped["parsed"]


@pytest.mark.parametrize("kwargs", [
    {"n_patients": 0}, {"p_signal": 1.5}, {"planted_rank": 0}, {"n_codes": 1},
    {"planted_map": (0, 1)},
])
def test_impossible_configs_rejected(kwargs):
    with pytest.raises(ValueError):
        GeneratorConfig(**kwargs)


def test_explicit_planted_map():
    cfg = GeneratorConfig(n_codes=3, n_terms=4, planted_rank=2, planted_map=(3, 3, 1))
    assert list(planted_map(cfg)) == [3, 3, 1]
    assert GeneratorConfig.from_kv(cfg.to_kv()) == cfg


def test_full_signal_model_ranks_planted_term_first(tmp_path):
    from searchrec.cooccurrence import build_cooccurrence
    from searchrec.factorization import TrainConfig, train
    from searchrec.recommenders import HcfmParams, RecommendationPoint, hcfm_score

    cfg = GeneratorConfig(seed=0, p_signal=1.0)
    generate(cfg, tmp_path)
    ds = ingest(tmp_path)
    codes, terms = ds.dictionaries.codes, ds.dictionaries.terms
    A = build_cooccurrence(ds.histories.values(), 0.5, len(codes), len(terms))
    pair_counts = Counter((codes.raw(c), terms.raw(s.term)) for h in ds.histories.values()
                          for s in h.searches for c in h.encounters[s.matched_encounter].codes)
    planted = generate_log(cfg).planted
    assert min(pair_counts[(c, planted[c])] for c in codes) >= 20
    # only planted terms are ever searched, so the vocabulary has planted_rank
    # entries and the largest admissible latent dimension is one less
    d = min(len(codes), len(terms)) - 1
    model = train(A, TrainConfig(d=d, gamma=0.01))
    misses = []
    for c in codes:
        point = RecommendationPoint("q", 0, (), ((codes.id(c),),))
        top = hcfm_score(point, model, HcfmParams("all", 2, 0.0)).terms[0]
        if terms.raw(int(top)) != planted[c]:
            misses.append(c)
    assert misses == []
