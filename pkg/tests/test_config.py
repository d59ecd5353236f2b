import pytest

from minerscope.config import Settings, dump_settings, load_settings, parse_settings


def test_defaults():
    s = Settings()
    assert (s.phase1.load_pct, s.phase1.workers) == (5.0, 3)
    assert (s.phase2.load_pct, s.phase2.min_duration_ms) == (10.0, 30_000)
    assert s.fingerprint.min_support_fraction == 0.01
    assert (s.similarity.ngram, s.similarity.cut) == (3, 0.7)
    assert s.crawl.reported_cores == 4


def test_partial_override():
    s = parse_settings("[phase2]\nload_pct = 12.5\n[similarity]\nngram = 4\n")
    assert s.phase2.load_pct == 12.5 and s.similarity.ngram == 4
    assert s.phase1 == Settings().phase1


def test_types_are_coerced():
    s = parse_settings("[phase1]\nworkers = 5\n[economics]\nxmr_usd = 300\n")
    assert s.phase1.workers == 5 and isinstance(s.phase1.workers, int)
    assert s.economics.xmr_usd == 300.0 and isinstance(s.economics.xmr_usd, float)


@pytest.mark.parametrize("text, match", [
    ("[phase4]\nx = 1\n", "unknown config section"),
    ("[phase1]\nload = 1\n", "unknown key"),
    ("[phase1]\nworkers = many\n", "cannot read"),
])
def test_rejections(text, match):
    with pytest.raises(ValueError, match=match):
        parse_settings(text)


def test_invalid_values_hit_model_validation():
    with pytest.raises(ValueError):
        parse_settings("[economics]\nhash_rate_hps = 0\n")


def test_dump_round_trip():
    s = parse_settings("[phase1]\nload_pct = 7\n[crawl]\nparallel_sessions = 8\n")
    assert parse_settings(dump_settings(s)) == s


def test_load_from_file(tmp_path):
    path = tmp_path / "t.ini"
    path.write_text("[fingerprint]\nmin_support_fraction = 0.05\n")
    assert load_settings(str(path)).fingerprint.min_support_fraction == 0.05
    assert load_settings(None) == Settings()
