import pytest

from bvhtok.config import ConfigError, PipelineConfig, dump_config, load_config, parse_config


def test_defaults_are_valid():
    cfg = load_config(None)
    assert cfg.tat.compression == 8
    assert (cfg.tat.codebook_size, cfg.tat.num_quantizers, cfg.tat.latent_dim) == (64, 4, 32)
    assert (cfg.owo.d, cfg.owo.layers) == (32, 2)
    assert cfg.depths() == [1, 2, 4, 6, 8]


def test_parse_overrides_and_types():
    cfg = parse_config("[meta]\nversion = 1\n[tat]\nnum_quantizers = 6\n[split]\nfamily_coverage = no\n"
                       "[train]\nlr = 5e-4\n")
    assert cfg.tat.num_quantizers == 6 and cfg.split.family_coverage is False and cfg.train.lr == 5e-4


@pytest.mark.parametrize("text, match", [
    ("[bogus]\nx = 1\n", "unknown config section"),
    ("[tat]\ncodebook = 3\n", "unknown key"),
    ("[tat]\nnum_quantizers = many\n", "cannot parse"),
    ("[meta]\nversion = 2\n", "version"),
    ("[meta]\nauthor = me\n", "unknown key"),
    ("[owo]\nd = 31\n", "even"),
    ("[tat]\nowo_dim = 16\n", "owo_dim"),
    ("[tat]\nstride = 3\n", "stride"),
    ("[sweep]\ndepths = 1,x\n", "depths"),
    ("[pretrain]\nlambda_lca = -1\n", "non-negative"),
    ("not an ini", "malformed"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_dump_round_trip(tmp_path):
    cfg = parse_config("[tat]\nnum_quantizers = 2\n[synth]\nfamilies = 5\n")
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(str(path)) == cfg


def test_section_hash_tracks_changes():
    a, b = PipelineConfig(), parse_config("[train]\nsteps = 10\n")
    assert a.section_hash("owo", "pretrain") == b.section_hash("owo", "pretrain")
    assert a.section_hash("tat", "train") != b.section_hash("tat", "train")
