import math

import pytest

from quacklab.config import ConfigError, RunConfig, load_config, parse_assignments
from quacklab.interventions import InterventionKind
from quacklab.norms import NormKind


def test_parse_types_and_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# reference\nvariant = mla   # latent\nintervention=quack\ntau = 1e-1\n"
                    "steps = 20\ncheckpoint = yes\n\nmax_logit_ceiling = inf\n")
    cfg = load_config(path, ["seed = 9"])
    assert cfg.variant == "mla" and cfg.tau == 0.1 and cfg.steps == 20 and cfg.seed == 9
    assert cfg.checkpoint is True and math.isinf(cfg.max_logit_ceiling)


def test_unknown_key_and_bad_value():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_assignments(["learning_rate = 1"])
    with pytest.raises(ConfigError, match="steps"):
        parse_assignments(["steps = many"])
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_assignments(["steps 10"])


def test_text_round_trip():
    cfg = RunConfig(variant="mla", tau=0.01, checkpoint=True, tracked_heads="L0H1,L1H3")
    assert parse_assignments(cfg.to_text().splitlines()) == cfg


@pytest.mark.parametrize("change", [dict(variant="gqa"), dict(intervention="softcap"),
                                    dict(norm_kind="nuclear"), dict(steps=0), dict(tau=-1.0),
                                    dict(seq_len=200), dict(optimizer="sgd"),
                                    dict(tracked_heads="L5H0"), dict(tracked_heads="x")])
def test_validation_rejects(change):
    with pytest.raises(ConfigError):
        RunConfig(**change).validate()


def test_derived_objects():
    cfg = RunConfig(variant="mla", intervention="qk_norm", norm_kind="spectral")
    model = cfg.model_config()
    assert model.attention.qk_norm_enabled and model.attention.d_head == 16
    assert cfg.intervention_spec().kind is InterventionKind.QK_NORM
    assert cfg.intervention_spec().norm_kind is NormKind.SPECTRAL
    assert not RunConfig().model_config().attention.qk_norm_enabled
    assert RunConfig().tracked() == [(1, 2)]
    assert len(RunConfig(tracked_heads="all").tracked()) == 8
