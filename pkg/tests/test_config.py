import pytest

from drdl.autodiff.optim import ConfigError
from drdl.config import (
    RunConfig,
    build_run_config,
    dump_config,
    load_config_file,
    parse_config_text,
)
from drdl.trainer import TrainConfigError


def test_parse_with_comments_and_dash_keys():
    vals = parse_config_text(
        """
        # comment line
        seed = 3
        iter-pre = 10   # trailing comment
        alpha=0.5
        junk = no
        graph = grid:2x2
        """
    )
    assert vals == {"seed": 3, "iter_pre": 10, "alpha": 0.5, "junk": False, "graph": "grid:2x2"}


@pytest.mark.parametrize(
    "text,match",
    [("nope = 1", "unknown"), ("seed 3", "key = value"), ("seed = three", "int"), ("junk = maybe", "bool")],
)
def test_bad_lines_are_rejected(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_overrides_take_precedence_and_none_is_ignored():
    cfg = build_run_config({"seed": 1, "alpha": 0.2}, {"seed": 5, "alpha": None, "epochs": "7"})
    assert (cfg.seed, cfg.alpha, cfg.epochs) == (5, 0.2, 7)
    with pytest.raises(ConfigError):
        build_run_config(None, {"colour": 1})


def test_validation():
    with pytest.raises(ConfigError):
        build_run_config({"feature": "pixels"})
    with pytest.raises(ConfigError):
        build_run_config({"move_probability": 2.0})
    with pytest.raises(ConfigError):
        RunConfig(alpha=-1.0).train_config()
    with pytest.raises(TrainConfigError):
        RunConfig(iter_pre=0).train_config()


def test_dump_round_trip(tmp_path):
    cfg = RunConfig(seed=4, alpha=0.25, graph="ring", normalize=True, junk=False)
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert build_run_config(load_config_file(path)) == cfg


def test_derived_configs():
    cfg = RunConfig(ids=5, cams=2, per=3, height=16, width=8, epochs=4, iter_pre=2, alpha=0.3)
    sc = cfg.synth_config()
    assert (sc.num_ids, sc.num_cams, sc.per_camera, sc.shape) == (5, 2, 3, (3, 16, 8))
    tc = cfg.train_config()
    assert (tc.total_epochs, tc.iter_pre, tc.weights.alpha) == (4, 2, 0.3)
